//! Synthetic data generation for the simulation study.
//!
//! Each scenario draws `N` independent replicate days on a unit-square grid:
//! a Gaussian-process covariate field with exponential covariance, Bernoulli
//! treatments with log odds affine in the local covariate, a kernel-smoothed
//! confounder, and responses from the marginal structural model
//! `Y = b0 + d1*A + d2*Atilde + h(X) + eps`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::spatial::{KernelSpec, SpatialGrid};
use crate::stats::expit;

/// Shape of the confounder `h(X)` applied to the smoothed field `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfounderVariant {
    /// `h = W`
    #[default]
    Identity,
    /// `h = -W^3`
    NegCube,
    /// `h = exp(W)`
    Exp,
}

impl ConfounderVariant {
    pub fn apply(self, w: f64) -> f64 {
        match self {
            ConfounderVariant::Identity => w,
            ConfounderVariant::NegCube => -w.powi(3),
            ConfounderVariant::Exp => w.exp(),
        }
    }
}

impl std::str::FromStr for ConfounderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "w" => Ok(ConfounderVariant::Identity),
            "negcube" | "neg_cube" => Ok(ConfounderVariant::NegCube),
            "exp" => Ok(ConfounderVariant::Exp),
            other => Err(Error::Validation(format!(
                "unknown confounder variant: {other}"
            ))),
        }
    }
}

/// Full description of one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Cells per grid axis.
    pub side_count: usize,
    /// Independent replicate days per dataset.
    pub replicates: usize,
    /// Spatial range of the exponential covariance of the covariate process.
    pub gp_range: f64,
    /// Intercept of the treatment log odds: `P(A=1) = expit(X + intercept)`.
    pub treat_intercept: f64,
    /// True interference bandwidth used to build the spill-over field.
    pub true_tau: f64,
    pub confounder_variant: ConfounderVariant,
    pub beta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Bandwidth of the Gaussian smoother defining the confounder base `W`.
    pub w_bandwidth: f64,
    /// Whether the smoother defining `W` averages over the cell itself too.
    pub w_include_self: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            side_count: 10,
            replicates: 100,
            gp_range: 0.6,
            treat_intercept: -3.0,
            true_tau: 0.3,
            confounder_variant: ConfounderVariant::Identity,
            beta0: 0.0,
            delta1: 1.0,
            delta2: 1.0,
            noise_sd: 1.0,
            seed: 0,
            w_bandwidth: 0.5,
            w_include_self: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side_count < 2 {
            return Err(Error::Validation("side_count must be at least 2".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Validation("replicates must be positive".into()));
        }
        for (name, v) in [
            ("gp_range", self.gp_range),
            ("true_tau", self.true_tau),
            ("w_bandwidth", self.w_bandwidth),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::Validation(format!(
                "noise_sd must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

/// A generated scenario: every field is `n` locations by `N` replicate days.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub grid: SpatialGrid,
    pub x: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub atilde: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub config: ScenarioConfig,
}

impl SyntheticDataset {
    pub fn n_locations(&self) -> usize {
        self.grid.n()
    }

    pub fn n_replicates(&self) -> usize {
        self.config.replicates
    }
}

/// Draws mean-zero, variance-one Gaussian fields from a fixed covariance
/// factorization.
#[derive(Debug, Clone)]
pub struct GpSampler {
    factor: DMatrix<f64>,
    jitter: f64,
}

impl GpSampler {
    /// Exponential-covariance sampler on a grid: `C(d) = exp(-d / range)`.
    pub fn exponential(grid: &SpatialGrid, range: f64) -> Result<Self> {
        if !(range > 0.0) || !range.is_finite() {
            return Err(Error::Validation(format!(
                "GP range must be positive, got {range}"
            )));
        }
        let cov = grid.distances().map(|d| (-d / range).exp());
        Self::from_covariance(cov)
    }

    /// Sampler from an explicit covariance matrix. Factorization failures are
    /// retried with jitter 1e-10 on the diagonal, escalating tenfold up to
    /// three times.
    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::Shape("covariance matrix must be square".into()));
        }
        let mut jitter = 0.0;
        let mut attempt = cov.clone();
        for retry in 0..=3 {
            if let Some(chol) = attempt.clone().cholesky() {
                return Ok(Self {
                    factor: chol.unpack(),
                    jitter,
                });
            }
            jitter = if retry == 0 { 1e-10 } else { jitter * 10.0 };
            attempt = cov.clone();
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += jitter;
            }
        }
        Err(Error::Numerical(format!(
            "covariance factorization failed even with jitter {jitter:e}"
        )))
    }

    /// Jitter that had to be added to factorize, zero when none was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.factor * z
    }
}

/// One draw of the covariate process on the grid.
pub fn sample_gp_field<R: Rng>(grid: &SpatialGrid, range: f64, rng: &mut R) -> Result<Vec<f64>> {
    let sampler = GpSampler::exponential(grid, range)?;
    Ok(sampler.draw(rng).as_slice().to_vec())
}

/// Independent Bernoulli treatments with `P(A_s = 1) = expit(X_s + intercept)`.
pub fn assign_treatment<R: Rng>(x: &[f64], intercept: f64, rng: &mut R) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("covariate field contains non-finite values".into()));
    }
    Ok(x.iter()
        .map(|&xs| {
            let p = expit(xs + intercept);
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// Row-normalized Gaussian smoothing matrix used to build the confounder.
fn confounder_weights(grid: &SpatialGrid, bandwidth: f64, include_self: bool) -> DMatrix<f64> {
    let n = grid.n();
    let spec = KernelSpec {
        family: crate::spatial::KernelFamily::Gaussian,
        bandwidth,
    };
    let d2 = grid.squared_distances();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let wt = if i == j && !include_self {
                0.0
            } else {
                spec.weight_from_d2(d2[(i, j)], bandwidth)
            };
            w[(i, j)] = wt;
            sum += wt;
        }
        for j in 0..n {
            w[(i, j)] /= sum;
        }
    }
    w
}

/// Smoothed confounder base `W` (a normalized Gaussian-kernel average of `X`)
/// and the confounder `h` under the given variant.
pub fn confounder_field(
    x: &[f64],
    grid: &SpatialGrid,
    variant: ConfounderVariant,
    bandwidth: f64,
    include_self: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != grid.n() {
        return Err(Error::Shape(format!(
            "covariate field has {} values but grid has {} cells",
            x.len(),
            grid.n()
        )));
    }
    let weights = confounder_weights(grid, bandwidth, include_self);
    let w = &weights * DVector::from_column_slice(x);
    let h = w.iter().map(|&v| variant.apply(v)).collect();
    Ok((w.as_slice().to_vec(), h))
}

/// Generates a full scenario. Deterministic in `config`: replicate day `j`
/// draws from stream `j` of `config.seed`, so days may be generated in
/// parallel without changing the result.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let grid = SpatialGrid::unit_square(config.side_count)?;
    let n = grid.n();
    let reps = config.replicates;

    let gp = GpSampler::exponential(&grid, config.gp_range)?;
    let spill = KernelSpec::gaussian(config.true_tau)?.weight_matrix(&grid);
    let conf_weights = confounder_weights(&grid, config.w_bandwidth, config.w_include_self);

    let mut x = DMatrix::<f64>::zeros(n, reps);
    let mut a = DMatrix::<f64>::zeros(n, reps);
    let mut eps = DMatrix::<f64>::zeros(n, reps);
    for j in 0..reps {
        let mut rng: ChaCha12Rng = stream_rng(config.seed, j as u64);
        let xj = gp.draw(&mut rng);
        let aj = assign_treatment(xj.as_slice(), config.treat_intercept, &mut rng)?;
        for i in 0..n {
            x[(i, j)] = xj[i];
            a[(i, j)] = aj[i];
            eps[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }

    let atilde = &spill * &a;
    let w = &conf_weights * &x;
    let h = w.map(|v| config.confounder_variant.apply(v));
    let mut y = DMatrix::<f64>::zeros(n, reps);
    for j in 0..reps {
        for i in 0..n {
            y[(i, j)] = config.beta0
                + config.delta1 * a[(i, j)]
                + config.delta2 * atilde[(i, j)]
                + h[(i, j)]
                + config.noise_sd * eps[(i, j)];
        }
    }

    Ok(SyntheticDataset {
        grid,
        x,
        a,
        atilde,
        w,
        h,
        y,
        config: config.clone(),
    })
}
