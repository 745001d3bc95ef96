//! Direct-treatment propensities and parametric spill-over summaries.
//!
//! With treatments conditionally independent given local covariates, the
//! joint propensity of `(A_s, Atilde_s)` factorizes: a logistic model gives
//! the direct propensity, and the spill-over law is summarized by the exact
//! zero-inflation probability and first two moments of the kernel-weighted
//! Bernoulli sum:
//!
//! ```text
//! p0(s)  = prod over s' != s with w > 0 of (1 - p_s')
//! E(s)   = sum over s' != s of w * p
//! Var(s) = sum over s' != s of w^2 * p * (1 - p)
//! ```
//!
//! These closed forms are what the Monte Carlo tests check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{KernelSpec, SpatialGrid};
use crate::spline::SplineBasis;
use crate::stats::{expit, logit};

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
const SEPARATION_BOUND: f64 = 1e8;

/// A fitted logistic regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max absolute score component at the final iterate.
    pub max_gradient: f64,
}

impl LogisticModel {
    /// Fitted probabilities for a design matrix.
    pub fn fitted(&self, design: &DMatrix<f64>) -> DVector<f64> {
        (design * &self.coefficients).map(expit)
    }
}

/// Maximum-likelihood logistic fit via iteratively reweighted least squares.
///
/// Converges when no coefficient moves more than 1e-8 in an iteration, up to
/// 100 iterations. Rank-deficient designs and complete separation are
/// reported as errors rather than returning garbage coefficients.
pub fn fit_logistic(design: &DMatrix<f64>, labels: &[f64]) -> Result<LogisticModel> {
    let (n, p) = design.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} design rows but {} labels",
            labels.len()
        )));
    }
    if n < p {
        return Err(Error::SingularDesign(format!(
            "{n} observations cannot identify {p} coefficients"
        )));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("design contains non-finite values".into()));
    }
    let ones = labels.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::NonConvergence(
            "all labels identical: the logistic MLE does not exist".into(),
        ));
    }

    let y = DVector::from_column_slice(labels);
    let mut beta = DVector::<f64>::zeros(p);
    let mut weighted = DMatrix::<f64>::zeros(n, p);
    for iter in 1..=IRLS_MAX_ITER {
        let eta = design * &beta;
        let probs = eta.map(expit);
        // Working response z = eta + (y - p) / w with weights w = p (1 - p),
        // floored to keep saturated observations from blowing up the solve.
        let mut z = DVector::<f64>::zeros(n);
        for i in 0..n {
            let w = (probs[i] * (1.0 - probs[i])).max(1e-10);
            z[i] = eta[i] + (y[i] - probs[i]) / w;
            for j in 0..p {
                weighted[(i, j)] = design[(i, j)] * w;
            }
        }
        let xtwx = design.transpose() * &weighted;
        let xtwz = weighted.transpose() * &z;
        let chol = xtwx.cholesky().ok_or_else(|| {
            Error::SingularDesign("weighted normal equations are rank deficient".into())
        })?;
        let beta_new = chol.solve(&xtwz);
        if beta_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergence(
                "IRLS produced non-finite coefficients".into(),
            ));
        }
        let change = (&beta_new - &beta).amax();
        beta = beta_new;
        if beta.amax() > SEPARATION_BOUND {
            return Err(Error::NonConvergence(format!(
                "coefficients exceeded {SEPARATION_BOUND:e} after {iter} iterations; \
                 the data are likely completely separated"
            )));
        }
        if change < IRLS_TOL {
            let probs = (design * &beta).map(expit);
            let grad = design.transpose() * (&y - &probs);
            return Ok(LogisticModel {
                coefficients: beta,
                converged: true,
                iterations: iter,
                max_gradient: grad.amax(),
            });
        }
    }
    Err(Error::NonConvergence(format!(
        "IRLS did not converge in {IRLS_MAX_ITER} iterations"
    )))
}

/// How the direct-propensity design is built from covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropensityDesign {
    /// Intercept plus each covariate linearly (the simulation-study form).
    #[default]
    Affine,
    /// Intercept plus a B-spline expansion of each covariate.
    Splines { basis_count: usize, degree: usize },
}

/// A fitted direct-propensity model bundled with its design recipe, so new
/// covariate values map to fitted probabilities the same way.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub design: PropensityDesign,
    pub model: LogisticModel,
    /// One basis per covariate under the spline design; empty when affine.
    pub bases: Vec<SplineBasis>,
}

impl PropensityFit {
    /// Fits `A` on covariates pooled over replicates. Each covariate is an
    /// `n x N` matrix aligned with `labels`.
    pub fn fit(
        covariates: &[DMatrix<f64>],
        labels: &DMatrix<f64>,
        design: PropensityDesign,
    ) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::Validation("at least one covariate is required".into()));
        }
        for c in covariates {
            if c.shape() != labels.shape() {
                return Err(Error::Shape(
                    "covariate and label fields must have identical shape".into(),
                ));
            }
        }
        let bases = match design {
            PropensityDesign::Affine => Vec::new(),
            PropensityDesign::Splines {
                basis_count,
                degree,
            } => covariates
                .iter()
                .map(|c| SplineBasis::build(c.as_slice(), basis_count, degree))
                .collect::<Result<Vec<_>>>()?,
        };
        let m = build_design(covariates, design, &bases);
        let model = fit_logistic(&m, labels.as_slice())?;
        Ok(Self {
            design,
            model,
            bases,
        })
    }

    /// Fitted probabilities for covariate fields, shaped like the inputs.
    pub fn fitted_matrix(&self, covariates: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        if covariates.is_empty() {
            return Err(Error::Validation("at least one covariate is required".into()));
        }
        let (n, reps) = covariates[0].shape();
        let m = build_design(covariates, self.design, &self.bases);
        let p = self.model.fitted(&m);
        Ok(DMatrix::from_column_slice(n, reps, p.as_slice()))
    }
}

fn build_design(
    covariates: &[DMatrix<f64>],
    design: PropensityDesign,
    bases: &[SplineBasis],
) -> DMatrix<f64> {
    let rows = covariates[0].len();
    match design {
        PropensityDesign::Affine => {
            let mut m = DMatrix::<f64>::zeros(rows, 1 + covariates.len());
            m.column_mut(0).fill(1.0);
            for (k, c) in covariates.iter().enumerate() {
                m.set_column(k + 1, &DVector::from_column_slice(c.as_slice()));
            }
            m
        }
        PropensityDesign::Splines { .. } => {
            let cols: usize = 1 + bases.iter().map(SplineBasis::len).sum::<usize>();
            let mut m = DMatrix::<f64>::zeros(rows, cols);
            m.column_mut(0).fill(1.0);
            let mut at = 1;
            for (c, basis) in covariates.iter().zip(bases) {
                let block = basis.evaluate(c.as_slice());
                m.view_mut((0, at), (rows, basis.len())).copy_from(&block);
                at += basis.len();
            }
            m
        }
    }
}

/// Representation of the direct-propensity summary `Z1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Z1Repr {
    /// Log of the fitted propensity (the default).
    #[default]
    Log,
    /// The fitted propensity itself.
    Raw,
}

/// Direct-propensity summary per location/replicate.
pub fn direct_summary(phat: &DMatrix<f64>, repr: Z1Repr) -> DMatrix<f64> {
    match repr {
        Z1Repr::Log => phat.map(f64::ln),
        Z1Repr::Raw => phat.clone(),
    }
}

/// Clamping bounds keeping the transformed summaries finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClampPolicy {
    /// `p0` is clamped into `[bound, 1 - bound]` before the logit.
    pub p0_bound: f64,
    /// Mean and variance are floored here before the log.
    pub moment_floor: f64,
}

impl Default for ClampPolicy {
    fn default() -> Self {
        Self {
            p0_bound: 1e-12,
            moment_floor: 1e-12,
        }
    }
}

/// Exact zero-probability and moments of the spill-over sum under
/// conditionally independent Bernoulli treatments, for explicit kernel
/// weights (entries in `[0, 1]`, zero on the diagonal). Columns of `phat`
/// are independent replicates.
pub fn spillover_moments(
    phat: &DMatrix<f64>,
    weights: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = phat.nrows();
    if weights.nrows() != n || weights.ncols() != n {
        return Err(Error::Shape(format!(
            "weight matrix is {}x{} but there are {n} locations",
            weights.nrows(),
            weights.ncols()
        )));
    }
    // Guard the logs below; fitted propensities saturate only for extreme
    // linear predictors.
    let p = phat.map(|v| v.clamp(1e-15, 1.0 - 1e-15));
    let mean = weights * &p;
    let w2 = weights.map(|w| w * w);
    let var = &w2 * p.map(|v| v * (1.0 - v));
    let mask = weights.map(|w| if w > 0.0 { 1.0 } else { 0.0 });
    let log_p0 = &mask * p.map(|v| (1.0 - v).ln());
    Ok((log_p0.map(f64::exp), mean, var))
}

/// Transformed spill-over summaries `(Z2, Z3, Z4)` for one bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct SummarySet {
    pub tau: f64,
    /// `logit(p0)` after clamping.
    pub z2: DMatrix<f64>,
    /// `log E(Atilde)` after flooring.
    pub z3: DMatrix<f64>,
    /// `log Var(Atilde)` after flooring.
    pub z4: DMatrix<f64>,
    /// Number of entries the clamping policy had to touch.
    pub clamp_events: usize,
}

/// Spill-over summaries at the spec's bandwidth from a grid's cached
/// distances.
pub fn spillover_summary(
    phat: &DMatrix<f64>,
    grid: &SpatialGrid,
    spec: &KernelSpec,
    clamp: &ClampPolicy,
) -> Result<SummarySet> {
    spec.validate()?;
    if phat.nrows() != grid.n() {
        return Err(Error::Shape(format!(
            "propensity field has {} rows but grid has {} cells",
            phat.nrows(),
            grid.n()
        )));
    }
    if phat.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Validation("propensities must lie in [0, 1]".into()));
    }
    let weights = spec.weight_matrix(grid);
    let (p0, mean, var) = spillover_moments(phat, &weights)?;
    let mut clamp_events = 0usize;
    let z2 = p0.map(|v| {
        let c = v.clamp(clamp.p0_bound, 1.0 - clamp.p0_bound);
        if c != v {
            clamp_events += 1;
        }
        logit(c)
    });
    let mut floor = |v: f64| {
        if v < clamp.moment_floor {
            clamp_events += 1;
            clamp.moment_floor.ln()
        } else {
            v.ln()
        }
    };
    let z3 = mean.map(&mut floor);
    let z4 = var.map(&mut floor);
    Ok(SummarySet {
        tau: spec.bandwidth,
        z2,
        z3,
        z4,
        clamp_events,
    })
}

/// Simulated spill-over draws at one bandwidth.
#[derive(Debug, Clone)]
pub struct SpilloverDraws {
    pub tau: f64,
    /// `n x draws`: column `k` is the spill-over field of simulated
    /// treatment field `k`.
    pub samples: DMatrix<f64>,
}

/// Simulates treatment fields from the fitted propensities and returns their
/// spill-over fields for each candidate bandwidth. This is the empirical
/// check on the parametric-family choice.
pub fn simulate_spillover_distribution<R: Rng>(
    phat: &[f64],
    grid: &SpatialGrid,
    family: crate::spatial::KernelFamily,
    taus: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<Vec<SpilloverDraws>> {
    if draws == 0 {
        return Err(Error::Validation("draws must be at least 1".into()));
    }
    if phat.len() != grid.n() {
        return Err(Error::Shape(format!(
            "propensity field has {} values but grid has {} cells",
            phat.len(),
            grid.n()
        )));
    }
    let n = grid.n();
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let spec = KernelSpec {
            family,
            bandwidth: tau,
        };
        spec.validate()?;
        let weights = spec.weight_matrix(grid);
        let mut fields = DMatrix::<f64>::zeros(n, draws);
        for k in 0..draws {
            for i in 0..n {
                fields[(i, k)] = if rng.random::<f64>() < phat[i] { 1.0 } else { 0.0 };
            }
        }
        out.push(SpilloverDraws {
            tau,
            samples: &weights * fields,
        });
    }
    Ok(out)
}

/// Centering/scaling transform recorded so it can be replayed on new data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Self {
        let mean = crate::stats::mean(values);
        let sd = crate::stats::sample_sd(values).unwrap_or(0.0);
        Self {
            mean,
            sd: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|v| self.apply(v))
    }
}

/// The full Step-1 product: `Z1` once, `(Z2, Z3, Z4)` per candidate
/// bandwidth, all on the raw (unstandardized) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensitySummary {
    pub z1: DMatrix<f64>,
    pub z1_repr: Z1Repr,
    pub sets: Vec<SummarySet>,
}

impl PropensitySummary {
    pub fn compute(
        phat: &DMatrix<f64>,
        grid: &SpatialGrid,
        family: crate::spatial::KernelFamily,
        taus: &[f64],
        clamp: &ClampPolicy,
        z1_repr: Z1Repr,
    ) -> Result<Self> {
        let mut sets = Vec::with_capacity(taus.len());
        for &tau in taus {
            let spec = KernelSpec {
                family,
                bandwidth: tau,
            };
            sets.push(spillover_summary(phat, grid, &spec, clamp)?);
        }
        Ok(Self {
            z1: direct_summary(phat, z1_repr),
            z1_repr,
            sets,
        })
    }

    pub fn taus(&self) -> Vec<f64> {
        self.sets.iter().map(|s| s.tau).collect()
    }

    pub fn clamp_events(&self) -> usize {
        self.sets.iter().map(|s| s.clamp_events).sum()
    }
}

/// Produces summaries on demand for the feedback-cut Step-2 sampler, which
/// refreshes `Zbar(tau)` after each accepted bandwidth move.
#[derive(Debug, Clone)]
pub struct SummaryFactory<'a> {
    pub phat: DMatrix<f64>,
    pub grid: &'a SpatialGrid,
    pub family: crate::spatial::KernelFamily,
    pub clamp: ClampPolicy,
    pub z1_repr: Z1Repr,
}

impl<'a> SummaryFactory<'a> {
    pub fn set_at(&self, tau: f64) -> Result<SummarySet> {
        let spec = KernelSpec {
            family: self.family,
            bandwidth: tau,
        };
        spillover_summary(&self.phat, self.grid, &spec, &self.clamp)
    }

    pub fn z1(&self) -> DMatrix<f64> {
        direct_summary(&self.phat, self.z1_repr)
    }
}
