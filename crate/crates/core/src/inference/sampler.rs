//! The Gibbs-plus-Metropolis engine shared by every model.
//!
//! Coefficients and the noise variance are conjugate draws; the kernel range
//! moves by a random walk on `z = log(tau - 1/d)`. The design matrix changes
//! in exactly one column (the spill-over exposure) on an accepted range move,
//! so the normal-equation cache is updated by column dot products instead of
//! a full `M' M` recompute. The feedback-cut Step-2 variant additionally
//! refreshes its propensity-summary spline block after each acceptance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::spatial::{KernelFamily, KernelSpec, SpatialGrid};
use crate::stats;

use super::{
    draw_beta_from_normal_equations, draw_sigma2, log_normal_pdf, mh_accept, AdaptationRecord,
    PosteriorSamples, SamplerConfig, TauTransform,
};

/// Rebuilds the propensity-summary spline columns at a new bandwidth
/// (Step 2 only). The block spans `fixed` columns `[start, start + width)`
/// of the design; widths are kept constant by zero-padding degenerate bases.
pub(super) trait ZBlockRefresh {
    fn refresh(&self, tau: f64) -> Result<DMatrix<f64>>;
    fn start(&self) -> usize;
    fn width(&self) -> usize;
}

pub(super) struct Sampler<'a> {
    /// Flattened response, replicate-major (column-major over `n x N`).
    y: DVector<f64>,
    /// Treatment fields, one replicate per column.
    a_mat: &'a DMatrix<f64>,
    grid: &'a SpatialGrid,
    family: KernelFamily,
    transform: TauTransform,
    /// Design matrix: intercept, A, Atilde(tau), then fixed columns.
    m: DMatrix<f64>,
    labels: Vec<String>,
    refresher: Option<Box<dyn ZBlockRefresh + 'a>>,
    // normal-equation cache
    mtm: DMatrix<f64>,
    mty: DVector<f64>,
    // scratch buffers reused across iterations
    w_scratch: DMatrix<f64>,
    at_scratch: DMatrix<f64>,
    mu: DVector<f64>,
    mu_scratch: DVector<f64>,
}

const ATILDE_COL: usize = 2;

impl<'a> Sampler<'a> {
    /// Assembles the design at the initial bandwidth. `fixed` holds every
    /// column after the three core ones, with one label per column.
    pub(super) fn new(
        y: &DMatrix<f64>,
        a_mat: &'a DMatrix<f64>,
        grid: &'a SpatialGrid,
        family: KernelFamily,
        transform: TauTransform,
        initial_tau: f64,
        fixed: DMatrix<f64>,
        fixed_labels: Vec<String>,
        refresher: Option<Box<dyn ZBlockRefresh + 'a>>,
    ) -> Result<Self> {
        let n = grid.n();
        let reps = a_mat.ncols();
        let rows = n * reps;
        if y.nrows() != n || y.ncols() != reps {
            return Err(Error::Shape(format!(
                "response is {}x{} but treatments are {n}x{reps}",
                y.nrows(),
                y.ncols()
            )));
        }
        if fixed.nrows() != rows {
            return Err(Error::Shape(format!(
                "fixed design block has {} rows, expected {rows}",
                fixed.nrows()
            )));
        }
        if fixed.ncols() != fixed_labels.len() {
            return Err(Error::Shape("one label per fixed column is required".into()));
        }
        if initial_tau <= transform.floor {
            return Err(Error::Domain(format!(
                "initial tau {initial_tau} is not above the floor {}",
                transform.floor
            )));
        }

        let p = 3 + fixed.ncols();
        let mut m = DMatrix::<f64>::zeros(rows, p);
        m.column_mut(0).fill(1.0);
        m.set_column(1, &DVector::from_column_slice(a_mat.as_slice()));
        let spec = KernelSpec {
            family,
            bandwidth: initial_tau,
        };
        spec.validate()?;
        let atilde = spec.weight_matrix(grid) * a_mat;
        m.set_column(ATILDE_COL, &DVector::from_column_slice(atilde.as_slice()));
        m.view_mut((0, 3), (rows, fixed.ncols())).copy_from(&fixed);

        let mut labels = vec![
            "beta0".to_string(),
            "delta1".to_string(),
            "delta2".to_string(),
        ];
        labels.extend(fixed_labels);

        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("design matrix contains non-finite values".into()));
        }

        let y_flat = DVector::from_column_slice(y.as_slice());
        let mtm = m.transpose() * &m;
        let mty = m.transpose() * &y_flat;
        Ok(Self {
            y: y_flat,
            a_mat,
            grid,
            family,
            transform,
            m,
            labels,
            refresher,
            mtm,
            mty,
            w_scratch: DMatrix::<f64>::zeros(n, n),
            at_scratch: DMatrix::<f64>::zeros(n, reps),
            mu: DVector::<f64>::zeros(rows),
            mu_scratch: DVector::<f64>::zeros(rows),
        })
    }

    pub(super) fn labels(&self) -> &[String] {
        &self.labels
    }

    pub(super) fn design(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Recomputes row/column `c` of the normal-equation cache after column
    /// `c` of the design changed.
    fn refresh_normal_equations_column(&mut self, c: usize) {
        let col = self.m.column(c);
        for j in 0..self.m.ncols() {
            let v = col.dot(&self.m.column(j));
            self.mtm[(c, j)] = v;
            self.mtm[(j, c)] = v;
        }
        self.mty[c] = col.dot(&self.y);
    }

    /// Ridge-stabilized least squares for the starting point.
    fn initial_coefficients(&self) -> Result<DVector<f64>> {
        let p = self.m.ncols();
        let ridge = 1e-8 * (self.mtm.trace() / p as f64).max(1.0);
        let mut reg = self.mtm.clone();
        for k in 0..p {
            reg[(k, k)] += ridge;
        }
        let chol = reg
            .cholesky()
            .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
        Ok(chol.solve(&self.mty))
    }

    pub(super) fn run(
        &mut self,
        config: &SamplerConfig,
        initial_tau: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<PosteriorSamples> {
        config.validate()?;
        let rows = self.y.len();
        let p = self.m.ncols();

        let mut beta = self.initial_coefficients()?;
        self.mu.gemv(1.0, &self.m, &beta, 0.0);
        let mut rss = (&self.y - &self.mu).norm_squared();
        let mut sigma2 = (rss / rows as f64).max(1e-12);
        let mut z = self.transform.to_z(initial_tau)?;

        let mut proposal_sd = config.initial_proposal_sd;
        let mut window_accepts = 0usize;
        let mut post_accepts = 0usize;
        let mut adaptation = Vec::new();

        let total = config.burn_in + config.samples;
        let mut draws = DMatrix::<f64>::zeros(config.samples, p + 2);

        for iter in 0..total {
            let in_burn_in = iter < config.burn_in;

            // Metropolis step on z = log(tau - floor). The acceptance ratio
            // sees the bandwidth only through the spill-over column; any
            // propensity-summary block stays frozen until after acceptance.
            let zp = z + proposal_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            let tau_prop = self.transform.to_tau(zp);
            let spec = KernelSpec {
                family: self.family,
                bandwidth: tau_prop,
            };
            spec.fill_weight_matrix_at(self.grid, tau_prop, &mut self.w_scratch);
            self.at_scratch.gemm(1.0, &self.w_scratch, self.a_mat, 0.0);

            let delta2 = beta[ATILDE_COL];
            let at_new = self.at_scratch.as_slice();
            let mut rss_prop = 0.0;
            for i in 0..rows {
                let mu_i = self.mu[i] + delta2 * (at_new[i] - self.m[(i, ATILDE_COL)]);
                self.mu_scratch[i] = mu_i;
                let r = self.y[i] - mu_i;
                rss_prop += r * r;
            }
            let log_ratio = (rss - rss_prop) / (2.0 * sigma2)
                + log_normal_pdf(zp, config.tau_prior_mean, config.tau_prior_sd)
                - log_normal_pdf(z, config.tau_prior_mean, config.tau_prior_sd);
            if mh_accept(log_ratio, rng) {
                z = zp;
                self.m
                    .set_column(ATILDE_COL, &DVector::from_column_slice(at_new));
                std::mem::swap(&mut self.mu, &mut self.mu_scratch);
                rss = rss_prop;
                self.refresh_normal_equations_column(ATILDE_COL);
                if let Some(refresher) = self.refresher.as_ref() {
                    let block = refresher.refresh(tau_prop)?;
                    let (start, width) = (3 + refresher.start(), refresher.width());
                    if block.ncols() != width || block.nrows() != rows {
                        return Err(Error::Shape(
                            "refreshed summary block has the wrong shape".into(),
                        ));
                    }
                    self.m.view_mut((0, start), (rows, width)).copy_from(&block);
                    for c in start..start + width {
                        self.refresh_normal_equations_column(c);
                    }
                    self.mu.gemv(1.0, &self.m, &beta, 0.0);
                    rss = (&self.y - &self.mu).norm_squared();
                }
                window_accepts += 1;
                if !in_burn_in {
                    post_accepts += 1;
                }
            }

            if (iter + 1) % config.adapt_window == 0 {
                let rate = window_accepts as f64 / config.adapt_window as f64;
                if in_burn_in {
                    proposal_sd *= (rate - config.target_acceptance).exp();
                }
                adaptation.push(AdaptationRecord {
                    iteration: iter + 1,
                    acceptance: rate,
                    proposal_sd,
                    during_burn_in: in_burn_in,
                });
                window_accepts = 0;
            }

            // Gibbs draw of all coefficients given (tau, sigma2).
            beta = draw_beta_from_normal_equations(
                &self.mtm,
                &self.mty,
                sigma2,
                config.prior_variance,
                rng,
            )?;
            self.mu.gemv(1.0, &self.m, &beta, 0.0);
            rss = (&self.y - &self.mu).norm_squared();
            if !rss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite residual sum of squares at iteration {iter}"
                )));
            }

            // Gibbs draw of the noise variance.
            sigma2 = draw_sigma2(
                config.sigma2_shape + rows as f64 / 2.0,
                config.sigma2_rate + rss / 2.0,
                rng,
            );

            if !in_burn_in {
                let s = iter - config.burn_in;
                for k in 0..p {
                    draws[(s, k)] = beta[k];
                }
                draws[(s, p)] = sigma2;
                draws[(s, p + 1)] = self.transform.to_tau(z);
            }
        }

        let mut labels = self.labels.clone();
        labels.push("sigma2".to_string());
        labels.push("tau".to_string());
        let post_windows = (config.samples / config.adapt_window).max(1);
        let acceptance_rate = post_accepts as f64 / (post_windows * config.adapt_window).min(config.samples).max(1) as f64;
        Ok(PosteriorSamples {
            labels,
            draws,
            acceptance_rate: if config.samples > 0 {
                post_accepts as f64 / config.samples as f64
            } else {
                acceptance_rate
            },
            adaptation,
            proposal_sd,
            tau_floor: self.transform.floor,
        })
    }
}

/// Equal-tailed summary of one marginal.
pub(super) fn summarize_draws(values: &[f64]) -> super::ParamSummary {
    let mean = stats::mean(values);
    let sd = stats::sample_sd(values).unwrap_or(0.0);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    super::ParamSummary {
        mean,
        sd,
        q2_5: stats::quantile_sorted(&sorted, 0.025),
        q97_5: stats::quantile_sorted(&sorted, 0.975),
    }
}
