//! Clamped B-spline bases for conditioning on propensity summaries.
//!
//! Bases are built over the observed range of a variable with knots at fixed
//! intervals and boundary knots repeated `degree + 1` times, so the basis is
//! a partition of unity on `[lo, hi]`. Evaluation clamps out-of-range inputs
//! to the boundary instead of extrapolating.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGENERATE_RANGE: f64 = 1e-12;

/// A clamped B-spline basis on a fixed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    basis_count: usize,
    knots: Vec<f64>,
    lo: f64,
    hi: f64,
    /// Set when the input range was degenerate and the basis fell back to a
    /// single constant column.
    degenerate: bool,
}

impl SplineBasis {
    /// Builds a basis with `basis_count` functions of the given degree, with
    /// knots at fixed intervals over the range of `values`.
    ///
    /// A degenerate input range (max == min) falls back to a single constant
    /// column, flagged via [`is_degenerate`](Self::is_degenerate).
    pub fn build(values: &[f64], basis_count: usize, degree: usize) -> Result<Self> {
        if basis_count < degree + 1 {
            return Err(Error::Validation(format!(
                "basis_count {basis_count} must be at least degree + 1 = {}",
                degree + 1
            )));
        }
        if values.is_empty() {
            return Err(Error::Validation("cannot build a basis on no values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("basis input contains non-finite values".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::over_range(lo, hi, basis_count, degree)
    }

    /// Builds a basis directly over `[lo, hi]`.
    pub fn over_range(lo: f64, hi: f64, basis_count: usize, degree: usize) -> Result<Self> {
        if basis_count < degree + 1 {
            return Err(Error::Validation(format!(
                "basis_count {basis_count} must be at least degree + 1 = {}",
                degree + 1
            )));
        }
        if hi - lo < DEGENERATE_RANGE {
            return Ok(Self {
                degree,
                basis_count: 1,
                knots: vec![lo, hi.max(lo + 1.0)],
                lo,
                hi,
                degenerate: true,
            });
        }
        let interior = basis_count - degree - 1;
        let mut knots = Vec::with_capacity(basis_count + degree + 1);
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        for k in 1..=interior {
            knots.push(lo + (hi - lo) * k as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self {
            degree,
            basis_count,
            knots,
            lo,
            hi,
            degenerate: false,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions (columns of the evaluated matrix).
    pub fn len(&self) -> usize {
        self.basis_count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Index of the knot span containing `x` (after clamping).
    fn span(&self, x: f64) -> usize {
        let j = self.basis_count;
        if x >= self.knots[j] {
            return j - 1;
        }
        // Binary search over spans [degree, j).
        let mut lo = self.degree;
        let mut hi = j;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// The `degree + 1` non-vanishing basis functions at `x`, plus the span.
    fn nonzero_at(&self, x: f64) -> (usize, Vec<f64>) {
        let x = x.clamp(self.lo, self.hi);
        let span = self.span(x);
        let p = self.degree;
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        (span, vals)
    }

    /// Evaluates all basis functions at a single point.
    pub fn evaluate_one(&self, x: f64) -> Vec<f64> {
        if self.degenerate {
            return vec![1.0];
        }
        let (span, vals) = self.nonzero_at(x);
        let mut row = vec![0.0; self.basis_count];
        for (r, v) in vals.into_iter().enumerate() {
            row[span - self.degree + r] = v;
        }
        row
    }

    /// Design matrix: one row per input, one column per basis function. Rows
    /// sum to 1 and have at most `degree + 1` nonzero entries.
    pub fn evaluate(&self, xs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(xs.len(), self.basis_count);
        if self.degenerate {
            out.fill(1.0);
            return out;
        }
        for (i, &x) in xs.iter().enumerate() {
            let (span, vals) = self.nonzero_at(x);
            for (r, v) in vals.into_iter().enumerate() {
                out[(i, span - self.degree + r)] = v;
            }
        }
        out
    }
}
