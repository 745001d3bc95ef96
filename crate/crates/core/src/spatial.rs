//! Spatial grids, interference kernels, spill-over fields, and kernel
//! smoothing.
//!
//! Locations live on a square lattice with physical coordinates (the unit
//! square for simulated data, degrees latitude/longitude for ingested
//! rasters, treated as planar). The pairwise distance matrix is computed
//! once per grid and shared by every operation that needs it; spill-over
//! recomputation at each Metropolis proposal is the hot path and only ever
//! re-evaluates kernel weights, never distances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A square lattice of spatial locations with cached pairwise distances.
///
/// Cells are ordered row-major: location `i` sits at row `i / side_count`,
/// column `i % side_count`.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    side_count: usize,
    spacing: f64,
    coords: Vec<(f64, f64)>,
    dist: DMatrix<f64>,
    dist2: DMatrix<f64>,
}

impl SpatialGrid {
    /// Lattice with the given cells per axis and physical spacing between
    /// adjacent cells.
    pub fn lattice(side_count: usize, spacing: f64) -> Result<Self> {
        if side_count == 0 {
            return Err(Error::Validation("side_count must be positive".into()));
        }
        if !(spacing > 0.0) {
            return Err(Error::Validation(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        let mut coords = Vec::with_capacity(side_count * side_count);
        for row in 0..side_count {
            for col in 0..side_count {
                coords.push((col as f64 * spacing, row as f64 * spacing));
            }
        }
        let n = coords.len();
        let dist2 = DMatrix::from_fn(n, n, |i, j| {
            let (xi, yi) = coords[i];
            let (xj, yj) = coords[j];
            (xi - xj).powi(2) + (yi - yj).powi(2)
        });
        let dist = dist2.map(f64::sqrt);
        Ok(Self {
            side_count,
            spacing,
            coords,
            dist,
            dist2,
        })
    }

    /// Lattice spanning the unit square: `side_count` cells per axis with
    /// spacing `1 / (side_count - 1)`, so a 3x3 grid has spacing 0.5.
    pub fn unit_square(side_count: usize) -> Result<Self> {
        if side_count < 2 {
            return Err(Error::Validation(
                "unit-square grid needs at least 2 cells per axis".into(),
            ));
        }
        Self::lattice(side_count, 1.0 / (side_count as f64 - 1.0))
    }

    /// Number of locations, `side_count` squared.
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn side_count(&self) -> usize {
        self.side_count
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Euclidean distance between locations `i` and `j` in grid units.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.dist[(i, j)]
    }

    /// Cached distance matrix.
    pub fn distances(&self) -> &DMatrix<f64> {
        &self.dist
    }

    /// Cached squared-distance matrix (the Gaussian kernel only needs d^2).
    pub fn squared_distances(&self) -> &DMatrix<f64> {
        &self.dist2
    }

    /// Row-major cell index for `(row, col)`.
    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.side_count + col
    }

    /// `(row, col)` of a cell index.
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.side_count, index % self.side_count)
    }
}

/// Interference kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// Smoothly decaying: `w(d) = exp{-(d / tau)^2}`.
    Gaussian,
    /// Hard cutoff: `w(d) = 1` iff `d < tau`. Recovers partial interference
    /// when clusters are separated by more than `tau`.
    Indicator,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "indicator" => Ok(KernelFamily::Indicator),
            other => Err(Error::Validation(format!("unknown kernel family: {other}"))),
        }
    }
}

/// A kernel family plus its bandwidth `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        let spec = Self { family, bandwidth };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn indicator(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Indicator, bandwidth)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::InvalidKernel(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Kernel weight from a squared distance; avoids the sqrt on the hot path.
    #[inline]
    pub(crate) fn weight_from_d2(&self, d2: f64, tau: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-d2 / (tau * tau)).exp(),
            KernelFamily::Indicator => {
                if d2 < tau * tau {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Off-diagonal weight matrix `W[i][j] = w(||s_i - s_j||)`, `W[i][i] = 0`,
    /// evaluated at bandwidth `tau` from the grid's cached distances.
    pub fn weight_matrix_at(&self, grid: &SpatialGrid, tau: f64) -> DMatrix<f64> {
        let mut w = DMatrix::<f64>::zeros(grid.n(), grid.n());
        self.fill_weight_matrix_at(grid, tau, &mut w);
        w
    }

    /// In-place variant of [`weight_matrix_at`](Self::weight_matrix_at) for
    /// per-proposal reuse inside the sampler.
    pub fn fill_weight_matrix_at(&self, grid: &SpatialGrid, tau: f64, out: &mut DMatrix<f64>) {
        let n = grid.n();
        assert_eq!(out.nrows(), n);
        assert_eq!(out.ncols(), n);
        let d2 = &grid.dist2;
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] = if i == j {
                    0.0
                } else {
                    self.weight_from_d2(d2[(i, j)], tau)
                };
            }
        }
    }

    /// Weight matrix at the spec's own bandwidth.
    pub fn weight_matrix(&self, grid: &SpatialGrid) -> DMatrix<f64> {
        self.weight_matrix_at(grid, self.bandwidth)
    }
}

/// Kernel weight `w_tau(d)` in `[0, 1]`.
pub fn kernel_weight(d: f64, spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    if d < 0.0 || !d.is_finite() {
        return Err(Error::Domain(format!(
            "distance must be nonnegative and finite, got {d}"
        )));
    }
    Ok(spec.weight_from_d2(d * d, spec.bandwidth))
}

/// One real value per grid cell, with an optional missing-data mask.
///
/// `mask[i] == false` marks cell `i` as missing; a field without a mask is
/// fully observed. Values under a missing mask entry are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl ScalarField {
    /// A fully observed field.
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, mask: None }
    }

    /// A field with explicit missingness: `None` entries are missing.
    pub fn from_options(values: Vec<Option<f64>>) -> Self {
        let mask: Vec<bool> = values.iter().map(Option::is_some).collect();
        let values = values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        if mask.iter().all(|&m| m) {
            Self {
                values,
                mask: None,
            }
        } else {
            Self {
                values,
                mask: Some(mask),
            }
        }
    }

    pub fn constant(value: f64, n: usize) -> Self {
        Self::new(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[i])
    }

    pub fn has_missing(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.iter().any(|&v| !v))
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        if self.is_observed(i) {
            Some(self.values[i])
        } else {
            None
        }
    }

    fn check_aligned(&self, grid: &SpatialGrid) -> Result<()> {
        if self.len() != grid.n() {
            return Err(Error::Shape(format!(
                "field has {} values but grid has {} cells",
                self.len(),
                grid.n()
            )));
        }
        Ok(())
    }
}

/// Spill-over treatment field: at each location, the kernel-weighted sum of
/// treatments at all *other* locations.
pub fn spillover_field(
    treatment: &ScalarField,
    grid: &SpatialGrid,
    spec: &KernelSpec,
) -> Result<ScalarField> {
    spec.validate()?;
    treatment.check_aligned(grid)?;
    if treatment.has_missing() {
        return Err(Error::Validation(
            "spill-over field requires a fully observed treatment field".into(),
        ));
    }
    let n = grid.n();
    let a = treatment.values();
    let d2 = grid.squared_distances();
    let tau = spec.bandwidth;
    let mut out = vec![0.0; n];
    for (i, out_i) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                acc += spec.weight_from_d2(d2[(i, j)], tau) * a[j];
            }
        }
        *out_i = acc;
    }
    Ok(ScalarField::new(out))
}

/// Spill-over for a stack of replicate treatment fields, one per column of
/// `treatments` (n x N). Equals `W * A` with `W` the off-diagonal weight
/// matrix.
pub fn spillover_matrix(
    treatments: &DMatrix<f64>,
    grid: &SpatialGrid,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if treatments.nrows() != grid.n() {
        return Err(Error::Shape(format!(
            "treatment matrix has {} rows but grid has {} cells",
            treatments.nrows(),
            grid.n()
        )));
    }
    Ok(spec.weight_matrix(grid) * treatments)
}

/// Fill missing cells with a Gaussian-kernel weighted average of the observed
/// cells. Observed cells pass through unchanged.
pub fn kernel_smooth_impute(
    field: &ScalarField,
    grid: &SpatialGrid,
    bandwidth: f64,
) -> Result<ScalarField> {
    field.check_aligned(grid)?;
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Validation(format!(
            "bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    if !field.has_missing() {
        return Ok(ScalarField::new(field.values().to_vec()));
    }
    let n = grid.n();
    let observed: Vec<usize> = (0..n).filter(|&i| field.is_observed(i)).collect();
    if observed.is_empty() {
        return Err(Error::AllMissing);
    }
    let d2 = grid.squared_distances();
    let spec = KernelSpec::gaussian(bandwidth)?;
    let mut out = vec![0.0; n];
    for i in 0..n {
        if field.is_observed(i) {
            out[i] = field.values()[i];
            continue;
        }
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for &j in &observed {
            let w = spec.weight_from_d2(d2[(i, j)], bandwidth);
            wsum += w;
            acc += w * field.values()[j];
        }
        // Gaussian weights are strictly positive, so wsum > 0 whenever any
        // cell is observed.
        out[i] = acc / wsum;
    }
    Ok(ScalarField::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gaussian(tau: f64) -> KernelSpec {
        KernelSpec::gaussian(tau).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = SpatialGrid::unit_square(3).unwrap();
        assert_eq!(g.n(), 9);
        assert_relative_eq!(g.spacing(), 0.5);
        for i in 0..g.n() {
            assert_eq!(g.distance(i, i), 0.0);
            for j in 0..g.n() {
                assert_eq!(g.distance(i, j), g.distance(j, i));
                if i != j {
                    assert!(g.distance(i, j) > 0.0);
                }
            }
        }
        assert_eq!(g.cell_index(1, 1), 4);
        assert_eq!(g.row_col(4), (1, 1));
    }

    #[test]
    fn kernel_weight_matches_definitions() {
        let spec = gaussian(0.3);
        assert_relative_eq!(kernel_weight(0.0, &spec).unwrap(), 1.0);
        assert_relative_eq!(
            kernel_weight(0.3, &spec).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );

        let ind = KernelSpec::indicator(0.3).unwrap();
        assert_eq!(kernel_weight(0.29, &ind).unwrap(), 1.0);
        assert_eq!(kernel_weight(0.30, &ind).unwrap(), 0.0);
    }

    #[test]
    fn kernel_weight_rejects_bad_inputs() {
        let spec = gaussian(0.3);
        assert!(matches!(
            kernel_weight(-0.1, &spec),
            Err(Error::Domain(_))
        ));
        let bad = KernelSpec {
            family: KernelFamily::Gaussian,
            bandwidth: 0.0,
        };
        assert!(matches!(
            kernel_weight(0.1, &bad),
            Err(Error::InvalidKernel(_))
        ));
    }

    #[test]
    fn spillover_zero_field_and_self_exclusion() {
        let g = SpatialGrid::unit_square(3).unwrap();
        let spec = gaussian(0.3);

        let zero = ScalarField::constant(0.0, 9);
        let out = spillover_field(&zero, &g, &spec).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));

        // Single treated cell: the spill-over at the treated cell itself is 0,
        // elsewhere it is the kernel weight to that cell.
        let mut a = vec![0.0; 9];
        a[0] = 1.0;
        let out = spillover_field(&ScalarField::new(a), &g, &spec).unwrap();
        assert_eq!(out.values()[0], 0.0);
        for j in 1..9 {
            assert_relative_eq!(
                out.values()[j],
                kernel_weight(g.distance(0, j), &spec).unwrap(),
                epsilon = 1e-15
            );
        }
    }

    /// Direct-summation oracle: independent double loop over location pairs.
    fn spillover_brute_force(a: &[f64], grid: &SpatialGrid, spec: &KernelSpec) -> Vec<f64> {
        let n = grid.n();
        let mut out = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (xi, yi) = grid.coords()[i];
                    let (xj, yj) = grid.coords()[j];
                    let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
                    out[i] += kernel_weight(d, spec).unwrap() * a[j];
                }
            }
        }
        out
    }

    #[test]
    fn spillover_all_treated_3x3_center() {
        // 3x3 grid, spacing 0.5, everything treated, Gaussian tau = 0.3.
        // Center = 4 exp(-(0.5/0.3)^2) + 4 exp(-(sqrt(0.5)/0.3)^2) ~ 0.26417.
        let g = SpatialGrid::lattice(3, 0.5).unwrap();
        let spec = gaussian(0.3);
        let a = ScalarField::constant(1.0, 9);
        let out = spillover_field(&a, &g, &spec).unwrap();
        let center = g.cell_index(1, 1);

        let expected = 4.0 * (-(0.5f64 / 0.3).powi(2)).exp()
            + 4.0 * (-(0.5f64.sqrt() / 0.3).powi(2)).exp();
        assert_relative_eq!(out.values()[center], expected, epsilon = 1e-14);
        assert_relative_eq!(out.values()[center], 0.264170, epsilon = 1e-6);

        let oracle = spillover_brute_force(a.values(), &g, &spec);
        for i in 0..9 {
            assert_relative_eq!(out.values()[i], oracle[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn spillover_matrix_matches_field_version() {
        let g = SpatialGrid::unit_square(4).unwrap();
        let spec = gaussian(0.25);
        let mut rng = crate::rng::stream_rng(11, 0);
        use rand::Rng;
        let cols = 3;
        let amat = DMatrix::from_fn(g.n(), cols, |_, _| {
            if rng.random::<f64>() < 0.3 {
                1.0
            } else {
                0.0
            }
        });
        let stacked = spillover_matrix(&amat, &g, &spec).unwrap();
        for c in 0..cols {
            let field = ScalarField::new(amat.column(c).iter().copied().collect());
            let single = spillover_field(&field, &g, &spec).unwrap();
            for i in 0..g.n() {
                assert_relative_eq!(stacked[(i, c)], single.values()[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spillover_shape_error() {
        let g = SpatialGrid::unit_square(3).unwrap();
        let spec = gaussian(0.3);
        let short = ScalarField::constant(1.0, 4);
        assert!(matches!(
            spillover_field(&short, &g, &spec),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn indicator_kernel_gives_partial_interference() {
        // Two 2x2 clusters of cells separated by more than tau: spill-over
        // inside one cluster must ignore treatments in the other.
        let g = SpatialGrid::lattice(6, 1.0).unwrap();
        let spec = KernelSpec::indicator(1.9).unwrap();
        let cluster_a = [g.cell_index(0, 0), g.cell_index(0, 1), g.cell_index(1, 0)];
        let far_cell = g.cell_index(5, 5);

        let mut base = vec![0.0; g.n()];
        for &c in &cluster_a {
            base[c] = 1.0;
        }
        let out_base = spillover_field(&ScalarField::new(base.clone()), &g, &spec).unwrap();

        // Perturb a treatment far outside the cluster.
        let mut perturbed = base;
        perturbed[far_cell] = 1.0;
        let out_pert = spillover_field(&ScalarField::new(perturbed), &g, &spec).unwrap();

        for &c in &cluster_a {
            assert_eq!(out_base.values()[c], out_pert.values()[c]);
        }
        // ... while cells near the perturbation do change.
        assert_ne!(
            out_base.values()[g.cell_index(5, 4)],
            out_pert.values()[g.cell_index(5, 4)]
        );
    }

    #[test]
    fn impute_complete_field_is_identity() {
        let g = SpatialGrid::unit_square(3).unwrap();
        let f = ScalarField::new((0..9).map(|i| i as f64).collect());
        let out = kernel_smooth_impute(&f, &g, 0.5).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn impute_constant_field() {
        let g = SpatialGrid::unit_square(3).unwrap();
        let mut vals: Vec<Option<f64>> = vec![Some(2.5); 9];
        vals[4] = None;
        let out = kernel_smooth_impute(&ScalarField::from_options(vals), &g, 0.4).unwrap();
        assert_relative_eq!(out.values()[4], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn impute_equidistant_pair_averages() {
        // Missing center cell of a 3x3 grid with only the west/east neighbors
        // observed, holding 0 and 2: symmetric weights give exactly 1.
        let g = SpatialGrid::unit_square(3).unwrap();
        let mut vals: Vec<Option<f64>> = vec![None; 9];
        vals[g.cell_index(1, 0)] = Some(0.0);
        vals[g.cell_index(1, 2)] = Some(2.0);
        let out = kernel_smooth_impute(&ScalarField::from_options(vals), &g, 0.4).unwrap();
        assert_relative_eq!(out.values()[g.cell_index(1, 1)], 1.0, epsilon = 1e-12);
        // Observed cells unchanged.
        assert_eq!(out.values()[g.cell_index(1, 0)], 0.0);
        assert_eq!(out.values()[g.cell_index(1, 2)], 2.0);
    }

    #[test]
    fn impute_all_missing_errors() {
        let g = SpatialGrid::unit_square(3).unwrap();
        let vals: Vec<Option<f64>> = vec![None; 9];
        assert!(matches!(
            kernel_smooth_impute(&ScalarField::from_options(vals), &g, 0.4),
            Err(Error::AllMissing)
        ));
    }

    proptest! {
        #[test]
        fn kernel_weight_monotone_in_distance(
            d1 in 0.0..5.0f64,
            d2 in 0.0..5.0f64,
            tau in 0.05..2.0f64,
            gaussian_family in any::<bool>(),
        ) {
            let family = if gaussian_family { KernelFamily::Gaussian } else { KernelFamily::Indicator };
            let spec = KernelSpec::new(family, tau).unwrap();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let w_lo = kernel_weight(lo, &spec).unwrap();
            let w_hi = kernel_weight(hi, &spec).unwrap();
            prop_assert!(w_lo >= w_hi);
            prop_assert!((0.0..=1.0).contains(&w_lo));
        }

        #[test]
        fn spillover_is_linear_in_treatment(
            seed in any::<u64>(),
            tau in 0.1..0.8f64,
        ) {
            use rand::Rng;
            let g = SpatialGrid::unit_square(4).unwrap();
            let spec = gaussian(tau);
            let mut rng = crate::rng::stream_rng(seed, 0);
            let a1: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let a2: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();

            let s1 = spillover_field(&ScalarField::new(a1), &g, &spec).unwrap();
            let s2 = spillover_field(&ScalarField::new(a2), &g, &spec).unwrap();
            let s12 = spillover_field(&ScalarField::new(sum), &g, &spec).unwrap();
            for i in 0..16 {
                prop_assert!((s12.values()[i] - s1.values()[i] - s2.values()[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn spillover_matches_brute_force_on_random_6x6(
            seed in any::<u64>(),
            tau in 0.1..1.0f64,
        ) {
            use rand::Rng;
            let g = SpatialGrid::unit_square(6).unwrap();
            let spec = gaussian(tau);
            let mut rng = crate::rng::stream_rng(seed, 1);
            let a: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let fast = spillover_field(&ScalarField::new(a.clone()), &g, &spec).unwrap();
            let slow = spillover_brute_force(&a, &g, &spec);
            for i in 0..36 {
                let denom = slow[i].abs().max(1e-300);
                prop_assert!((fast.values()[i] - slow[i]).abs() / denom < 1e-12);
            }
        }
    }
}
