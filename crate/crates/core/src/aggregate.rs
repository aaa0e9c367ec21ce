//! Grid-cell to intersection aggregation and control-state assembly.
//!
//! Cells and intersection coverage areas are axis-aligned rectangles in
//! kilometres. Weight `w_ij` is the share of intersection `j`'s area that
//! falls inside cell `i`, so the weights of one intersection sum to one.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::graph::euclid;
use crate::io::{fmt_f64, write_csv_rows, Panel};

pub const DEFAULT_LENGTH_SCALE_KM: f64 = 2.0;
pub const DEFAULT_CUTOFF_KM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn overlap(&self, other: &Rect) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMap {
    pub cells: Vec<Rect>,
    pub intersections: Vec<Rect>,
    /// `weights[j][i]`: share of intersection `j` covered by cell `i`.
    pub weights: Vec<Vec<f64>>,
}

impl CoverageMap {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn intersection_count(&self) -> usize {
        self.intersections.len()
    }

    /// `(cell, weight)` pairs with positive weight for intersection `j`.
    pub fn covering(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights[j].iter().copied().enumerate().filter(|(_, w)| *w > 0.0)
    }

    pub fn cell_centers(&self) -> Vec<[f64; 2]> {
        self.cells.iter().map(Rect::center).collect()
    }

    fn check_cells(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.cell_count() {
            return Err(Error::dim(what, self.cell_count(), len));
        }
        Ok(())
    }
}

/// Exact overlap areas normalised per intersection.
///
/// When cells do not tile an intersection completely the weights are
/// renormalised over the covered part.
pub fn coverage_weights(cells: &[Rect], intersections: &[Rect]) -> Result<CoverageMap> {
    let mut weights = Vec::with_capacity(intersections.len());
    for (j, a) in intersections.iter().enumerate() {
        if !(a.area() > 0.0) {
            return Err(Error::invalid(format!("intersection {j} has zero area")));
        }
        let overlaps: Vec<f64> = cells.iter().map(|c| c.overlap(a)).collect();
        let covered: f64 = overlaps.iter().sum();
        if covered <= 0.0 {
            return Err(Error::invalid(format!("intersection {j} is not covered by any cell")));
        }
        if covered < a.area() * (1.0 - 1e-9) {
            log::debug!("intersection {j}: cells cover {:.4} of its area", covered / a.area());
        }
        weights.push(overlaps.into_iter().map(|o| o / covered).collect());
    }
    Ok(CoverageMap {
        cells: cells.to_vec(),
        intersections: intersections.to_vec(),
        weights,
    })
}

pub fn aggregate_mean(mu: &[f64], map: &CoverageMap) -> Result<Vec<f64>> {
    map.check_cells("grid mean", mu.len())?;
    Ok((0..map.intersection_count())
        .map(|j| map.covering(j).map(|(i, w)| w * mu[i]).sum())
        .collect())
}

/// How cell forecasts covary when summed into an intersection.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceModel {
    /// Independent cells.
    Diagonal,
    /// `rho_ik = exp(-d_ik / length_scale)` on cell centres.
    DistanceKernel { length_scale_km: f64 },
    /// Correlations taken from an empirical residual covariance over cells.
    Empirical(DMatrix<f64>),
}

impl Default for CovarianceModel {
    fn default() -> Self {
        CovarianceModel::DistanceKernel {
            length_scale_km: DEFAULT_LENGTH_SCALE_KM,
        }
    }
}

impl CovarianceModel {
    fn correlation(&self, i: usize, k: usize, coords: &[[f64; 2]]) -> f64 {
        if i == k {
            return 1.0;
        }
        match self {
            CovarianceModel::Diagonal => 0.0,
            CovarianceModel::DistanceKernel { length_scale_km } => (-euclid(coords[i], coords[k]) / length_scale_km).exp(),
            CovarianceModel::Empirical(c) => {
                let d = (c[(i, i)] * c[(k, k)]).sqrt();
                if d > 0.0 {
                    c[(i, k)] / d
                } else {
                    0.0
                }
            }
        }
    }

    /// Full cell covariance `rho_ik sigma_i sigma_k`.
    pub fn covariance(&self, sigma: &[f64], coords: &[[f64; 2]]) -> Result<DMatrix<f64>> {
        self.validate(sigma.len(), coords.len())?;
        let n = sigma.len();
        Ok(DMatrix::from_fn(n, n, |i, k| self.correlation(i, k, coords) * sigma[i] * sigma[k]))
    }

    fn validate(&self, cells: usize, coords: usize) -> Result<()> {
        match self {
            CovarianceModel::Diagonal => Ok(()),
            CovarianceModel::DistanceKernel { length_scale_km } => {
                if !(*length_scale_km > 0.0) {
                    return Err(Error::invalid("kernel length scale must be positive"));
                }
                if coords != cells {
                    return Err(Error::dim("cell coordinates", cells, coords));
                }
                Ok(())
            }
            CovarianceModel::Empirical(c) => {
                if c.nrows() != cells || c.ncols() != cells {
                    return Err(Error::dim("empirical covariance", cells, c.nrows().max(c.ncols())));
                }
                Ok(())
            }
        }
    }
}

/// `sqrt(max(sum_ik w_ij w_kj Cov_ik, 0))` per intersection.
pub fn aggregate_variance(
    sigma: &[f64],
    map: &CoverageMap,
    model: &CovarianceModel,
    coordinates: &[[f64; 2]],
) -> Result<Vec<f64>> {
    map.check_cells("grid sigma", sigma.len())?;
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("sigma must be nonnegative, got {s}")));
    }
    model.validate(sigma.len(), coordinates.len())?;
    Ok((0..map.intersection_count())
        .map(|j| {
            let cover: Vec<(usize, f64)> = map.covering(j).collect();
            let mut form = 0.0;
            for &(i, wi) in &cover {
                for &(k, wk) in &cover {
                    form += wi * wk * model.correlation(i, k, coordinates) * sigma[i] * sigma[k];
                }
            }
            form.max(0.0).sqrt()
        })
        .collect())
}

/// Sample covariance (n - 1) of a `[time][node]` residual panel, zeroed
/// beyond `cutoff_km`, symmetrised and clipped to the PSD cone.
pub fn empirical_residual_cov(residuals: &Panel<f64>, coordinates: &[[f64; 2]], cutoff_km: f64) -> Result<DMatrix<f64>> {
    let t = residuals.len();
    if t < 2 {
        return Err(Error::InsufficientData(format!("{t} residual samples, need at least 2")));
    }
    let n = coordinates.len();
    if let Some(row) = residuals.iter().find(|r| r.len() != n) {
        return Err(Error::dim("residual row", n, row.len()));
    }
    let x = DMatrix::from_fn(t, n, |r, c| residuals[r][c]);
    let means = x.row_mean();
    let centered = DMatrix::from_fn(t, n, |r, c| x[(r, c)] - means[c]);
    let mut cov = centered.transpose() * &centered / (t as f64 - 1.0);
    for i in 0..n {
        for k in 0..n {
            if i != k && euclid(coordinates[i], coordinates[k]) > cutoff_km {
                cov[(i, k)] = 0.0;
            }
        }
    }
    let sym = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let psd = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    Ok((&psd + psd.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueRule {
    /// Smallest p over covering cells.
    #[default]
    Min,
    /// `exp(sum w log p)` over covering cells.
    WeightedGeometric,
}

pub fn aggregate_pvalues(p: &[f64], map: &CoverageMap, rule: PValueRule) -> Result<Vec<f64>> {
    map.check_cells("grid p-values", p.len())?;
    if let Some(v) = p.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::invalid(format!("p-value {v} outside (0, 1]")));
    }
    Ok((0..map.intersection_count())
        .map(|j| match rule {
            PValueRule::Min => map.covering(j).map(|(i, _)| p[i]).fold(1.0, f64::min),
            PValueRule::WeightedGeometric => map.covering(j).map(|(i, w)| w * p[i].ln()).sum::<f64>().exp(),
        })
        .collect())
}

/// An intersection is flagged when any covering cell was rejected.
pub fn propagate_flags(cell_rejected: &[bool], map: &CoverageMap) -> Result<Vec<bool>> {
    map.check_cells("cell rejections", cell_rejected.len())?;
    Ok((0..map.intersection_count())
        .map(|j| map.covering(j).any(|(i, _)| cell_rejected[i]))
        .collect())
}

/// `[sin, cos]` of time of day followed by `[sin, cos]` of day of week
/// (day 0 is Monday).
pub fn cyclic_clock(seconds_of_day: f64, day_of_week: f64) -> [f64; 4] {
    let d = TAU * seconds_of_day / 86_400.0;
    let w = TAU * day_of_week / 7.0;
    [d.sin(), d.cos(), w.sin(), w.cos()]
}

pub const STATE_LAYOUT_VERSION: u32 = 1;
pub const CLOCK_DIM: usize = 4;

/// Control-state layout, version 1:
/// `[x_local (n * local_features, intersection-major) | mu_int (n) |
/// sigma_int (n) | p_int (n) | flags (n) | clock (4)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub version: u32,
    pub intersections: usize,
    pub local_features: usize,
}

impl StateLayout {
    pub fn new(intersections: usize, local_features: usize) -> Self {
        Self {
            version: STATE_LAYOUT_VERSION,
            intersections,
            local_features,
        }
    }

    pub fn local_dim(&self) -> usize {
        self.intersections * self.local_features
    }

    pub fn dim(&self) -> usize {
        self.local_dim() + 4 * self.intersections + CLOCK_DIM
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub layout: StateLayout,
    pub local: Vec<f64>,
    pub mu_int: Vec<f64>,
    pub sigma_int: Vec<f64>,
    pub p_int: Vec<f64>,
    pub flags: Vec<bool>,
    pub clock: [f64; 4],
}

impl ControlState {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layout.dim());
        v.extend_from_slice(&self.local);
        v.extend_from_slice(&self.mu_int);
        v.extend_from_slice(&self.sigma_int);
        v.extend_from_slice(&self.p_int);
        v.extend(self.flags.iter().map(|&f| f64::from(u8::from(f))));
        v.extend_from_slice(&self.clock);
        v
    }
}

pub fn assemble_state(
    layout: StateLayout,
    local: Vec<f64>,
    mu_int: Vec<f64>,
    sigma_int: Vec<f64>,
    p_int: Vec<f64>,
    flags: Vec<bool>,
    clock: [f64; 4],
) -> Result<ControlState> {
    let n = layout.intersections;
    if local.len() != layout.local_dim() {
        return Err(Error::dim("local measurements", layout.local_dim(), local.len()));
    }
    for (what, len) in [
        ("intersection mean", mu_int.len()),
        ("intersection sigma", sigma_int.len()),
        ("intersection p-values", p_int.len()),
        ("anomaly flags", flags.len()),
    ] {
        if len != n {
            return Err(Error::dim(what, n, len));
        }
    }
    if let Some(s) = sigma_int.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("intersection sigma {s} is negative")));
    }
    if let Some(p) = p_int.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("intersection p-value {p} outside [0, 1]")));
    }
    Ok(ControlState {
        layout,
        local,
        mu_int,
        sigma_int,
        p_int,
        flags,
        clock,
    })
}

/// One row per `(time, intersection)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub time: usize,
    pub intersection: usize,
    pub mu: f64,
    pub sigma: f64,
    pub p: f64,
    pub flag: bool,
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_csv_rows(
        path,
        &["time", "intersection", "mu", "sigma", "p", "flag"],
        rows.iter().map(|r| {
            vec![
                r.time.to_string(),
                r.intersection.to_string(),
                fmt_f64(r.mu),
                fmt_f64(r.sigma),
                fmt_f64(r.p),
                u8::from(r.flag).to_string(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_halves() -> CoverageMap {
        let cells = [Rect::new(0.0, 0.0, 1.0, 1.0), Rect::new(1.0, 0.0, 2.0, 1.0), Rect::new(5.0, 5.0, 6.0, 6.0)];
        coverage_weights(&cells, &[Rect::new(0.5, 0.0, 1.5, 1.0)]).unwrap()
    }

    #[test]
    fn weight_examples() {
        let m = coverage_weights(&[Rect::new(0.0, 0.0, 4.0, 4.0)], &[Rect::new(1.0, 1.0, 2.0, 2.0)]).unwrap();
        assert_eq!(m.weights, vec![vec![1.0]]);
        assert_eq!(two_halves().weights, vec![vec![0.5, 0.5, 0.0]]);
        assert!(coverage_weights(&[Rect::new(0.0, 0.0, 1.0, 1.0)], &[Rect::new(3.0, 3.0, 4.0, 4.0)]).is_err());
        assert!(coverage_weights(&[Rect::new(0.0, 0.0, 1.0, 1.0)], &[Rect::new(0.0, 0.0, 0.0, 1.0)]).is_err());
    }

    #[test]
    fn mean_examples() {
        let m = two_halves();
        assert_eq!(aggregate_mean(&[2.0, 4.0, 100.0], &m).unwrap(), vec![3.0]);
        assert!(aggregate_mean(&[2.0], &m).is_err());
    }

    #[test]
    fn variance_examples() {
        let m = two_halves();
        let coords = m.cell_centers();
        let sigma = [1.0, 1.0, 1.0];
        let perfect = CovarianceModel::Empirical(DMatrix::from_element(3, 3, 1.0));
        let v = aggregate_variance(&sigma, &m, &perfect, &coords).unwrap()[0];
        assert!((v - 1.0).abs() < 1e-12);
        let v = aggregate_variance(&sigma, &m, &CovarianceModel::Diagonal, &coords).unwrap()[0];
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
        let single = coverage_weights(&[Rect::new(0.0, 0.0, 1.0, 1.0)], &[Rect::new(0.0, 0.0, 1.0, 1.0)]).unwrap();
        let v = aggregate_variance(&[2.5], &single, &CovarianceModel::default(), &[[0.5, 0.5]]).unwrap()[0];
        assert!((v - 2.5).abs() < 1e-12);
        let bad = CovarianceModel::Empirical(DMatrix::identity(2, 2));
        assert!(aggregate_variance(&sigma, &m, &bad, &coords).is_err());
    }

    #[test]
    fn empirical_cov_examples() {
        let panel: Panel<f64> = (0..5).map(|t| vec![t as f64, t as f64, t as f64]).collect();
        let coords = [[0.0, 0.0], [1.0, 0.0], [12.0, 0.0]];
        let c = empirical_residual_cov(&panel, &coords, 10.0).unwrap();
        assert!((c[(0, 0)] - 2.5).abs() < 1e-12);
        assert!((c[(0, 1)] - 2.5).abs() < 1e-12);
        // Zeroing the 12 km pair leaves an indefinite matrix; clipping keeps it PSD.
        let eig = SymmetricEigen::new(c.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10));
        assert!((c.clone() - c.transpose()).abs().max() < 1e-12);
        let unit: Panel<f64> = [-1.0, 1.0, -1.0, 1.0].iter().map(|&v| vec![v, v]).collect();
        let c = empirical_residual_cov(&unit, &coords[..2], 10.0).unwrap();
        assert!((c[(0, 1)] - 4.0 / 3.0).abs() < 1e-12);
        let far = empirical_residual_cov(&unit, &[[0.0, 0.0], [12.0, 0.0]], 10.0).unwrap();
        assert_eq!(far[(0, 1)], 0.0);
        assert!(empirical_residual_cov(&vec![vec![1.0]], &coords[..1], 10.0).is_err());
    }

    #[test]
    fn pvalue_examples() {
        let m = two_halves();
        assert_eq!(aggregate_pvalues(&[0.9, 0.01, 1e-9], &m, PValueRule::Min).unwrap(), vec![0.01]);
        assert_eq!(aggregate_pvalues(&[1.0, 1.0, 1.0], &m, PValueRule::Min).unwrap(), vec![1.0]);
        let g = aggregate_pvalues(&[0.04, 0.01, 1.0], &m, PValueRule::WeightedGeometric).unwrap()[0];
        assert!((g - 0.02).abs() < 1e-12);
        assert!(aggregate_pvalues(&[0.0, 0.5, 0.5], &m, PValueRule::Min).is_err());
        assert_eq!(propagate_flags(&[false, true, false], &m).unwrap(), vec![true]);
        assert_eq!(propagate_flags(&[false, false, true], &m).unwrap(), vec![false]);
    }

    #[test]
    fn state_examples() {
        let layout = StateLayout::new(2, 3);
        let s = assemble_state(layout, vec![0.0; 6], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![false; 2], [0.0; 4]).unwrap();
        assert_eq!(s.to_vector(), vec![0.0; layout.dim()]);
        assert_eq!(layout.dim(), 6 + 8 + 4);
        let c = cyclic_clock(0.0, 0.0);
        assert_eq!(c, [0.0, 1.0, 0.0, 1.0]);
        let noon = cyclic_clock(43_200.0, 0.0);
        assert!((noon[1] + 1.0).abs() < 1e-12);
        assert!(assemble_state(layout, vec![0.0; 5], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![false; 2], c).is_err());
        assert!(assemble_state(layout, vec![0.0; 6], vec![0.0; 2], vec![-1.0; 2], vec![0.0; 2], vec![false; 2], c).is_err());
    }

    #[test]
    fn kernel_covariance_is_psd_on_random_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
            let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let c = CovarianceModel::default().covariance(&sigma, &coords).unwrap();
            let eig = SymmetricEigen::new(c);
            assert!(eig.eigenvalues.iter().all(|&l| l > -1e-9), "{:?}", eig.eigenvalues.min());
        }
    }

    fn random_map() -> impl Strategy<Value = (CoverageMap, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..6, 1usize..6, 0.1f64..3.0).prop_flat_map(|(nx, ny, ell)| {
            let n = nx * ny;
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(0.0f64..5.0, n),
                prop::collection::vec(1e-6f64..=1.0, n),
                0.0f64..(nx as f64 - 0.1).max(0.1),
                0.0f64..(ny as f64 - 0.1).max(0.1),
            )
                .prop_map(move |(mu, sigma, p, x, y)| {
                    let cells: Vec<Rect> = (0..n)
                        .map(|k| {
                            let (cx, cy) = ((k % nx) as f64, (k / nx) as f64);
                            Rect::new(cx, cy, cx + 1.0, cy + 1.0)
                        })
                        .collect();
                    let inter = Rect::new(x, y, (x + ell).min(nx as f64), (y + ell).min(ny as f64));
                    (coverage_weights(&cells, &[inter]).unwrap(), mu, sigma, p)
                })
        })
    }

    proptest! {
        #[test]
        fn aggregation_invariants((map, mu, sigma, p) in random_map()) {
            let w_sum: f64 = map.weights[0].iter().sum();
            prop_assert!((w_sum - 1.0).abs() < 1e-9);
            let covered: Vec<usize> = map.covering(0).map(|(i, _)| i).collect();
            let m = aggregate_mean(&mu, &map).unwrap()[0];
            let lo = covered.iter().map(|&i| mu[i]).fold(f64::INFINITY, f64::min);
            let hi = covered.iter().map(|&i| mu[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);

            let coords = map.cell_centers();
            let n = mu.len();
            let diag = aggregate_variance(&sigma, &map, &CovarianceModel::Diagonal, &coords).unwrap()[0];
            let kern = aggregate_variance(&sigma, &map, &CovarianceModel::default(), &coords).unwrap()[0];
            let full = CovarianceModel::Empirical(DMatrix::from_element(n, n, 1.0));
            let perf = aggregate_variance(&sigma, &map, &full, &coords).unwrap()[0];
            prop_assert!(diag <= kern + 1e-9 && kern <= perf + 1e-9);

            let pi = aggregate_pvalues(&p, &map, PValueRule::Min).unwrap()[0];
            for &i in &covered {
                prop_assert!(pi <= p[i]);
            }
        }
    }
}
