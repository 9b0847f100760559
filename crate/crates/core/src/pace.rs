//! Functional principal components for sparse data by conditional
//! expectation (PACE).
//!
//! The fit runs in a fixed order:
//!
//! 1. pool every `(t_ij, Y_ij)` and smooth with [`local_linear_1d`] to get
//!    the mean `μ̂` on the grid;
//! 2. form raw covariances `(Y_ij − μ̂(t_ij))(Y_il − μ̂(t_il))` for `j ≠ l`;
//! 3. bin them onto the grid lattice and smooth with [`local_linear_2d`];
//! 4. estimate the noise variance from the gap between the smoothed diagonal
//!    raw products and the smoothed covariance diagonal;
//! 5. solve the quadrature-weighted eigenproblem and keep the leading `K`
//!    components reaching the variance threshold;
//! 6. score each subject with `ξ̂_ik = λ̂_k φ̂_ikᵀ Σ̂_Yi⁻¹ (Y_i − μ̂_i)`.
//!
//! Grid values of `μ̂` and `φ̂_k` are linearly interpolated at raw
//! observation times.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curves::{self, check_len, CurveMatrix, LongitudinalSample, TimeGrid};
use crate::error::{FpcaError, Result};
use crate::json;
use crate::linalg;
use crate::parallel::try_map_indexed;
use crate::smooth::{
    self, select_bandwidth_1d, select_bandwidth_2d, Bandwidth, ScatterPoint1D, ScatterPoint2D,
};

/// Eigenvalues at or below this fraction of the total outcome variance are
/// treated as zero.
const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub grid_points: usize,
    /// Minimum cumulative fraction of variance explained by the kept
    /// components.
    pub fve_threshold: f64,
    pub max_components: usize,
    pub bandwidth_mean: Bandwidth,
    pub bandwidth_cov: Bandwidth,
    /// Ridge added to each subject covariance diagonal, as a multiple of the
    /// leading eigenvalue.
    pub ridge: f64,
    /// Seed for bandwidth cross-validation folds.
    pub cv_seed: u64,
    /// Fixed time domain for the grid; defaults to the observed range.
    pub domain: Option<(f64, f64)>,
    /// Bin raw covariances onto the grid lattice before smoothing.
    pub bin_covariance: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid_points: curves::DEFAULT_GRID_POINTS,
            fve_threshold: 0.95,
            max_components: 20,
            bandwidth_mean: Bandwidth::Auto,
            bandwidth_cov: Bandwidth::Auto,
            ridge: 1e-8,
            cv_seed: 0,
            domain: None,
            bin_covariance: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fve_threshold > 0.0 && self.fve_threshold <= 1.0) {
            return Err(FpcaError::InvalidConfig(format!(
                "fve_threshold must be in (0, 1], got {}",
                self.fve_threshold
            )));
        }
        if self.grid_points < 3 {
            return Err(FpcaError::InvalidConfig("grid_points must be >= 3".into()));
        }
        if self.max_components == 0 {
            return Err(FpcaError::InvalidConfig(
                "max_components must be >= 1".into(),
            ));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(FpcaError::InvalidConfig("ridge must be >= 0".into()));
        }
        for bw in [self.bandwidth_mean, self.bandwidth_cov] {
            if let Bandwidth::Fixed(h) = bw {
                if !(h.is_finite() && h > 0.0) {
                    return Err(FpcaError::InvalidConfig(format!(
                        "bandwidth {h} must be > 0"
                    )));
                }
            }
        }
        if let Some((lo, hi)) = self.domain {
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(FpcaError::DegenerateDomain);
            }
        }
        Ok(())
    }

    pub fn grid_for(&self, samples: &[LongitudinalSample]) -> Result<TimeGrid> {
        match self.domain {
            Some((lo, hi)) => TimeGrid::uniform(lo, hi, self.grid_points),
            None => curves::build_grid(samples, self.grid_points),
        }
    }
}

/// Bandwidths actually used by a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedBandwidths {
    pub mean: f64,
    pub covariance: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub subject_id: String,
    pub group: Option<String>,
    pub scores: Vec<f64>,
}

/// A fitted model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub grid: TimeGrid,
    pub mean: Vec<f64>,
    /// Smoothed covariance surface, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub eigenvalues: Vec<f64>,
    /// One row per component.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Cumulative fraction of variance explained by the first `k`
    /// components, `k = 1..=K`.
    pub fve: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    /// Absolute ridge added to subject covariance diagonals.
    pub ridge: f64,
    pub bandwidths: FittedBandwidths,
    pub subjects: Vec<SubjectScores>,
}

/// Pools observations into 1D scatter points with per-subject cluster ids.
fn pooled(samples: &[LongitudinalSample]) -> (Vec<ScatterPoint1D>, Vec<usize>) {
    let mut pts = Vec::new();
    let mut clusters = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for (t, y) in s.observations() {
            pts.push(ScatterPoint1D::new(t, y));
            clusters.push(i);
        }
    }
    (pts, clusters)
}

/// Subject order independent of input order.
fn canonical_order(samples: &[LongitudinalSample]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&samples[a], &samples[b]);
        x.subject_id()
            .cmp(y.subject_id())
            .then_with(|| cmp_f64s(x.times(), y.times()))
            .then_with(|| cmp_f64s(x.values(), y.values()))
    });
    order
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let c = x.total_cmp(y);
        if c.is_ne() {
            return c;
        }
    }
    a.len().cmp(&b.len())
}

fn smooth_1d(
    points: &[ScatterPoint1D],
    clusters: &[usize],
    bandwidth: Bandwidth,
    grid: &TimeGrid,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => select_bandwidth_1d(points, Some(clusters), grid, seed)?.h,
    };
    Ok((
        smooth::local_linear_1d(points, Bandwidth::Fixed(h), grid)?,
        h,
    ))
}

fn check_in_domain(samples: &[LongitudinalSample], grid: &TimeGrid) -> Result<()> {
    for s in samples {
        for &t in [s.times()[0], s.times()[s.len() - 1]].iter() {
            grid.nearest_index(t)?;
        }
    }
    Ok(())
}

/// Mean function on `grid` from all pooled observations.
pub fn estimate_mean(
    samples: &[LongitudinalSample],
    grid: &TimeGrid,
    config: &FitConfig,
) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(FpcaError::InvalidConfig(
            "mean estimation needs at least 2 subjects".into(),
        ));
    }
    check_in_domain(samples, grid)?;
    let order = canonical_order(samples);
    let ordered: Vec<LongitudinalSample> = order.iter().map(|&i| samples[i].clone()).collect();
    let (pts, clusters) = pooled(&ordered);
    Ok(smooth_1d(&pts, &clusters, config.bandwidth_mean, grid, config.cv_seed)?.0)
}

fn residuals(sample: &LongitudinalSample, mean: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    sample
        .observations()
        .map(|(t, y)| Ok(y - grid.interpolate(mean, t)?))
        .collect()
}

/// Off-diagonal raw covariance products for every subject, both `(s, t)`
/// and `(t, s)` orders. Subjects with one observation contribute nothing.
pub fn raw_covariances(
    samples: &[LongitudinalSample],
    mean: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<ScatterPoint2D>> {
    Ok(raw_covariances_by_subject(samples, mean, grid)?.0)
}

/// [`raw_covariances`] with the index of the contributing subject.
fn raw_covariances_by_subject(
    samples: &[LongitudinalSample],
    mean: &[f64],
    grid: &TimeGrid,
) -> Result<(Vec<ScatterPoint2D>, Vec<usize>)> {
    check_len(mean, grid.len())?;
    let mut out = Vec::new();
    let mut subject = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let r = residuals(s, mean, grid)?;
        let t = s.times();
        for j in 0..s.len() {
            for l in 0..s.len() {
                if j != l {
                    out.push(ScatterPoint2D::new(t[j], t[l], r[j] * r[l]));
                    subject.push(i);
                }
            }
        }
    }
    Ok((out, subject))
}

/// Smoothed covariance surface and the bandwidth used.
fn smooth_covariance(
    raw: &[ScatterPoint2D],
    subjects: &[usize],
    grid: &TimeGrid,
    config: &FitConfig,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let h = match config.bandwidth_cov {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => {
            select_bandwidth_2d(
                raw,
                Some(subjects),
                grid,
                config.cv_seed,
                config.bin_covariance,
            )?
            .h
        }
    };
    let pts = if config.bin_covariance {
        smooth::bin_2d(raw, grid)?
    } else {
        raw.to_vec()
    };
    Ok((smooth::local_linear_2d(&pts, Bandwidth::Fixed(h), grid)?, h))
}

/// Noise variance: the mean over the central half of the grid of
/// `V̂(t) − Σ̂(t, t)`, floored at zero, where `V̂` smooths the squared
/// residuals.
pub fn estimate_sigma2(
    samples: &[LongitudinalSample],
    mean: &[f64],
    covariance: &[Vec<f64>],
    grid: &TimeGrid,
    config: &FitConfig,
) -> Result<f64> {
    Ok(estimate_sigma2_with_bandwidth(samples, mean, covariance, grid, config)?.0)
}

fn estimate_sigma2_with_bandwidth(
    samples: &[LongitudinalSample],
    mean: &[f64],
    covariance: &[Vec<f64>],
    grid: &TimeGrid,
    config: &FitConfig,
) -> Result<(f64, f64)> {
    check_len(mean, grid.len())?;
    check_len(covariance, grid.len())?;
    let mut pts = Vec::new();
    let mut clusters = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for (t, r) in s.times().iter().zip(residuals(s, mean, grid)?) {
            pts.push(ScatterPoint1D::new(*t, r * r));
            clusters.push(i);
        }
    }
    let (v, h) = smooth_1d(&pts, &clusters, config.bandwidth_cov, grid, config.cv_seed)?;
    let (lo, hi) = central_half(grid.len());
    let gap: f64 = (lo..=hi).map(|m| v[m] - covariance[m][m]).sum::<f64>() / (hi - lo + 1) as f64;
    Ok((gap.max(0.0), h))
}

/// Inclusive index range of the central 50% of an `m`-point grid.
fn central_half(m: usize) -> (usize, usize) {
    let lo = (m - 1) / 4;
    let hi = (3 * (m - 1)).div_ceil(4);
    (lo, hi.max(lo))
}

/// Eigenvalues (descending, positive only) and quadrature-normalized
/// eigenfunctions of a covariance surface.
///
/// Solves `W^{1/2} Σ W^{1/2} v = λ v` and maps back with `φ = W^{-1/2} v`,
/// so `Σ_m w_m φ_k(t_m) φ_l(t_m) = δ_kl`. Signs are fixed so that
/// `∫ φ_k ≥ 0`, or the first nonzero value is positive when the integral
/// vanishes.
pub fn eigendecompose(
    covariance: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let c = linalg::to_matrix(covariance)?;
    check_len(covariance, grid.len())?;
    linalg::require_symmetric(&c, 1e-8)?;
    let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let m = sw.len();
    let a = DMatrix::from_fn(m, m, |i, j| sw[i] * c[(i, j)] * sw[j]);
    let (values, vectors) = linalg::sorted_eigen(a);
    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    for (k, &lambda) in values.iter().enumerate() {
        if lambda <= 0.0 {
            break;
        }
        let mut phi: Vec<f64> = (0..m).map(|i| vectors[(i, k)] / sw[i]).collect();
        let area = curves::integral(&phi, grid)?;
        let scale: f64 = phi
            .iter()
            .zip(grid.weights())
            .map(|(p, w)| w * p.abs())
            .sum();
        let flip = if area.abs() > 1e-10 * scale {
            area < 0.0
        } else {
            phi.iter()
                .find(|p| p.abs() > 1e-12)
                .is_some_and(|&p| p < 0.0)
        };
        if flip {
            phi.iter_mut().for_each(|p| *p = -*p);
        }
        eigenvalues.push(lambda);
        eigenfunctions.push(phi);
    }
    Ok((eigenvalues, eigenfunctions))
}

/// Smallest `K` whose cumulative share of the positive eigenvalues reaches
/// `threshold`, capped at `max_components`.
pub fn select_k(eigenvalues: &[f64], threshold: f64, max_components: usize) -> Result<usize> {
    let positive: Vec<f64> = eigenvalues.iter().copied().filter(|&l| l > 0.0).collect();
    let total: f64 = positive.iter().sum();
    if positive.is_empty() || total <= 0.0 {
        return Err(FpcaError::DegenerateCovariance);
    }
    let mut cum = 0.0;
    for (k, l) in positive.iter().enumerate() {
        cum += l;
        // guard against rounding in the last partial sum
        if cum / total >= threshold - 1e-12 {
            return Ok((k + 1).min(max_components));
        }
    }
    Ok(positive.len().min(max_components))
}

fn cumulative_fve(eigenvalues: &[f64], k: usize) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().filter(|&&l| l > 0.0).sum();
    let mut cum = 0.0;
    eigenvalues[..k]
        .iter()
        .map(|l| {
            cum += l;
            cum / total
        })
        .collect()
}

/// Fits the full model.
pub fn fit(samples: &[LongitudinalSample], config: &FitConfig) -> Result<FpcaModel> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(FpcaError::InvalidConfig(format!(
            "fitting needs at least 2 subjects, got {}",
            samples.len()
        )));
    }
    if samples.iter().all(|s| s.len() < 2) {
        return Err(FpcaError::InsufficientPairs);
    }
    let grid = config.grid_for(samples)?;
    check_in_domain(samples, &grid)?;

    let order = canonical_order(samples);
    let ordered: Vec<LongitudinalSample> = order.iter().map(|&i| samples[i].clone()).collect();

    let (pts, clusters) = pooled(&ordered);
    let (mean, h_mean) = smooth_1d(
        &pts,
        &clusters,
        config.bandwidth_mean,
        &grid,
        config.cv_seed,
    )?;

    let (raw, raw_subjects) = raw_covariances_by_subject(&ordered, &mean, &grid)?;
    if raw.is_empty() {
        return Err(FpcaError::InsufficientPairs);
    }
    let (covariance, h_cov) = smooth_covariance(&raw, &raw_subjects, &grid, config)?;
    let (sigma2, h_var) =
        estimate_sigma2_with_bandwidth(&ordered, &mean, &covariance, &grid, config)?;

    let (all_values, all_functions) = eigendecompose(&covariance, &grid)?;
    let outcome_var = {
        let n = pts.len() as f64;
        let m = pts.iter().map(|p| p.y).sum::<f64>() / n;
        pts.iter().map(|p| (p.y - m).powi(2)).sum::<f64>() / n
    };
    let floor = EIGEN_FLOOR * outcome_var * grid.length();
    let n_pos = all_values.iter().take_while(|&&l| l > floor).count();
    if n_pos == 0 {
        return Err(FpcaError::DegenerateCovariance);
    }
    let positive = &all_values[..n_pos];
    let k = select_k(positive, config.fve_threshold, config.max_components)?;
    let fve = cumulative_fve(positive, k);
    let eigenvalues = positive[..k].to_vec();
    let eigenfunctions = all_functions[..k].to_vec();
    let ridge = config.ridge * eigenvalues[0];

    let mut model = FpcaModel {
        grid,
        mean,
        covariance,
        sigma2,
        eigenvalues,
        eigenfunctions,
        fve,
        k,
        ridge,
        bandwidths: FittedBandwidths {
            mean: h_mean,
            covariance: h_cov,
            variance: h_var,
        },
        subjects: Vec::new(),
    };
    let scores = try_map_indexed(samples.len(), |i| estimate_scores(&samples[i], &model))?;
    model.subjects = samples
        .iter()
        .zip(scores)
        .map(|(s, scores)| SubjectScores {
            subject_id: s.subject_id().to_string(),
            group: s.group().map(str::to_string),
            scores,
        })
        .collect();
    Ok(model)
}

/// Conditional-expectation scores of `sample` under `model`.
pub fn estimate_scores(sample: &LongitudinalSample, model: &FpcaModel) -> Result<Vec<f64>> {
    let grid = &model.grid;
    let m = sample.len();
    let k = model.k;
    let mut phi = DMatrix::zeros(m, k);
    let mut resid = DVector::zeros(m);
    for (j, (t, y)) in sample.observations().enumerate() {
        resid[j] = y - grid.interpolate(&model.mean, t)?;
        for c in 0..k {
            phi[(j, c)] = grid.interpolate(&model.eigenfunctions[c], t)?;
        }
    }
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(model.eigenvalues.clone()));
    let mut sigma_y = &phi * &lambda * phi.transpose();
    let nugget = model.sigma2 + model.ridge;
    for j in 0..m {
        sigma_y[(j, j)] += nugget;
    }
    let chol = Cholesky::new(sigma_y)
        .ok_or_else(|| FpcaError::SingularSubjectCovariance(sample.subject_id().to_string()))?;
    let solved = chol.solve(&resid);
    let proj = phi.transpose() * solved;
    let scores: Vec<f64> = (0..k).map(|c| model.eigenvalues[c] * proj[c]).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FpcaError::SingularSubjectCovariance(
            sample.subject_id().to_string(),
        ));
    }
    Ok(scores)
}

/// `μ̂(t) + Σ_k φ̂_k(t) ξ_k` on the grid.
pub fn fitted_trajectory(model: &FpcaModel, scores: &[f64]) -> Result<Vec<f64>> {
    check_len(scores, model.k)?;
    let mut out = model.mean.clone();
    for (phi, &xi) in model.eigenfunctions.iter().zip(scores) {
        for (o, p) in out.iter_mut().zip(phi) {
            *o += p * xi;
        }
    }
    Ok(out)
}

/// Trajectory for a subject not used in fitting.
pub fn predict_trajectory(model: &FpcaModel, sample: &LongitudinalSample) -> Result<Vec<f64>> {
    let scores = estimate_scores(sample, model)?;
    fitted_trajectory(model, &scores)
}

impl FpcaModel {
    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    /// Fitted trajectories of the training subjects, in fit input order.
    pub fn fitted_curves(&self) -> Result<CurveMatrix> {
        let rows = self
            .subjects
            .iter()
            .map(|s| fitted_trajectory(self, &s.scores))
            .collect::<Result<Vec<_>>>()?;
        CurveMatrix::new(
            self.grid.clone(),
            rows,
            self.subjects.iter().map(|s| s.subject_id.clone()).collect(),
            self.subjects.iter().map(|s| s.group.clone()).collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = json::from_str(s)?;
        model.validate_shape()?;
        Ok(model)
    }

    fn validate_shape(&self) -> Result<()> {
        let m = self.grid.len();
        check_len(&self.mean, m)?;
        check_len(&self.covariance, m)?;
        for row in &self.covariance {
            check_len(row, m)?;
        }
        check_len(&self.eigenvalues, self.k)?;
        check_len(&self.eigenfunctions, self.k)?;
        check_len(&self.fve, self.k)?;
        for phi in &self.eigenfunctions {
            check_len(phi, m)?;
        }
        for s in &self.subjects {
            check_len(&s.scores, self.k)?;
        }
        Ok(())
    }

    /// Checks the structural invariants of a fitted model and reports the
    /// first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        self.validate_shape().map_err(|e| e.to_string())?;
        if self.k == 0 {
            return Err("K is zero".into());
        }
        if self.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err("nonpositive eigenvalue".into());
        }
        if self.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err("eigenvalues not nonincreasing".into());
        }
        for a in 0..self.k {
            for b in 0..=a {
                let ip =
                    curves::inner(&self.eigenfunctions[a], &self.eigenfunctions[b], &self.grid)
                        .map_err(|e| e.to_string())?;
                let target = if a == b { 1.0 } else { 0.0 };
                if (ip - target).abs() > 1e-6 {
                    return Err(format!("<phi_{a}, phi_{b}> = {ip}"));
                }
            }
        }
        let m = self.grid.len();
        for i in 0..m {
            for j in 0..m {
                if (self.covariance[i][j] - self.covariance[j][i]).abs() > 1e-10 {
                    return Err(format!("covariance asymmetric at ({i}, {j})"));
                }
            }
        }
        if self.fve.windows(2).any(|w| w[1] < w[0]) {
            return Err("fve decreasing".into());
        }
        if self.sigma2 < 0.0 {
            return Err("negative sigma2".into());
        }
        Ok(())
    }
}
