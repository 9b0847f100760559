//! Sparse longitudinal samples, the common evaluation grid, and trapezoid
//! quadrature on that grid.

use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};

/// Slack allowed when a time sits marginally outside the grid domain.
pub const DOMAIN_TOLERANCE: f64 = 1e-9;

/// Default number of grid points.
pub const DEFAULT_GRID_POINTS: usize = 51;

/// One subject's irregular observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSample {
    subject_id: String,
    times: Vec<f64>,
    values: Vec<f64>,
    group: Option<String>,
}

impl LongitudinalSample {
    /// Validates that times are finite and strictly increasing and that
    /// there is one finite value per time.
    pub fn new(
        subject_id: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        group: Option<String>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if times.is_empty() {
            return Err(FpcaError::invalid_sample(&subject_id, "no observations"));
        }
        if times.len() != values.len() {
            return Err(FpcaError::invalid_sample(
                &subject_id,
                format!("{} times but {} values", times.len(), values.len()),
            ));
        }
        if let Some(bad) = times.iter().chain(&values).find(|x| !x.is_finite()) {
            return Err(FpcaError::invalid_sample(
                &subject_id,
                format!("non-finite entry {bad}"),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FpcaError::invalid_sample(
                &subject_id,
                "times are not strictly increasing",
            ));
        }
        Ok(Self {
            subject_id,
            times,
            values,
            group,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn group(&self) -> Option<&str> {
        self.group.as_deref()
    }

    /// Number of observations `m_i`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn with_group(mut self, group: Option<String>) -> Self {
        self.group = group;
        self
    }

    /// The sample without its final (latest) observation, or `None` when
    /// only one observation exists.
    pub fn without_last(&self) -> Option<Self> {
        if self.len() < 2 {
            return None;
        }
        let m = self.len() - 1;
        Some(Self {
            subject_id: self.subject_id.clone(),
            times: self.times[..m].to_vec(),
            values: self.values[..m].to_vec(),
            group: self.group.clone(),
        })
    }

    pub fn last(&self) -> (f64, f64) {
        let m = self.len() - 1;
        (self.times[m], self.values[m])
    }

    pub fn observations(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }
}

/// Equally spaced evaluation grid with trapezoid weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    /// `n_points` equally spaced points on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(FpcaError::InvalidConfig(format!(
                "grid needs at least 3 points, got {n_points}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(FpcaError::DegenerateDomain);
        }
        let step = (hi - lo) / (n_points - 1) as f64;
        let mut points: Vec<f64> = (0..n_points).map(|i| lo + step * i as f64).collect();
        points[n_points - 1] = hi;
        Ok(Self::from_points(points))
    }

    /// Trapezoid weights for arbitrary strictly increasing points.
    pub fn from_points(points: Vec<f64>) -> Self {
        let m = points.len();
        let mut weights = vec![0.0; m];
        for i in 0..m - 1 {
            let half = 0.5 * (points[i + 1] - points[i]);
            weights[i] += half;
            weights[i + 1] += half;
        }
        Self { points, weights }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn length(&self) -> f64 {
        self.hi() - self.lo()
    }

    /// Smallest gap between neighbouring points.
    pub fn spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let (lo, hi) = (self.lo(), self.hi());
        if !t.is_finite() || t < lo - DOMAIN_TOLERANCE || t > hi + DOMAIN_TOLERANCE {
            return Err(FpcaError::TimeOutOfDomain { time: t, lo, hi });
        }
        Ok(t.clamp(lo, hi))
    }

    /// Index of the grid point closest to `t`; ties go to the smaller index.
    pub fn nearest_index(&self, t: f64) -> Result<usize> {
        let t = self.check_time(t)?;
        // first point >= t
        let upper = self.points.partition_point(|&p| p < t);
        if upper == 0 {
            return Ok(0);
        }
        if upper == self.points.len() {
            return Ok(upper - 1);
        }
        let below = t - self.points[upper - 1];
        let above = self.points[upper] - t;
        Ok(if above < below { upper } else { upper - 1 })
    }

    /// Linear interpolation of grid values at `t`.
    pub fn interpolate(&self, values: &[f64], t: f64) -> Result<f64> {
        check_len(values, self.len())?;
        let t = self.check_time(t)?;
        let upper = self.points.partition_point(|&p| p < t);
        if upper == 0 {
            return Ok(values[0]);
        }
        if upper == self.points.len() {
            return Ok(values[upper - 1]);
        }
        let (x0, x1) = (self.points[upper - 1], self.points[upper]);
        let frac = (t - x0) / (x1 - x0);
        Ok(values[upper - 1] + frac * (values[upper] - values[upper - 1]))
    }
}

/// Grid of `n_points` equally spaced points spanning every observed time.
pub fn build_grid(samples: &[LongitudinalSample], n_points: usize) -> Result<TimeGrid> {
    let (lo, hi) = observed_domain(samples)?;
    if hi <= lo {
        return Err(FpcaError::DegenerateDomain);
    }
    TimeGrid::uniform(lo, hi, n_points)
}

/// Minimum and maximum observation time over all samples.
pub fn observed_domain(samples: &[LongitudinalSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(FpcaError::NoSamples);
    }
    let lo = samples
        .iter()
        .map(|s| s.times()[0])
        .fold(f64::INFINITY, f64::min);
    let hi = samples
        .iter()
        .map(|s| s.times()[s.len() - 1])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

pub(crate) fn check_len<T>(values: &[T], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(FpcaError::LengthMismatch {
            expected,
            got: values.len(),
        });
    }
    Ok(())
}

/// Trapezoid approximation of `∫ f(t)² dt`.
pub fn norm_sq(curve: &[f64], grid: &TimeGrid) -> Result<f64> {
    check_len(curve, grid.len())?;
    Ok(weighted_sq(curve, grid.weights()))
}

/// Trapezoid approximation of `∫ f(t) g(t) dt`.
pub fn inner(f: &[f64], g: &[f64], grid: &TimeGrid) -> Result<f64> {
    check_len(f, grid.len())?;
    check_len(g, grid.len())?;
    Ok(f.iter()
        .zip(g)
        .zip(grid.weights())
        .map(|((a, b), w)| w * a * b)
        .sum())
}

/// Trapezoid approximation of `∫ f(t) dt`.
pub fn integral(f: &[f64], grid: &TimeGrid) -> Result<f64> {
    check_len(f, grid.len())?;
    Ok(f.iter().zip(grid.weights()).map(|(a, w)| w * a).sum())
}

pub(crate) fn weighted_sq(curve: &[f64], weights: &[f64]) -> f64 {
    curve.iter().zip(weights).map(|(c, w)| w * c * c).sum()
}

/// `norm_sq(a - b)` without allocating.
pub(crate) fn dist_sq(a: &[f64], b: &[f64], weights: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), w)| {
            let d = x - y;
            w * d * d
        })
        .sum()
}

/// Curves evaluated on a common grid, one row per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMatrix {
    grid: TimeGrid,
    rows: Vec<Vec<f64>>,
    subject_ids: Vec<String>,
    groups: Vec<Option<String>>,
}

impl CurveMatrix {
    pub fn new(
        grid: TimeGrid,
        rows: Vec<Vec<f64>>,
        subject_ids: Vec<String>,
        groups: Vec<Option<String>>,
    ) -> Result<Self> {
        check_len(&subject_ids, rows.len())?;
        check_len(&groups, rows.len())?;
        for row in &rows {
            check_len(row, grid.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(FpcaError::InvalidConfig("non-finite curve value".into()));
            }
        }
        Ok(Self {
            grid,
            rows,
            subject_ids,
            groups,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn groups(&self) -> &[Option<String>] {
        &self.groups
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Same rows with every group label replaced.
    pub fn relabeled(&self, groups: Vec<Option<String>>) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.rows.clone(),
            self.subject_ids.clone(),
            groups,
        )
    }

    /// Rows whose group is one of `keep`.
    pub fn subset_groups(&self, keep: &[&str]) -> Self {
        let idx: Vec<usize> = (0..self.rows.len())
            .filter(|&i| self.groups[i].as_deref().is_some_and(|g| keep.contains(&g)))
            .collect();
        Self {
            grid: self.grid.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
        }
    }
}
