//! Karhunen–Loève cohort generator.
//!
//! Each subject gets `m_i ~ U{min_obs..=max_obs}` sorted uniform observation
//! times, scores `ξ_ik ~ N(0, λ_k)`, and observations
//! `Y_ij = μ(t_ij) + Σ_k φ_k(t_ij) ξ_ik + ε_ij` with `ε_ij ~ N(0, σ²)`.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curves::{self, LongitudinalSample, TimeGrid};
use crate::error::{FpcaError, Result};
use crate::parallel::{derive_seed, map_indexed, rng_for};

/// A real function on the simulation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionSpec {
    Constant {
        value: f64,
    },
    /// `Σ_p coefficients[p] t^p`.
    Polynomial {
        coefficients: Vec<f64>,
    },
    /// Shifted Legendre polynomial of the given degree, orthonormal on the
    /// domain.
    Legendre {
        degree: usize,
    },
    /// Orthonormal Fourier basis on the domain: index 0 is constant,
    /// `2j - 1` is the j-th sine and `2j` the j-th cosine.
    Fourier {
        index: usize,
    },
    /// Piecewise linear through `(points, values)`, constant beyond the ends.
    Tabulated {
        points: Vec<f64>,
        values: Vec<f64>,
    },
    /// Weighted sum of other functions.
    Sum {
        terms: Vec<WeightedFunction>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedFunction {
    pub weight: f64,
    pub function: FunctionSpec,
}

impl FunctionSpec {
    pub fn eval(&self, t: f64, domain: (f64, f64)) -> f64 {
        let (lo, hi) = domain;
        let len = hi - lo;
        match self {
            FunctionSpec::Constant { value } => *value,
            FunctionSpec::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            FunctionSpec::Legendre { degree } => {
                let x = 2.0 * (t - lo) / len - 1.0;
                let n = *degree;
                let (mut p0, mut p1) = (1.0, x);
                let p = if n == 0 {
                    1.0
                } else {
                    for k in 1..n {
                        let kf = k as f64;
                        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                        p0 = p1;
                        p1 = p2;
                    }
                    p1
                };
                p * ((2 * n + 1) as f64 / len).sqrt()
            }
            FunctionSpec::Fourier { index } => {
                if *index == 0 {
                    return 1.0 / len.sqrt();
                }
                let j = index.div_ceil(2) as f64;
                let arg = 2.0 * std::f64::consts::PI * j * (t - lo) / len;
                let amp = (2.0 / len).sqrt();
                if index % 2 == 1 {
                    amp * arg.sin()
                } else {
                    amp * arg.cos()
                }
            }
            FunctionSpec::Tabulated { points, values } => {
                let upper = points.partition_point(|&p| p < t);
                if upper == 0 {
                    values[0]
                } else if upper == points.len() {
                    values[points.len() - 1]
                } else {
                    let (x0, x1) = (points[upper - 1], points[upper]);
                    let f = (t - x0) / (x1 - x0);
                    values[upper - 1] + f * (values[upper] - values[upper - 1])
                }
            }
            FunctionSpec::Sum { terms } => terms
                .iter()
                .map(|wf| wf.weight * wf.function.eval(t, domain))
                .sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            FunctionSpec::Tabulated { points, values } => {
                if points.len() < 2 || points.len() != values.len() {
                    return Err(FpcaError::InvalidSpec(
                        "tabulated function needs >= 2 points and matching values".into(),
                    ));
                }
                if points.windows(2).any(|w| w[1] <= w[0])
                    || points.iter().chain(values).any(|x| !x.is_finite())
                {
                    return Err(FpcaError::InvalidSpec(
                        "tabulated points must be finite and strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            FunctionSpec::Sum { terms } => terms.iter().try_for_each(|t| t.function.validate()),
            FunctionSpec::Constant { value } if !value.is_finite() => {
                Err(FpcaError::InvalidSpec("non-finite constant".into()))
            }
            FunctionSpec::Polynomial { coefficients }
                if coefficients.iter().any(|c| !c.is_finite()) =>
            {
                Err(FpcaError::InvalidSpec("non-finite coefficient".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Generative description of a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSpec {
    pub domain: (f64, f64),
    pub mean: FunctionSpec,
    pub eigenfunctions: Vec<FunctionSpec>,
    pub eigenvalues: Vec<f64>,
    pub sigma2: f64,
    pub min_obs: usize,
    pub max_obs: usize,
}

impl KlSpec {
    /// Mean `50 − 2t` on `[0, 15]` with a level mode and a slope mode
    /// (`λ = 9, 4`), noise variance 4, and 2 to 8 observations per subject.
    pub fn oracle() -> Self {
        Self {
            domain: (0.0, 15.0),
            mean: FunctionSpec::Polynomial {
                coefficients: vec![50.0, -2.0],
            },
            eigenfunctions: vec![
                FunctionSpec::Legendre { degree: 0 },
                FunctionSpec::Legendre { degree: 1 },
            ],
            eigenvalues: vec![9.0, 4.0],
            sigma2: 4.0,
            min_obs: 2,
            max_obs: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.domain;
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(FpcaError::InvalidSpec("domain must satisfy lo < hi".into()));
        }
        if self.eigenfunctions.len() != self.eigenvalues.len() {
            return Err(FpcaError::InvalidSpec(format!(
                "{} eigenfunctions but {} eigenvalues",
                self.eigenfunctions.len(),
                self.eigenvalues.len()
            )));
        }
        if self.eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(FpcaError::InvalidSpec("eigenvalues must be >= 0".into()));
        }
        if self.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(FpcaError::InvalidSpec(
                "eigenvalues must be nonincreasing".into(),
            ));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(FpcaError::InvalidSpec("sigma2 must be >= 0".into()));
        }
        if self.min_obs == 0 || self.min_obs > self.max_obs {
            return Err(FpcaError::InvalidSpec(
                "need 1 <= min_obs <= max_obs".into(),
            ));
        }
        self.mean.validate()?;
        for f in &self.eigenfunctions {
            f.validate()?;
        }
        let grid = TimeGrid::uniform(lo, hi, 401)?;
        let tab: Vec<Vec<f64>> = (0..self.eigenfunctions.len())
            .map(|k| self.eigenfunction_on(k, &grid))
            .collect();
        for a in 0..tab.len() {
            for b in 0..=a {
                let ip = curves::inner(&tab[a], &tab[b], &grid)?;
                let target = if a == b { 1.0 } else { 0.0 };
                if (ip - target).abs() > 1e-3 {
                    return Err(FpcaError::InvalidSpec(format!(
                        "eigenfunctions {a} and {b} are not orthonormal (inner product {ip:.4})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        self.mean.eval(t, self.domain)
    }

    pub fn eigenfunction_at(&self, k: usize, t: f64) -> f64 {
        self.eigenfunctions[k].eval(t, self.domain)
    }

    pub fn mean_on(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.points().iter().map(|&t| self.mean_at(t)).collect()
    }

    pub fn eigenfunction_on(&self, k: usize, grid: &TimeGrid) -> Vec<f64> {
        grid.points()
            .iter()
            .map(|&t| self.eigenfunction_at(k, t))
            .collect()
    }

    /// `Σ_k λ_k φ_k(s) φ_k(t)` on the grid lattice.
    pub fn covariance_on(&self, grid: &TimeGrid) -> Vec<Vec<f64>> {
        let tabs: Vec<Vec<f64>> = (0..self.eigenvalues.len())
            .map(|k| self.eigenfunction_on(k, grid))
            .collect();
        let m = grid.len();
        (0..m)
            .map(|a| {
                (0..m)
                    .map(|b| {
                        tabs.iter()
                            .zip(&self.eigenvalues)
                            .map(|(phi, l)| l * phi[a] * phi[b])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Noise-free trajectory `μ + Σ φ_k ξ_k` on the grid.
    pub fn trajectory_on(&self, scores: &[f64], grid: &TimeGrid) -> Vec<f64> {
        grid.points()
            .iter()
            .map(|&t| {
                self.mean_at(t)
                    + scores
                        .iter()
                        .enumerate()
                        .map(|(k, xi)| xi * self.eigenfunction_at(k, t))
                        .sum::<f64>()
            })
            .collect()
    }

    /// Average pointwise standard deviation, `sqrt(Σ λ_k / |domain|)`.
    pub fn average_sd(&self) -> f64 {
        (self.eigenvalues.iter().sum::<f64>() / (self.domain.1 - self.domain.0)).sqrt()
    }
}

/// Generated samples with their latent scores (`scores[i][k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub samples: Vec<LongitudinalSample>,
    pub scores: Vec<Vec<f64>>,
}

/// `n` subjects drawn from `spec`, ids `S0000`, `S0001`, ….
pub fn simulate_cohort(spec: &KlSpec, n: usize, seed: u64) -> Result<Vec<LongitudinalSample>> {
    Ok(simulate_cohort_detailed(spec, n, seed, None)?.samples)
}

/// Like [`simulate_cohort`], also returning the latent scores. With a label,
/// every sample carries it as its group and ids are `<label>-0000`, ….
pub fn simulate_cohort_detailed(
    spec: &KlSpec,
    n: usize,
    seed: u64,
    label: Option<&str>,
) -> Result<SimulatedCohort> {
    spec.validate()?;
    if n == 0 {
        return Err(FpcaError::InvalidSpec("need at least one subject".into()));
    }
    let (lo, hi) = spec.domain;
    let prefix = label.map_or_else(|| "S".to_string(), |l| format!("{l}-"));
    let subjects = map_indexed(n, |i| -> Result<(LongitudinalSample, Vec<f64>)> {
        let mut rng = rng_for(seed, i as u64);
        let m = rng.random_range(spec.min_obs..=spec.max_obs);
        let times = loop {
            let mut ts: Vec<f64> = (0..m).map(|_| rng.random_range(lo..=hi)).collect();
            ts.sort_by(f64::total_cmp);
            if ts.windows(2).all(|w| w[1] > w[0]) {
                break ts;
            }
        };
        let scores: Vec<f64> = spec
            .eigenvalues
            .iter()
            .map(|l| {
                let z: f64 = StandardNormal.sample(&mut rng);
                l.sqrt() * z
            })
            .collect();
        let noise_sd = spec.sigma2.sqrt();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                let signal: f64 = spec.mean_at(t)
                    + scores
                        .iter()
                        .enumerate()
                        .map(|(k, xi)| xi * spec.eigenfunction_at(k, t))
                        .sum::<f64>();
                let z: f64 = StandardNormal.sample(&mut rng);
                signal + noise_sd * z
            })
            .collect();
        let sample = LongitudinalSample::new(
            format!("{prefix}{i:04}"),
            times,
            values,
            label.map(str::to_string),
        )?;
        Ok((sample, scores))
    });
    let mut samples = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for r in subjects {
        let (s, xi) = r?;
        samples.push(s);
        scores.push(xi);
    }
    Ok(SimulatedCohort { samples, scores })
}

/// One labeled cohort per `(spec, n, label)`, concatenated. Group `g` is
/// drawn with seed `derive_seed(seed, g)`.
pub fn simulate_groups(
    specs: &[(KlSpec, usize, String)],
    seed: u64,
) -> Result<Vec<LongitudinalSample>> {
    Ok(simulate_groups_detailed(specs, seed)?.samples)
}

pub fn simulate_groups_detailed(
    specs: &[(KlSpec, usize, String)],
    seed: u64,
) -> Result<SimulatedCohort> {
    let mut seen = HashSet::new();
    for (_, _, label) in specs {
        if !seen.insert(label.as_str()) {
            return Err(FpcaError::DuplicateLabel(label.clone()));
        }
    }
    let mut out = SimulatedCohort {
        samples: Vec::new(),
        scores: Vec::new(),
    };
    for (g, (spec, n, label)) in specs.iter().enumerate() {
        let c = simulate_cohort_detailed(spec, *n, derive_seed(seed, g as u64), Some(label))?;
        out.samples.extend(c.samples);
        out.scores.extend(c.scores);
    }
    Ok(out)
}
