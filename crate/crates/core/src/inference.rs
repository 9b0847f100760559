//! Permutation tests on fitted trajectories: equality of group mean
//! functions (functional ANOVA `FP` ratio) and equality of group covariance
//! functions (square-root distance, combined across pairs by max-T).
//!
//! All p-values use `(1 + #{T_b ≥ T_obs}) / (1 + B)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curves::{check_len, CurveMatrix, TimeGrid};
use crate::error::{FpcaError, Result};
use crate::json;
use crate::linalg;
use crate::pace::{self, FpcaModel};
use crate::parallel::{map_indexed, rng_for, try_map_indexed};

const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub group_u: String,
    pub group_v: String,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    /// `FP` for the mean test, the combined max-T for the covariance test.
    pub statistic: f64,
    pub p_global: f64,
    pub pairwise: Vec<PairwiseResult>,
    #[serde(rename = "B")]
    pub replicates: usize,
    pub seed: u64,
}

impl PermutationTestResult {
    pub fn to_json(&self) -> Result<String> {
        json::to_string(self)
    }
}

/// Trajectories centered by their group mean and scaled pointwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedCurves(CurveMatrix);

impl StandardizedCurves {
    pub fn curves(&self) -> &CurveMatrix {
        &self.0
    }
}

/// Sorted distinct labels and each row's index into them.
struct Groups {
    labels: Vec<String>,
    of_row: Vec<usize>,
}

impl Groups {
    fn of(curves: &CurveMatrix) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (id, g) in curves.subject_ids().iter().zip(curves.groups()) {
            let g = g
                .as_deref()
                .ok_or_else(|| FpcaError::MissingGroup(id.clone()))?;
            index.entry(g.to_string()).or_insert(0usize);
        }
        if index.len() < 2 {
            return Err(FpcaError::NotEnoughGroups);
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        let of_row = curves
            .groups()
            .iter()
            .map(|g| index[g.as_deref().unwrap_or_default()])
            .collect();
        Ok(Self {
            labels: index.into_keys().collect(),
            of_row,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.len()];
        for &g in &self.of_row {
            n[g] += 1;
        }
        n
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let g = self.len();
        (0..g)
            .flat_map(|u| (u + 1..g).map(move |v| (u, v)))
            .collect()
    }
}

fn add_one_p(exceed: usize, b: usize) -> f64 {
    (1 + exceed) as f64 / (1 + b) as f64
}

/// Between/within ratio for rows labeled `0..g`. `None` when the within
/// sum of squares is zero.
fn fp_core(rows: &[Vec<f64>], labels: &[usize], g: usize, weights: &[f64]) -> Option<f64> {
    let m = weights.len();
    let n = rows.len();
    let mut sums = vec![vec![0.0; m]; g];
    let mut counts = vec![0usize; g];
    for (row, &l) in rows.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(row) {
            *s += x;
        }
    }
    let grand: Vec<f64> = (0..m)
        .map(|j| sums.iter().map(|s| s[j]).sum::<f64>() / n as f64)
        .collect();
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|x| x / c.max(1) as f64).collect())
        .collect();
    let between: f64 = means
        .iter()
        .zip(&counts)
        .map(|(mu, &c)| c as f64 * crate::curves::dist_sq(mu, &grand, weights))
        .sum();
    let within: f64 = rows
        .iter()
        .zip(labels)
        .map(|(row, &l)| crate::curves::dist_sq(row, &means[l], weights))
        .sum();
    if within <= 0.0 {
        return None;
    }
    Some((between / (g - 1) as f64) / (within / (n - g) as f64))
}

/// The functional ANOVA ratio
/// `[Σ_g n_g ‖X̄_g − X̄‖² / (G − 1)] / [Σ_g Σ_i ‖X_gi − X̄_g‖² / (N − G)]`
/// with trapezoid-weighted norms.
pub fn fp_statistic(curves: &CurveMatrix) -> Result<f64> {
    let groups = Groups::of(curves)?;
    check_fp_design(curves, &groups)?;
    fp_core(
        curves.rows(),
        &groups.of_row,
        groups.len(),
        curves.grid().weights(),
    )
    .ok_or(FpcaError::NoWithinGroupVariation)
}

fn check_fp_design(curves: &CurveMatrix, groups: &Groups) -> Result<()> {
    if curves.n_rows() <= groups.len() {
        return Err(FpcaError::InvalidConfig(format!(
            "need more rows ({}) than groups ({})",
            curves.n_rows(),
            groups.len()
        )));
    }
    Ok(())
}

fn require_replicates(b: usize) -> Result<()> {
    if b == 0 {
        return Err(FpcaError::InvalidConfig(
            "need at least one permutation".into(),
        ));
    }
    Ok(())
}

/// Global test permuting labels over all rows, plus each pair re-tested on
/// its own rows with `B` replicates from the same seed. With two groups the
/// pairwise test coincides with the global one.
pub fn mean_permutation_test(
    curves: &CurveMatrix,
    replicates: usize,
    seed: u64,
) -> Result<PermutationTestResult> {
    require_replicates(replicates)?;
    let groups = Groups::of(curves)?;
    let (statistic, p_global) = fp_test(curves, &groups, replicates, seed)?;
    let pairwise = groups
        .pairs()
        .iter()
        .map(|&(u, v)| {
            let (lu, lv) = (&groups.labels[u], &groups.labels[v]);
            let sub = curves.subset_groups(&[lu, lv]);
            let sub_groups = Groups::of(&sub)?;
            let (stat, pv) = fp_test(&sub, &sub_groups, replicates, seed)?;
            Ok(PairwiseResult {
                group_u: lu.clone(),
                group_v: lv.clone(),
                statistic: stat,
                p_value: pv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PermutationTestResult {
        statistic,
        p_global,
        pairwise,
        replicates,
        seed,
    })
}

fn fp_test(curves: &CurveMatrix, groups: &Groups, b: usize, seed: u64) -> Result<(f64, f64)> {
    check_fp_design(curves, groups)?;
    let g = groups.len();
    let w = curves.grid().weights();
    let observed =
        fp_core(curves.rows(), &groups.of_row, g, w).ok_or(FpcaError::NoWithinGroupVariation)?;
    let exceed = map_indexed(b, |r| {
        let mut labels = groups.of_row.clone();
        labels.shuffle(&mut rng_for(seed, r as u64));
        // zero within-group spread with a nonzero ratio elsewhere is extreme
        let t = fp_core(curves.rows(), &labels, g, w).unwrap_or(f64::INFINITY);
        t >= observed
    })
    .into_iter()
    .filter(|&x| x)
    .count();
    Ok((observed, add_one_p(exceed, b)))
}

/// `row ← (row − group mean) / sqrt(variance)` pointwise.
pub fn standardize_with_variance(
    curves: &CurveMatrix,
    variance: &[f64],
) -> Result<StandardizedCurves> {
    check_len(variance, curves.grid().len())?;
    if let Some(j) = variance.iter().position(|&v| v.is_nan() || v <= 0.0) {
        return Err(FpcaError::NonpositiveVariance(j));
    }
    let mut labels: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (id, g)) in curves.subject_ids().iter().zip(curves.groups()).enumerate() {
        let g = g
            .as_deref()
            .ok_or_else(|| FpcaError::MissingGroup(id.clone()))?;
        labels.entry(g).or_default().push(i);
    }
    let m = variance.len();
    let sd: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    let mut rows = curves.rows().to_vec();
    for members in labels.values() {
        let n = members.len() as f64;
        let mean: Vec<f64> = (0..m)
            .map(|j| members.iter().map(|&i| curves.rows()[i][j]).sum::<f64>() / n)
            .collect();
        for &i in members {
            for j in 0..m {
                rows[i][j] = (rows[i][j] - mean[j]) / sd[j];
            }
        }
    }
    Ok(StandardizedCurves(CurveMatrix::new(
        curves.grid().clone(),
        rows,
        curves.subject_ids().to_vec(),
        curves.groups().to_vec(),
    )?))
}

/// Centers each row by its group mean and scales by the full model's
/// pointwise standard deviation, read from the diagonal of the positive
/// semidefinite part of its smoothed covariance surface. The raw smoothed
/// diagonal can dip below zero near sparse domain corners.
pub fn standardize_trajectories(
    curves: &CurveMatrix,
    full_model: &FpcaModel,
) -> Result<StandardizedCurves> {
    check_len(full_model.grid.points(), curves.grid().len())?;
    let (values, functions) = pace::eigendecompose(&full_model.covariance, &full_model.grid)?;
    let diag: Vec<f64> = (0..full_model.n_grid())
        .map(|j| {
            values
                .iter()
                .zip(&functions)
                .map(|(l, phi)| l * phi[j] * phi[j])
                .sum()
        })
        .collect();
    standardize_with_variance(curves, &diag)
}

/// `‖Σ₁^{1/2} − Σ₂^{1/2}‖_HS` for covariance kernels tabulated on `grid`.
pub fn sqrt_distance(s1: &[Vec<f64>], s2: &[Vec<f64>], grid: &TimeGrid) -> Result<f64> {
    sqrt_distance_weighted(s1, s2, grid.weights())
}

/// [`sqrt_distance`] with explicit quadrature weights.
///
/// The kernel `R` of the operator square root satisfies `R W R = S` for
/// `W = diag(weights)`, so `W^{1/2} R W^{1/2} = (W^{1/2} S W^{1/2})^{1/2}` and
/// the weighted Hilbert–Schmidt norm of `R₁ − R₂` is a plain Frobenius norm
/// of the difference of those matrix roots. Unit weights reduce this to the
/// ordinary matrix square root.
pub fn sqrt_distance_weighted(s1: &[Vec<f64>], s2: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let a = linalg::to_matrix(s1)?;
    let b = linalg::to_matrix(s2)?;
    check_len(weights, a.nrows())?;
    check_len(weights, b.nrows())?;
    linalg::require_symmetric(&a, SYMMETRY_TOL)?;
    linalg::require_symmetric(&b, SYMMETRY_TOL)?;
    let d = weighted_root(a, weights) - weighted_root(b, weights);
    Ok(d.norm())
}

fn weighted_root(s: DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let r: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let m = s.nrows();
    linalg::psd_sqrt(DMatrix::from_fn(m, m, |i, j| r[i] * s[(i, j)] * r[j]))
}

/// Coordinates of the rows in an orthonormal basis of their span.
///
/// For rows `X = C Qᵀ` with `Qᵀ Q = I`, any subset satisfies
/// `(XᵀX)^{1/2} = Q (CᵀC)^{1/2} Qᵀ`, and Frobenius distances between such
/// roots equal those between the small `r × r` roots. Directions with
/// singular value below `1e-12` of the largest are dropped.
fn row_space_coordinates(rows: DMatrix<f64>) -> DMatrix<f64> {
    let n = rows.nrows();
    let svd = rows.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| s_max > 0.0 && svd.singular_values[i] > 1e-12 * s_max)
        .collect();
    if keep.is_empty() {
        return DMatrix::zeros(n, 1);
    }
    let basis = DMatrix::from_fn(rows.ncols(), keep.len(), |j, c| v_t[(keep[c], j)]);
    rows * basis
}

/// `(W^{1/2} Σ̂ W^{1/2})^{1/2}` (in row-space coordinates) for the sample
/// covariance, divisor `n − 1`, of `rows[idx]`.
fn group_root(rows: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let n = idx.len();
    let m = rows.ncols();
    let mut mean = vec![0.0; m];
    for &i in idx {
        for (j, acc) in mean.iter_mut().enumerate() {
            *acc += rows[(i, j)];
        }
    }
    mean.iter_mut().for_each(|x| *x /= n as f64);
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let z = DMatrix::from_fn(n, m, |r, j| (rows[(idx[r], j)] - mean[j]) * scale);
    linalg::psd_sqrt(z.transpose() * z)
}

fn pair_distance(rows: &DMatrix<f64>, u: &mut [usize], v: &mut [usize]) -> f64 {
    // a fixed summation order makes equal partitions give equal statistics
    u.sort_unstable();
    v.sort_unstable();
    (group_root(rows, u) - group_root(rows, v)).norm()
}

/// Paired permutation tests of covariance equality combined by max-T.
///
/// Each replicate draws one random key per row. For a pair `(u, v)` the
/// pooled rows are ordered by key and the first `n_u` relabeled `u`, so all
/// pairs see the restriction of one common relabeling. Partial p-values of
/// every replicate are taken against the full permutation distribution of
/// its pair (observed included) and combined as `max_pairs (1 − p)`.
pub fn covariance_permutation_test(
    standardized: &StandardizedCurves,
    replicates: usize,
    seed: u64,
) -> Result<PermutationTestResult> {
    require_replicates(replicates)?;
    let curves = standardized.curves();
    let groups = Groups::of(curves)?;
    for (label, &n) in groups.labels.iter().zip(&groups.sizes()) {
        if n < 2 {
            return Err(FpcaError::GroupTooSmall {
                group: label.clone(),
                size: n,
                needed: 2,
            });
        }
    }
    let sw: Vec<f64> = curves.grid().weights().iter().map(|w| w.sqrt()).collect();
    let nrows = curves.n_rows();
    let rows = row_space_coordinates(DMatrix::from_fn(nrows, sw.len(), |i, j| {
        curves.rows()[i][j] * sw[j]
    }));
    let members: Vec<Vec<usize>> = (0..groups.len())
        .map(|g| (0..nrows).filter(|&i| groups.of_row[i] == g).collect())
        .collect();
    let pairs = groups.pairs();

    let observed: Vec<f64> = pairs
        .iter()
        .map(|&(u, v)| pair_distance(&rows, &mut members[u].clone(), &mut members[v].clone()))
        .collect();
    let permuted: Vec<Vec<f64>> = try_map_indexed(replicates, |b| -> Result<Vec<f64>> {
        let mut rng = rng_for(seed, b as u64);
        let keys: Vec<u64> = (0..nrows).map(|_| rng.random()).collect();
        Ok(pairs
            .iter()
            .map(|&(u, v)| {
                let mut pooled: Vec<usize> =
                    members[u].iter().chain(&members[v]).copied().collect();
                pooled.sort_by_key(|&i| (keys[i], i));
                let (a, c) = pooled.split_at_mut(members[u].len());
                pair_distance(&rows, a, c)
            })
            .collect())
    })?;

    // column p holds [observed, replicate 1, ..., replicate B]
    let dist: Vec<Vec<f64>> = (0..pairs.len())
        .map(|p| {
            std::iter::once(observed[p])
                .chain(permuted.iter().map(|r| r[p]))
                .collect()
        })
        .collect();
    let total = replicates + 1;
    let combined: Vec<f64> = (0..total)
        .map(|b| {
            dist.iter()
                .map(|col| {
                    let p = col.iter().filter(|&&t| t >= col[b]).count() as f64 / total as f64;
                    1.0 - p
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let exceed = combined[1..].iter().filter(|&&c| c >= combined[0]).count();
    let pairwise = pairs
        .iter()
        .zip(&dist)
        .map(|(&(u, v), col)| PairwiseResult {
            group_u: groups.labels[u].clone(),
            group_v: groups.labels[v].clone(),
            statistic: col[0],
            p_value: add_one_p(
                col[1..].iter().filter(|&&t| t >= col[0]).count(),
                replicates,
            ),
        })
        .collect();
    Ok(PermutationTestResult {
        statistic: combined[0],
        p_global: add_one_p(exceed, replicates),
        pairwise,
        replicates,
        seed,
    })
}
