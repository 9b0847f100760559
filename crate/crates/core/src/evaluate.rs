//! Model comparison: stratified k-fold goodness of fit (root MACSE) for
//! full-cohort versus group-specific models, and accuracy at each subject's
//! held-out latest observation.
//!
//! For subject `i` with `n_i` observations and prediction `X̂_i`,
//! `ACSE_i = Σ_j (X_ij − X̂_i(t_j))² / n_i`, where `t_j` is the grid point
//! nearest the observation time. `MACSE_d` averages ACSE over the test
//! subjects of fold `d`, and root MACSE is `sqrt(mean_d MACSE_d)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curves::{self, check_len, LongitudinalSample, TimeGrid};
use crate::error::{FpcaError, Result};
use crate::pace::{self, FitConfig, FpcaModel};
use crate::parallel::{derive_seed, rng_for, try_map_indexed};

/// Fold index for every subject, in input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.k];
        for &f in &self.folds {
            n[f] += 1;
        }
        n
    }
}

/// Which subjects a model is trained on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScope {
    Full,
    Group(String),
}

impl ModelScope {
    /// `"full"` or `"group"`; the group itself goes in the eval column.
    pub fn kind(&self) -> &'static str {
        match self {
            ModelScope::Full => "full",
            ModelScope::Group(_) => "group",
        }
    }

    fn admits(&self, s: &LongitudinalSample) -> bool {
        match self {
            ModelScope::Full => true,
            ModelScope::Group(g) => s.group() == Some(g.as_str()),
        }
    }
}

impl fmt::Display for ModelScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelScope::Full => f.write_str("full"),
            ModelScope::Group(g) => write!(f, "group:{g}"),
        }
    }
}

/// Label used for the whole cohort in evaluation columns.
pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofRow {
    pub repeat: usize,
    pub model_scope: String,
    pub eval_group: String,
    pub root_macse: f64,
}

/// Root MACSE for every (model scope, evaluation group) cell and repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub repeats: usize,
    pub k: usize,
    pub seed: u64,
    /// Tidy rows ordered by repeat, then cell.
    pub rows: Vec<GofRow>,
}

impl GofResult {
    /// Values of one cell across repeats.
    pub fn cell(&self, model_scope: &str, eval_group: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.model_scope == model_scope && r.eval_group == eval_group)
            .map(|r| r.root_macse)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureCell {
    pub model_scope: String,
    pub eval_group: String,
    pub root_mse: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureAccuracy {
    pub cells: Vec<FutureCell>,
    /// Subjects skipped because they have a single observation.
    pub excluded: usize,
}

impl FutureAccuracy {
    pub fn get(&self, model_scope: &str, eval_group: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.model_scope == model_scope && c.eval_group == eval_group)
            .map(|c| c.root_mse)
    }
}

/// Shuffles each group with its own derived stream and deals subjects
/// round-robin into `k` folds. The dealing offset carries over from group
/// to group, so overall fold sizes also stay within one of each other.
/// Unlabeled subjects form one group.
pub fn stratified_folds(
    samples: &[LongitudinalSample],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(FpcaError::InvalidConfig("need at least 2 folds".into()));
    }
    if samples.is_empty() {
        return Err(FpcaError::NoSamples);
    }
    let mut by_group: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_group.entry(s.group()).or_default().push(i);
    }
    let mut folds = vec![0; samples.len()];
    let mut offset = 0;
    for (g, (label, mut members)) in by_group.into_iter().enumerate() {
        if members.len() < k {
            return Err(FpcaError::TooSmallForFolds {
                group: label.unwrap_or(ALL).to_string(),
                size: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng_for(seed, g as u64));
        for (pos, &i) in members.iter().enumerate() {
            folds[i] = (offset + pos) % k;
        }
        offset += members.len();
    }
    Ok(FoldAssignment { folds, k, seed })
}

/// Mean squared residual of a sample against a curve on `grid`, read at the
/// grid point nearest each observation.
pub fn acse(sample: &LongitudinalSample, predicted: &[f64], grid: &TimeGrid) -> Result<f64> {
    check_len(predicted, grid.len())?;
    if sample.is_empty() {
        return Err(FpcaError::NoSamples);
    }
    let mut total = 0.0;
    for (t, y) in sample.observations() {
        total += (y - predicted[grid.nearest_index(t)?]).powi(2);
    }
    Ok(total / sample.len() as f64)
}

/// `sqrt(mean(macse))`.
pub fn root_of_fold_mean(macse: &[f64]) -> f64 {
    (macse.iter().sum::<f64>() / macse.len() as f64).sqrt()
}

/// Config with the grid pinned to the whole cohort's observed range, so
/// every training split shares one grid.
fn pinned(samples: &[LongitudinalSample], config: &FitConfig) -> Result<FitConfig> {
    config.validate()?;
    let mut c = config.clone();
    if c.domain.is_none() {
        c.domain = Some(curves::observed_domain(samples)?);
    }
    Ok(c)
}

/// Sorted distinct labels; every subject must have one and there must be
/// at least two.
fn group_labels(samples: &[LongitudinalSample]) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    for s in samples {
        let g = s
            .group()
            .ok_or_else(|| FpcaError::MissingGroup(s.subject_id().to_string()))?;
        labels.push(g.to_string());
    }
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(FpcaError::NotEnoughGroups);
    }
    Ok(labels)
}

fn fit_scope(
    samples: &[LongitudinalSample],
    pick: impl Fn(&LongitudinalSample) -> bool,
    config: &FitConfig,
) -> Result<FpcaModel> {
    let train: Vec<LongitudinalSample> = samples.iter().filter(|s| pick(s)).cloned().collect();
    pace::fit(&train, config)
}

fn subject_acse(model: &FpcaModel, sample: &LongitudinalSample) -> Result<f64> {
    let pred = pace::predict_trajectory(model, sample)?;
    acse(sample, &pred, &model.grid)
}

/// Cross-validated root MACSE of one model scope, averaged over the test
/// subjects in `eval_group` (all test subjects admitted by the scope when
/// `None`).
pub fn root_macse(
    samples: &[LongitudinalSample],
    scope: &ModelScope,
    eval_group: Option<&str>,
    folds: &FoldAssignment,
    config: &FitConfig,
) -> Result<f64> {
    check_len(&folds.folds, samples.len())?;
    let config = pinned(samples, config)?;
    let evaluated =
        |s: &LongitudinalSample| scope.admits(s) && eval_group.is_none_or(|g| s.group() == Some(g));
    let macse = try_map_indexed(folds.k, |d| -> Result<f64> {
        let train: Vec<LongitudinalSample> = samples
            .iter()
            .zip(&folds.folds)
            .filter(|(s, &f)| f != d && scope.admits(s))
            .map(|(s, _)| s.clone())
            .collect();
        let model = pace::fit(&train, &config)?;
        let errs = samples
            .iter()
            .zip(&folds.folds)
            .filter(|(s, &f)| f == d && evaluated(s))
            .map(|(s, _)| subject_acse(&model, s))
            .collect::<Result<Vec<f64>>>()?;
        if errs.is_empty() {
            return Err(FpcaError::EmptyTestFold(d));
        }
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    })?;
    Ok(root_of_fold_mean(&macse))
}

/// ACSE of every test subject of one fold under the full model and under
/// its own group's model.
struct FoldErrors {
    full: Vec<(usize, f64)>,
    group: Vec<(usize, f64)>,
}

fn fold_errors(
    samples: &[LongitudinalSample],
    labels: &[String],
    folds: &[usize],
    d: usize,
    config: &FitConfig,
) -> Result<FoldErrors> {
    let train: Vec<LongitudinalSample> = samples
        .iter()
        .zip(folds)
        .filter(|(_, &f)| f != d)
        .map(|(s, _)| s.clone())
        .collect();
    let full = pace::fit(&train, config)?;
    let group_models = labels
        .iter()
        .map(|g| fit_scope(&train, |s| s.group() == Some(g.as_str()), config))
        .collect::<Result<Vec<_>>>()?;
    let mut out = FoldErrors {
        full: Vec::new(),
        group: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        if folds[i] != d {
            continue;
        }
        let g = labels
            .binary_search_by(|l| l.as_str().cmp(s.group().unwrap_or_default()))
            .map_err(|_| FpcaError::MissingGroup(s.subject_id().to_string()))?;
        out.full.push((i, subject_acse(&full, s)?));
        out.group.push((i, subject_acse(&group_models[g], s)?));
    }
    Ok(out)
}

/// Repeats stratified k-fold cross-validation with fold seeds
/// `derive_seed(seed, r)` and reports, per repeat, root MACSE for the full
/// model on everyone, the full model on each group, and each group's own
/// model on that group.
pub fn gof_compare(
    samples: &[LongitudinalSample],
    repeats: usize,
    k: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<GofResult> {
    if repeats == 0 {
        return Err(FpcaError::InvalidConfig("need at least one repeat".into()));
    }
    let labels = group_labels(samples)?;
    let config = pinned(samples, config)?;
    let assignments = (0..repeats)
        .map(|r| stratified_folds(samples, k, derive_seed(seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let per_task = try_map_indexed(repeats * k, |task| {
        let (r, d) = (task / k, task % k);
        fold_errors(samples, &labels, &assignments[r].folds, d, &config)
    })?;

    let group_of: Vec<&str> = samples
        .iter()
        .map(|s| s.group().unwrap_or_default())
        .collect();
    let mut rows = Vec::new();
    for r in 0..repeats {
        let tasks = &per_task[r * k..(r + 1) * k];
        let cell = |pick_group: Option<&str>, use_group_model: bool| -> Result<f64> {
            let mut macse = Vec::with_capacity(k);
            for (d, fe) in tasks.iter().enumerate() {
                let errs = if use_group_model { &fe.group } else { &fe.full };
                let vals: Vec<f64> = errs
                    .iter()
                    .filter(|(i, _)| pick_group.is_none_or(|g| group_of[*i] == g))
                    .map(|(_, e)| *e)
                    .collect();
                if vals.is_empty() {
                    return Err(FpcaError::EmptyTestFold(d));
                }
                macse.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
            Ok(root_of_fold_mean(&macse))
        };
        rows.push(GofRow {
            repeat: r,
            model_scope: ModelScope::Full.kind().into(),
            eval_group: ALL.into(),
            root_macse: cell(None, false)?,
        });
        for g in &labels {
            rows.push(GofRow {
                repeat: r,
                model_scope: ModelScope::Full.kind().into(),
                eval_group: g.clone(),
                root_macse: cell(Some(g), false)?,
            });
        }
        for g in &labels {
            rows.push(GofRow {
                repeat: r,
                model_scope: ModelScope::Group(g.clone()).kind().into(),
                eval_group: g.clone(),
                root_macse: cell(Some(g), true)?,
            });
        }
    }
    Ok(GofResult {
        repeats,
        k,
        seed,
        rows,
    })
}

fn root_mse(residuals: &[f64]) -> f64 {
    (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// Residual at the held-out latest observation of every subject in
/// `held_out`, predicted from a model trained on `trimmed`.
fn holdout_residuals(
    trimmed: &[LongitudinalSample],
    held_out: &[(f64, f64)],
    config: &FitConfig,
) -> Result<Vec<f64>> {
    let model = pace::fit(trimmed, config)?;
    trimmed
        .iter()
        .zip(held_out)
        .map(|(s, &(t, y))| {
            let pred = pace::predict_trajectory(&model, s)?;
            Ok(y - pred[model.grid.nearest_index(t)?])
        })
        .collect()
}

/// Trains on every subject minus its latest observation and scores the
/// prediction at that observation's nearest grid point. Reports root MSE
/// for the full model on everyone and on each group, and, when groups are
/// present, for each group's own model.
pub fn future_prediction_rmse(
    samples: &[LongitudinalSample],
    config: &FitConfig,
) -> Result<FutureAccuracy> {
    let config = pinned(samples, config)?;
    let mut trimmed = Vec::new();
    let mut held_out = Vec::new();
    for s in samples {
        if let Some(t) = s.without_last() {
            trimmed.push(t);
            held_out.push(s.last());
        }
    }
    let excluded = samples.len() - trimmed.len();
    if trimmed.is_empty() {
        return Err(FpcaError::NoEligibleSubjects);
    }
    let full = holdout_residuals(&trimmed, &held_out, &config)?;
    let mut cells = vec![FutureCell {
        model_scope: ModelScope::Full.kind().into(),
        eval_group: ALL.into(),
        root_mse: root_mse(&full),
        n_subjects: full.len(),
    }];

    let mut labels: Vec<&str> = trimmed.iter().filter_map(|s| s.group()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Ok(FutureAccuracy { cells, excluded });
    }
    for &g in &labels {
        let res: Vec<f64> = trimmed
            .iter()
            .zip(&full)
            .filter(|(s, _)| s.group() == Some(g))
            .map(|(_, r)| *r)
            .collect();
        cells.push(FutureCell {
            model_scope: ModelScope::Full.kind().into(),
            eval_group: g.into(),
            root_mse: root_mse(&res),
            n_subjects: res.len(),
        });
    }
    let group_cells = try_map_indexed(labels.len(), |gi| -> Result<FutureCell> {
        let g = labels[gi];
        let (sub, held): (Vec<LongitudinalSample>, Vec<(f64, f64)>) = trimmed
            .iter()
            .zip(&held_out)
            .filter(|(s, _)| s.group() == Some(g))
            .map(|(s, h)| (s.clone(), *h))
            .unzip();
        let res = holdout_residuals(&sub, &held, &config)?;
        Ok(FutureCell {
            model_scope: ModelScope::Group(g.into()).kind().into(),
            eval_group: g.into(),
            root_mse: root_mse(&res),
            n_subjects: res.len(),
        })
    })?;
    cells.extend(group_cells);
    Ok(FutureAccuracy { cells, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(sizes: &[usize]) -> Vec<LongitudinalSample> {
        let mut out = Vec::new();
        for (g, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                out.push(
                    LongitudinalSample::new(
                        format!("g{g}-{i}"),
                        vec![0.0, 1.0],
                        vec![0.0, 0.0],
                        Some(format!("g{g}")),
                    )
                    .unwrap(),
                );
            }
        }
        out
    }

    fn within_one(counts: &[usize], n: usize, k: usize) -> bool {
        let target = n as f64 / k as f64;
        counts.iter().all(|&c| (c as f64 - target).abs() < 1.0)
    }

    fn check_stratified(samples: &[LongitudinalSample], fa: &FoldAssignment) -> bool {
        let k = fa.k;
        if !within_one(&fa.fold_sizes(), samples.len(), k) {
            return false;
        }
        let mut per: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
        for (s, &f) in samples.iter().zip(&fa.folds) {
            per.entry(s.group()).or_insert_with(|| vec![0; k])[f] += 1;
        }
        per.values().all(|c| within_one(c, c.iter().sum(), k))
    }

    #[test]
    fn cohort_sized_groups_are_stratified() {
        let s = labeled(&[965, 768, 908]);
        let fa = stratified_folds(&s, 5, 3).unwrap();
        assert!(check_stratified(&s, &fa));
        assert_eq!(fa, stratified_folds(&s, 5, 3).unwrap());
        assert_ne!(fa, stratified_folds(&s, 5, 4).unwrap());
    }

    #[test]
    fn five_subjects_one_per_fold() {
        let s = labeled(&[5]);
        let mut f = stratified_folds(&s, 5, 0).unwrap().folds;
        f.sort_unstable();
        assert_eq!(f, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn small_group_is_rejected() {
        let e = stratified_folds(&labeled(&[10, 4]), 5, 0).unwrap_err();
        assert!(e.to_string().contains("too small for 5 folds"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn folds_are_stratified(sizes in prop::collection::vec(5usize..60, 1..5), k in 2usize..6, seed in any::<u64>()) {
            let s = labeled(&sizes);
            let fa = stratified_folds(&s, k, seed).unwrap();
            prop_assert!(check_stratified(&s, &fa));
        }

        #[test]
        fn acse_ignores_observation_order(vals in prop::collection::vec(-5.0f64..5.0, 4)) {
            let grid = TimeGrid::uniform(0.0, 3.0, 4).unwrap();
            let pred = [0.5, -1.0, 2.0, 0.0];
            let s = LongitudinalSample::new("a", vec![0.0, 1.0, 2.0, 3.0], vals.clone(), None).unwrap();
            let direct: f64 = vals.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / 4.0;
            prop_assert!((acse(&s, &pred, &grid).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn acse_examples() {
        let grid = TimeGrid::uniform(0.0, 4.0, 5).unwrap();
        let pred = [1.0, 2.0, 3.0, 4.0, 5.0];
        let exact = LongitudinalSample::new("a", vec![0.1, 2.2], vec![1.0, 3.0], None).unwrap();
        assert_eq!(acse(&exact, &pred, &grid).unwrap(), 0.0);
        let one = LongitudinalSample::new("b", vec![1.0], vec![4.0], None).unwrap();
        assert_eq!(acse(&one, &pred, &grid).unwrap(), 4.0);
        let two = LongitudinalSample::new("c", vec![0.0, 3.0], vec![2.0, 1.0], None).unwrap();
        assert_eq!(acse(&two, &pred, &grid).unwrap(), 5.0);
        let out = LongitudinalSample::new("d", vec![5.0], vec![0.0], None).unwrap();
        assert!(matches!(
            acse(&out, &pred, &grid),
            Err(FpcaError::TimeOutOfDomain { .. })
        ));
    }

    #[test]
    fn root_of_constant_fold_errors() {
        assert!((root_of_fold_mean(&[2.5; 5]) - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn doubling_residuals_doubles_root_macse() {
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let pred = [1.0, 0.0, -1.0];
        let make = |f: f64| -> Vec<f64> {
            (0..5)
                .map(|d| {
                    let r = [0.3 + d as f64, -0.7, 1.1];
                    let y: Vec<f64> = pred.iter().zip(r).map(|(p, r)| p + f * r).collect();
                    let s = LongitudinalSample::new("x", vec![0.0, 0.5, 1.0], y, None).unwrap();
                    acse(&s, &pred, &grid).unwrap()
                })
                .collect()
        };
        let base = root_of_fold_mean(&make(1.0));
        assert!((root_of_fold_mean(&make(2.0)) - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn root_mse_examples() {
        assert_eq!(root_mse(&[0.0, 0.0]), 0.0);
        assert_eq!(root_mse(&[3.0]), 3.0);
    }
}
