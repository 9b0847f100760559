use fpca_core::curves::{self, TimeGrid};
use fpca_core::evaluate;
use fpca_core::pace::{self, FitConfig};
use fpca_core::simulate::{self, FunctionSpec, KlSpec};
use fpca_core::LongitudinalSample;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dense_noiseless(spec: &KlSpec) -> KlSpec {
    KlSpec {
        sigma2: 0.0,
        min_obs: 30,
        max_obs: 40,
        ..spec.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fitted_models_satisfy_invariants(
        seed in any::<u64>(),
        n in 20usize..60,
        l1 in 1.0f64..20.0,
        ratio in 0.05f64..1.0,
        sigma2 in 0.0f64..4.0,
        fve in 0.5f64..1.0,
    ) {
        let spec = KlSpec {
            eigenvalues: vec![l1, l1 * ratio],
            sigma2,
            ..KlSpec::oracle()
        };
        let samples = simulate::simulate_cohort(&spec, n, seed).unwrap();
        let config = FitConfig { fve_threshold: fve, grid_points: 31, ..FitConfig::default() };
        let model = pace::fit(&samples, &config).unwrap();
        prop_assert_eq!(model.check_invariants(), Ok(()));
        prop_assert!(model.fve[model.k - 1] >= fve - 1e-12 || model.k == config.max_components);
        prop_assert_eq!(model.subjects.len(), n);
    }
}

#[test]
fn fit_is_deterministic_and_order_independent() {
    let samples = simulate::simulate_cohort(&KlSpec::oracle(), 120, 17).unwrap();
    let config = FitConfig::default();
    let a = pace::fit(&samples, &config).unwrap();
    let b = pace::fit(&samples, &config).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let mut shuffled = samples.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let c = pace::fit(&shuffled, &config).unwrap();
    assert_eq!(a.mean, c.mean);
    assert_eq!(a.covariance, c.covariance);
    assert_eq!(a.eigenfunctions, c.eigenfunctions);
    assert_eq!(a.sigma2, c.sigma2);
    for s in &c.subjects {
        let orig = a
            .subjects
            .iter()
            .find(|x| x.subject_id == s.subject_id)
            .unwrap();
        assert_eq!(orig.scores, s.scores);
    }
}

#[test]
fn model_json_round_trips_exactly() {
    let samples = simulate::simulate_cohort(&KlSpec::oracle(), 60, 2).unwrap();
    let model = pace::fit(&samples, &FitConfig::default()).unwrap();
    let text = model.to_json().unwrap();
    let back = pace::FpcaModel::from_json(&text).unwrap();
    assert_eq!(back, model);
    assert!(text.contains("\"K\":"));
}

#[test]
fn exponential_mean_is_recovered() {
    let spec = KlSpec {
        domain: (0.0, 20.0),
        mean: FunctionSpec::Tabulated {
            points: (0..=200).map(|i| i as f64 * 0.1).collect(),
            values: (0..=200)
                .map(|i| 100.0 * (-(i as f64 * 0.1) / 10.0).exp())
                .collect(),
        },
        eigenfunctions: vec![FunctionSpec::Legendre { degree: 0 }],
        eigenvalues: vec![4.0],
        sigma2: 4.0,
        min_obs: 2,
        max_obs: 8,
    };
    let samples = simulate::simulate_cohort(&spec, 200, 9).unwrap();
    let grid = TimeGrid::uniform(0.0, 20.0, 51).unwrap();
    let mean = pace::estimate_mean(&samples, &grid, &FitConfig::default()).unwrap();
    let truth: Vec<f64> = grid
        .points()
        .iter()
        .map(|&t| 100.0 * (-t / 10.0).exp())
        .collect();
    let rmse = (mean
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / grid.len() as f64)
        .sqrt();
    assert!(rmse < 1.0, "rmse {rmse}");
}

#[test]
fn noiseless_common_design_gives_zero_noise_variance() {
    // every subject observed at the same times, level mode only
    let grid = TimeGrid::uniform(0.0, 10.0, 51).unwrap();
    let times: Vec<f64> = (0..101).map(|j| j as f64 * 0.1).collect();
    let c = 1.0 / 10f64.sqrt();
    let xi: Vec<f64> = (0..40)
        .map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.7)
        .collect();
    let samples: Vec<LongitudinalSample> = xi
        .iter()
        .enumerate()
        .map(|(i, x)| {
            LongitudinalSample::new(
                format!("s{i}"),
                times.clone(),
                times.iter().map(|t| 5.0 - 0.3 * t + x * c).collect(),
                None,
            )
            .unwrap()
        })
        .collect();
    let config = FitConfig::default();
    let mean = pace::estimate_mean(&samples, &grid, &config).unwrap();
    let xbar = xi.iter().sum::<f64>() / xi.len() as f64;
    let var = xi.iter().map(|x| (x - xbar).powi(2)).sum::<f64>() / xi.len() as f64 * c * c;
    let cov = vec![vec![var; grid.len()]; grid.len()];
    let s2 = pace::estimate_sigma2(&samples, &mean, &cov, &grid, &config).unwrap();
    assert!(s2 <= 1e-6, "sigma2 {s2}");
}

#[test]
fn true_truncation_beats_one_fewer_component() {
    let spec = dense_noiseless(&KlSpec::oracle());
    let cohort = simulate::simulate_cohort_detailed(&spec, 100, 5, None).unwrap();
    let model = pace::fit(&cohort.samples, &FitConfig::default()).unwrap();
    assert!(model.k >= 2);
    let grid = &model.grid;
    for (s, xi) in model.subjects.iter().zip(&cohort.scores) {
        let truth = spec.trajectory_on(xi, grid);
        let ise = |k: usize| {
            let mut sc = s.scores.clone();
            sc.iter_mut().skip(k).for_each(|x| *x = 0.0);
            let f = pace::fitted_trajectory(&model, &sc).unwrap();
            let d: Vec<f64> = f.iter().zip(&truth).map(|(a, b)| a - b).collect();
            curves::norm_sq(&d, grid).unwrap()
        };
        assert!(ise(2) < ise(1), "subject {}", s.subject_id);
    }
}

#[test]
fn scores_are_centered() {
    let samples = simulate::simulate_cohort(&KlSpec::oracle(), 400, 31).unwrap();
    let model = pace::fit(&samples, &FitConfig::default()).unwrap();
    let n = model.subjects.len() as f64;
    for k in 0..model.k {
        let v: Vec<f64> = model.subjects.iter().map(|s| s.scores[k]).collect();
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(
            mean.abs() < 3.0 * sd / n.sqrt(),
            "component {k}: mean {mean}, sd {sd}"
        );
    }
}

#[test]
fn prediction_denoises_held_out_subjects() {
    let spec = KlSpec::oracle();
    let train = simulate::simulate_cohort(&spec, 300, 41).unwrap();
    let model = pace::fit(&train, &FitConfig::default()).unwrap();
    let held = simulate::simulate_cohort_detailed(&spec, 100, 42, None).unwrap();
    let (mut pred_se, mut raw_se, mut count) = (0.0, 0.0, 0.0);
    for (s, xi) in held.samples.iter().zip(&held.scores) {
        let Ok(curve) = pace::predict_trajectory(&model, s) else {
            // held-out times can fall just outside the training range
            continue;
        };
        for (t, y) in s.observations() {
            let truth = spec.mean_at(t)
                + xi.iter()
                    .enumerate()
                    .map(|(k, x)| x * spec.eigenfunction_at(k, t))
                    .sum::<f64>();
            let p = model.grid.interpolate(&curve, t).unwrap();
            pred_se += (p - truth).powi(2);
            raw_se += (y - truth).powi(2);
            count += 1.0;
        }
    }
    assert!(count > 300.0);
    assert!(
        pred_se < raw_se,
        "pred {} raw {}",
        (pred_se / count).sqrt(),
        (raw_se / count).sqrt()
    );
}

#[test]
fn future_accuracy_sits_near_the_noise_floor() {
    let samples = simulate::simulate_cohort(&KlSpec::oracle(), 200, 8).unwrap();
    let acc = evaluate::future_prediction_rmse(&samples, &FitConfig::default()).unwrap();
    let sigma = 2.0;
    let full = acc.get("full", evaluate::ALL).unwrap();
    assert!((0.5 * sigma..=4.0 * sigma).contains(&full), "{full}");
    assert_eq!(acc.excluded, 0);
    assert_eq!(acc.cells.len(), 1);
}

#[test]
fn future_accuracy_excludes_single_observations() {
    let mut samples = simulate::simulate_cohort(&KlSpec::oracle(), 80, 12).unwrap();
    samples.push(LongitudinalSample::new("lonely", vec![3.0], vec![40.0], None).unwrap());
    let acc = evaluate::future_prediction_rmse(&samples, &FitConfig::default()).unwrap();
    assert_eq!(acc.excluded, 1);
    let only_single = [LongitudinalSample::new("x", vec![1.0], vec![1.0], None).unwrap()];
    assert!(evaluate::future_prediction_rmse(&only_single, &FitConfig::default()).is_err());
}

fn two_groups(seed: u64, n: usize) -> Vec<LongitudinalSample> {
    let spec = KlSpec::oracle();
    simulate::simulate_groups(
        &[(spec.clone(), n, "A".into()), (spec, n, "B".into())],
        seed,
    )
    .unwrap()
}

#[test]
fn gof_is_reproducible_and_varies_across_repeats() {
    let samples = two_groups(3, 60);
    let config = FitConfig::default();
    let a = evaluate::gof_compare(&samples, 3, 5, 11, &config).unwrap();
    let b = evaluate::gof_compare(&samples, 3, 5, 11, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3 * 5);
    assert!(a
        .rows
        .iter()
        .all(|r| r.root_macse.is_finite() && r.root_macse >= 0.0));
    for (scope, g) in [("full", "all"), ("full", "A"), ("group", "B")] {
        let v = a.cell(scope, g);
        assert_eq!(v.len(), 3);
        assert!(
            v.iter().any(|x| *x != v[0]),
            "{scope}/{g} constant across repeats"
        );
    }
}

#[test]
fn single_repeat_matches_root_macse() {
    let samples = two_groups(5, 40);
    let config = FitConfig::default();
    let r = evaluate::gof_compare(&samples, 1, 5, 2, &config).unwrap();
    let folds =
        evaluate::stratified_folds(&samples, 5, fpca_core::parallel::derive_seed(2, 0)).unwrap();
    let full =
        evaluate::root_macse(&samples, &evaluate::ModelScope::Full, None, &folds, &config).unwrap();
    assert_eq!(r.cell("full", "all"), [full]);
    let ga = evaluate::root_macse(
        &samples,
        &evaluate::ModelScope::Group("A".into()),
        Some("A"),
        &folds,
        &config,
    )
    .unwrap();
    assert_eq!(r.cell("group", "A"), [ga]);
    let fb = evaluate::root_macse(
        &samples,
        &evaluate::ModelScope::Full,
        Some("B"),
        &folds,
        &config,
    )
    .unwrap();
    assert_eq!(r.cell("full", "B"), [fb]);
}

#[test]
fn homogeneous_groups_score_alike() {
    for seed in 0..3 {
        let samples = two_groups(100 + seed, 100);
        let r = evaluate::gof_compare(&samples, 1, 5, seed, &FitConfig::default()).unwrap();
        for g in ["A", "B"] {
            let (f, own) = (r.cell("full", g)[0], r.cell("group", g)[0]);
            assert!((own - f).abs() / f < 0.10, "{g}: full {f} group {own}");
        }
    }
}
