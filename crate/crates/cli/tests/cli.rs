use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fpca_cli::io::{parse_csv, samples_to_csv};
use fpca_core::LongitudinalSample;
use proptest::prelude::*;

const PLAN: &str = r#"{"cohorts": [
  {"label": "A", "n": 80, "spec": {"domain": [0, 15],
    "mean": {"kind": "polynomial", "coefficients": [50, -2]},
    "eigenfunctions": [{"kind": "legendre", "degree": 0}, {"kind": "legendre", "degree": 1}],
    "eigenvalues": [9, 4], "sigma2": 1, "min_obs": 4, "max_obs": 8}},
  {"label": "B", "n": 80, "spec": {"domain": [0, 15],
    "mean": {"kind": "polynomial", "coefficients": [50, -2]},
    "eigenfunctions": [{"kind": "legendre", "degree": 0}, {"kind": "legendre", "degree": 1}],
    "eigenvalues": [9, 4], "sigma2": 1, "min_obs": 4, "max_obs": 8}}
]}"#;

fn fpca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpca"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fpca(args);
    assert!(
        out.status.success(),
        "fpca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate_into(dir: &Path) -> String {
    let plan = dir.join("plan.json");
    fs::write(&plan, PLAN).unwrap();
    let out = dir.join("sim");
    ok(&[
        "simulate",
        "--spec",
        plan.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    out.join("cohort.csv").to_string_lossy().into_owned()
}

#[test]
fn fit_on_two_component_cohort_selects_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate_into(dir.path());
    let out = dir.path().join("fit");
    let run = ok(&["fit", "--input", &input, "--output", out.to_str().unwrap()]);
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("fpca fit config"), "{stderr}");
    assert!(stderr.contains("\"seed\":0"), "{stderr}");
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["K"], 2);
    for f in ["mean.csv", "eigenfunctions.csv", "scores.csv", "fve.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.starts_with("id,group,xi1,xi2\n"), "{scores}");
    assert_eq!(scores.lines().count(), 161);
}

#[test]
fn predict_uses_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate_into(dir.path());
    let fit = dir.path().join("fit");
    ok(&["fit", "--input", &input, "--output", fit.to_str().unwrap()]);
    let new = dir.path().join("new.csv");
    fs::write(&new, "id,time,value\nz,1,48\nz,6,40\n").unwrap();
    let out = dir.path().join("pred");
    ok(&[
        "predict",
        "--model",
        fit.join("model.json").to_str().unwrap(),
        "--input",
        new.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 51);
    assert!(text.lines().skip(1).all(|l| l.starts_with("z,")));
}

#[test]
fn group_commands_need_two_groups() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("one.csv");
    fs::write(
        &csv,
        "id,time,value,group\na,0,1,x\na,1,2,x\nb,0,2,x\nb,1,1,x\n",
    )
    .unwrap();
    let out = fpca(&[
        "test-mean",
        "--input",
        csv.to_str().unwrap(),
        "--output",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("need at least 2 groups"), "{stderr}");
}

#[test]
fn bad_input_exits_nonzero_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "id,time,value\na,0,1\na,0,2\n").unwrap();
    let out = fpca(&[
        "fit",
        "--input",
        csv.to_str().unwrap(),
        "--output",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.csv:3: duplicate time"), "{stderr}");

    let out = fpca(&["fit", "--folds", "1", "--input", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gof_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate_into(dir.path());
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("gof{i}"));
            ok(&[
                "gof",
                "--input",
                &input,
                "--output",
                out.to_str().unwrap(),
                "--repeats",
                "2",
                "--seed",
                "5",
            ]);
            (
                fs::read(out.join("gof.json")).unwrap(),
                fs::read(out.join("gof.csv")).unwrap(),
            )
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let csv = String::from_utf8(runs[0].1.clone()).unwrap();
    // 2 repeats of full/all, full/A, full/B, group/A, group/B
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
}

fn sample_strategy() -> impl Strategy<Value = Vec<LongitudinalSample>> {
    let value = prop_oneof![
        -1e6f64..1e6,
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ];
    let subject = (
        prop::collection::vec(-1e4f64..1e4, 1..6),
        prop::collection::vec(value, 6),
        prop::option::of("[a-z,\"]{1,4}"),
    );
    (prop::collection::vec(subject, 1..8), any::<bool>()).prop_map(|(subjects, grouped)| {
        subjects
            .into_iter()
            .enumerate()
            .map(|(i, (times, values, group))| {
                let mut times = times;
                times.sort_by(f64::total_cmp);
                times.dedup();
                let values = values[..times.len()].to_vec();
                let group = if grouped {
                    Some(group.unwrap_or_else(|| "g".into()))
                } else {
                    None
                };
                LongitudinalSample::new(format!("s,{i}"), times, values, group).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn csv_round_trip_is_exact(samples in sample_strategy()) {
        let bytes = samples_to_csv(&samples).unwrap();
        let back = parse_csv(bytes.as_slice(), "mem", None).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            prop_assert_eq!(a.subject_id(), b.subject_id());
            prop_assert_eq!(a.group(), b.group());
            prop_assert_eq!(
                a.times().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.times().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(
                a.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
