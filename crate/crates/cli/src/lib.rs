//! Command-line workflow over `fpca-core`: ingest long-format CSV, fit,
//! predict, test group differences, compare models and simulate cohorts.
//!
//! Every command writes its results into the `--output` directory and
//! prints the resolved [`RunConfig`] to standard error.

pub mod io;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fpca_core::evaluate;
use fpca_core::inference;
use fpca_core::json::{self, format_f64};
use fpca_core::pace::{self, FpcaModel};
use fpca_core::simulate::{self, KlSpec};
use fpca_core::{Bandwidth, FitConfig, LongitudinalSample};
use serde::{Deserialize, Serialize};

use crate::io::{ingest_csv, samples_to_csv, table_to_csv, write_atomic};

#[derive(Debug, Parser)]
#[command(
    name = "fpca",
    version,
    about = "Functional PCA for sparse longitudinal data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Args)]
pub struct Options {
    /// Long-format CSV with columns id,time,value[,group].
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Directory for result files (created if missing).
    #[arg(long, global = true, default_value = "fpca-out")]
    pub output: PathBuf,
    #[arg(long, global = true, default_value_t = 51)]
    pub grid_points: usize,
    /// Fraction of variance the kept components must explain.
    #[arg(long, global = true, default_value_t = 0.95)]
    pub fve: f64,
    /// `auto` or a fixed bandwidth in time units.
    #[arg(long, global = true, default_value = "auto", value_parser = parse_bandwidth)]
    pub bandwidth_mean: Bandwidth,
    #[arg(long, global = true, default_value = "auto", value_parser = parse_bandwidth)]
    pub bandwidth_cov: Bandwidth,
    #[arg(long, global = true, default_value_t = 1000)]
    pub permutations: usize,
    #[arg(long, global = true, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, global = true, default_value_t = 100)]
    pub repeats: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Column holding group labels; `group` is used when present.
    #[arg(long, global = true)]
    pub group_col: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fit a model; writes model.json and CSV tables of its parts.
    Fit,
    /// Predict trajectories of the input subjects under a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
    },
    /// Permutation test for equal group mean functions.
    TestMean,
    /// Permutation test for equal group covariance functions.
    TestCov,
    /// Cross-validated goodness of fit, full cohort versus group models.
    Gof,
    /// Prediction error at each subject's latest observation.
    FutureAcc,
    /// Simulate a cohort from a JSON plan.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Predict { .. } => "predict",
            Command::TestMean => "test-mean",
            Command::TestCov => "test-cov",
            Command::Gof => "gof",
            Command::FutureAcc => "future-acc",
            Command::Simulate { .. } => "simulate",
        }
    }
}

fn parse_bandwidth(s: &str) -> std::result::Result<Bandwidth, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Bandwidth::Auto);
    }
    match s.parse::<f64>() {
        Ok(h) if h.is_finite() && h > 0.0 => Ok(Bandwidth::Fixed(h)),
        _ => Err(format!("expected `auto` or a positive number, got {s:?}")),
    }
}

/// Everything that determines a run's output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub model: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub grid_points: usize,
    pub fve_threshold: f64,
    pub bandwidth_mean: Bandwidth,
    pub bandwidth_cov: Bandwidth,
    pub permutations: usize,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub group_col: Option<String>,
}

impl RunConfig {
    pub fn from_cli(cli: &Cli) -> Self {
        let o = &cli.options;
        let (model, spec) = match &cli.command {
            Command::Predict { model } => (Some(model.clone()), None),
            Command::Simulate { spec } => (None, Some(spec.clone())),
            _ => (None, None),
        };
        Self {
            command: cli.command.name().to_string(),
            input: o.input.clone(),
            output: o.output.clone(),
            model,
            spec,
            grid_points: o.grid_points,
            fve_threshold: o.fve,
            bandwidth_mean: o.bandwidth_mean,
            bandwidth_cov: o.bandwidth_cov,
            permutations: o.permutations,
            folds: o.folds,
            repeats: o.repeats,
            seed: o.seed,
            group_col: o.group_col.clone(),
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            grid_points: self.grid_points,
            fve_threshold: self.fve_threshold,
            bandwidth_mean: self.bandwidth_mean,
            bandwidth_cov: self.bandwidth_cov,
            cv_seed: self.seed,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fit_config().validate()?;
        if self.permutations < 1 {
            bail!("--permutations must be at least 1");
        }
        if self.repeats < 1 {
            bail!("--repeats must be at least 1");
        }
        if self.folds < 2 {
            bail!("--folds must be at least 2");
        }
        Ok(())
    }

    fn samples(&self) -> Result<Vec<LongitudinalSample>> {
        let input = self
            .input
            .as_deref()
            .with_context(|| format!("{} needs --input", self.command))?;
        ingest_csv(input, self.group_col.as_deref())
    }

    fn grouped_samples(&self) -> Result<Vec<LongitudinalSample>> {
        let samples = self.samples()?;
        if samples.iter().all(|s| s.group().is_none()) {
            bail!("input has no group labels; need at least 2 groups");
        }
        if let Some(s) = samples.iter().find(|s| s.group().is_none()) {
            bail!("subject {} has no group label", s.subject_id());
        }
        let groups: BTreeSet<_> = samples.iter().filter_map(|s| s.group()).collect();
        if groups.len() < 2 {
            bail!(
                "input has {} group label(s); need at least 2 groups",
                groups.len()
            );
        }
        Ok(samples)
    }
}

/// One cohort of a simulation plan. Unlabeled cohorts are only allowed
/// alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPlan {
    #[serde(default)]
    pub label: Option<String>,
    pub n: usize,
    pub spec: KlSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationPlan {
    pub cohorts: Vec<CohortPlan>,
}

impl SimulationPlan {
    pub fn simulate(&self, seed: u64) -> Result<Vec<LongitudinalSample>> {
        match self.cohorts.as_slice() {
            [] => bail!("simulation plan has no cohorts"),
            [one] if one.label.is_none() => Ok(simulate::simulate_cohort(&one.spec, one.n, seed)?),
            many => {
                let specs = many
                    .iter()
                    .map(|c| {
                        let label = c
                            .label
                            .clone()
                            .context("every cohort needs a label when there are several")?;
                        Ok((c.spec.clone(), c.n, label))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(simulate::simulate_groups(&specs, seed)?)
            }
        }
    }
}

/// Parses arguments, runs the command and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let config = RunConfig::from_cli(cli);
    eprintln!(
        "fpca {} config {}",
        config.command,
        json::to_string(&config)?
    );
    config.validate()?;
    fs::create_dir_all(&config.output)
        .with_context(|| format!("cannot create {}", config.output.display()))?;
    let mut out = Outputs {
        dir: config.output.clone(),
        written: Vec::new(),
    };
    match &cli.command {
        Command::Fit => fit(&config, &mut out)?,
        Command::Predict { model } => predict(&config, model, &mut out)?,
        Command::TestMean => test_mean(&config, &mut out)?,
        Command::TestCov => test_cov(&config, &mut out)?,
        Command::Gof => gof(&config, &mut out)?,
        Command::FutureAcc => future_acc(&config, &mut out)?,
        Command::Simulate { spec } => simulate_cmd(&config, spec, &mut out)?,
    }
    Ok(out.written)
}

struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = json::to_string(value)?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }
}

fn fit(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let samples = config.samples()?;
    let model = pace::fit(&samples, &config.fit_config())?;
    eprintln!("fitted K = {} (fve {:.4})", model.k, model.fve[model.k - 1]);
    out.json("model.json", &model)?;

    let grid = model.grid.points();
    let mean: Vec<Vec<String>> = grid
        .iter()
        .zip(&model.mean)
        .map(|(t, m)| vec![format_f64(*t), format_f64(*m)])
        .collect();
    out.put("mean.csv", &table_to_csv(&["time", "mean"], &mean)?)?;

    let phi_names: Vec<String> = (1..=model.k).map(|k| format!("phi{k}")).collect();
    let mut header = vec!["time"];
    header.extend(phi_names.iter().map(String::as_str));
    let phi: Vec<Vec<String>> = (0..grid.len())
        .map(|j| {
            std::iter::once(format_f64(grid[j]))
                .chain(model.eigenfunctions.iter().map(|f| format_f64(f[j])))
                .collect()
        })
        .collect();
    out.put("eigenfunctions.csv", &table_to_csv(&header, &phi)?)?;

    let xi_names: Vec<String> = (1..=model.k).map(|k| format!("xi{k}")).collect();
    let mut header = vec!["id", "group"];
    header.extend(xi_names.iter().map(String::as_str));
    let scores: Vec<Vec<String>> = model
        .subjects
        .iter()
        .map(|s| {
            [s.subject_id.clone(), s.group.clone().unwrap_or_default()]
                .into_iter()
                .chain(s.scores.iter().map(|x| format_f64(*x)))
                .collect()
        })
        .collect();
    out.put("scores.csv", &table_to_csv(&header, &scores)?)?;

    let fve: Vec<Vec<String>> = (0..model.k)
        .map(|k| {
            vec![
                (k + 1).to_string(),
                format_f64(model.eigenvalues[k]),
                format_f64(model.fve[k]),
            ]
        })
        .collect();
    out.put("fve.csv", &table_to_csv(&["k", "eigenvalue", "fve"], &fve)?)
}

fn predict(config: &RunConfig, model_path: &Path, out: &mut Outputs) -> Result<()> {
    let text = fs::read_to_string(model_path)
        .with_context(|| format!("cannot read {}", model_path.display()))?;
    let model = FpcaModel::from_json(&text)
        .with_context(|| format!("{} is not a model file", model_path.display()))?;
    let samples = config.samples()?;
    let mut rows = Vec::new();
    for s in &samples {
        let curve = pace::predict_trajectory(&model, s)
            .with_context(|| format!("subject {}", s.subject_id()))?;
        for (t, y) in model.grid.points().iter().zip(curve) {
            rows.push(vec![
                s.subject_id().to_string(),
                format_f64(*t),
                format_f64(y),
            ]);
        }
    }
    out.put(
        "predictions.csv",
        &table_to_csv(&["id", "time", "value"], &rows)?,
    )
}

fn full_model_curves(config: &RunConfig) -> Result<(FpcaModel, fpca_core::CurveMatrix)> {
    let samples = config.grouped_samples()?;
    let model = pace::fit(&samples, &config.fit_config())?;
    let curves = model.fitted_curves()?;
    Ok((model, curves))
}

fn test_mean(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (_, curves) = full_model_curves(config)?;
    let result = inference::mean_permutation_test(&curves, config.permutations, config.seed)?;
    eprintln!("global p = {}", result.p_global);
    out.json("test_mean.json", &result)
}

fn test_cov(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (model, curves) = full_model_curves(config)?;
    let standardized = inference::standardize_trajectories(&curves, &model)?;
    let result =
        inference::covariance_permutation_test(&standardized, config.permutations, config.seed)?;
    eprintln!("global p = {}", result.p_global);
    out.json("test_cov.json", &result)
}

fn gof(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let samples = config.grouped_samples()?;
    let result = evaluate::gof_compare(
        &samples,
        config.repeats,
        config.folds,
        config.seed,
        &config.fit_config(),
    )?;
    out.json("gof.json", &result)?;
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                r.repeat.to_string(),
                r.model_scope.clone(),
                r.eval_group.clone(),
                format_f64(r.root_macse),
            ]
        })
        .collect();
    out.put(
        "gof.csv",
        &table_to_csv(
            &["repeat", "model_scope", "eval_group", "root_macse"],
            &rows,
        )?,
    )
}

fn future_acc(config: &RunConfig, out: &mut Outputs) -> Result<()> {
    let samples = config.samples()?;
    let result = evaluate::future_prediction_rmse(&samples, &config.fit_config())?;
    if result.excluded > 0 {
        eprintln!(
            "excluded {} subject(s) with a single observation",
            result.excluded
        );
    }
    out.json("future_acc.json", &result)?;
    let rows: Vec<Vec<String>> = result
        .cells
        .iter()
        .map(|c| {
            vec![
                c.model_scope.clone(),
                c.eval_group.clone(),
                format_f64(c.root_mse),
            ]
        })
        .collect();
    out.put(
        "future_acc.csv",
        &table_to_csv(&["model_scope", "eval_group", "root_mse"], &rows)?,
    )
}

fn simulate_cmd(config: &RunConfig, spec: &Path, out: &mut Outputs) -> Result<()> {
    let text =
        fs::read_to_string(spec).with_context(|| format!("cannot read {}", spec.display()))?;
    let plan: SimulationPlan = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a simulation plan", spec.display()))?;
    let samples = plan.simulate(config.seed)?;
    out.put("cohort.csv", &samples_to_csv(&samples)?)
}
