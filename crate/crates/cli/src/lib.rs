//! `normgp`: fit, score, evaluate, sweep and synthesize from the command line.
//!
//! Exit codes: 0 success, 1 I/O and other failures, 2 bad input (parse,
//! schema, structure, contract, version or integrity errors), 3 numerical
//! failures (conditioning, fit, negative variance).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use normative_gp::io::{load_cohort, load_model, load_scores, save_cohort, save_model, save_scores, write_atomic, Cohort, CohortSchema};
use normative_gp::metrics::cross_validated_quality;
use normative_gp::preprocess::{PreprocessConfig, DEFAULT_PCA_COMPONENTS};
use normative_gp::stats::{evaluate, ly_sweep, DEFAULT_LY_GRID, METRICS};
use normative_gp::synth::{generate_cohort, DeviationMode, SynthConfig, DEFAULT_TRAJECTORY_SEED};
use normative_gp::{AgeKernel, AgeNormalization, Error, FitConfig, KernelForm, Model, ModelConfig};
use serde::Serialize;
use serde_json::json;

pub const THREADS_ENV: &str = "NORMATIVE_GP_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "normgp", version, about = "Gaussian process normative modeling of brain age")]
pub struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Train a model on a healthy cohort and report cross-validated MAE / R².
    Fit(FitArgs),
    /// Score a cohort against a trained model.
    Score(ScoreArgs),
    /// Compare two diagnosis groups on the scores (AUC, rank-sum, correlations).
    Evaluate(EvaluateArgs),
    /// AUC of the age-weighted variance over a grid of age length scales.
    Sweep(SweepArgs),
    /// Write a synthetic cohort with a known deviation pattern.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct SchemaArgs {
    #[arg(long, default_value = "id")]
    pub id_col: String,
    #[arg(long, default_value = "age")]
    pub age_col: String,
    #[arg(long, default_value = "sex")]
    pub sex_col: String,
    #[arg(long, default_value = "dx")]
    pub dx_col: String,
    /// Comma-separated feature columns; default is every other numeric column.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
}

impl SchemaArgs {
    fn schema(&self) -> CohortSchema {
        CohortSchema {
            id: self.id_col.clone(),
            age: self.age_col.clone(),
            sex: self.sex_col.clone(),
            diagnosis: self.dx_col.clone(),
            features: self.features.clone(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit report (JSON); defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Keep this many principal components (50 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "50")]
    pub pca: Option<usize>,
    /// Standardize features on the training set (before PCA).
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value = "sum")]
    pub kernel: KernelForm,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cross-validation folds for the quality report; 0 skips it.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Target mapping: none, center or standardize.
    #[arg(long, default_value = "none")]
    pub normalize_age: AgeNormalization,
    /// Train only on rows with this diagnosis label.
    #[arg(long)]
    pub healthy_label: Option<String>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

fn parse_length_scale(s: &str) -> Result<f64, String> {
    let v: f64 = match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" => f64::INFINITY,
        other => other.parse().map_err(|_| format!("{s:?} is not a number or inf"))?,
    };
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("age length scale must be > 0, got {s}"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Age length scale l_y in years, or `inf` for the unweighted limit.
    #[arg(long, default_value = "inf", value_parser = parse_length_scale)]
    pub age_length_scale: f64,
    /// Age noise variance sigma_y^2.
    #[arg(long, default_value_t = 0.0)]
    pub age_noise: f64,
    /// Scores CSV to write; run metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Reference group, then comparison group.
    #[arg(long, value_delimiter = ',', default_value = "HC,DX")]
    pub groups: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "epsilon,cov,cov_w")]
    pub metrics: Vec<String>,
    /// Rank subjects by |epsilon| instead of signed epsilon.
    #[arg(long)]
    pub abs_epsilon: bool,
    /// Report JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated age length scales (`inf` allowed).
    #[arg(long, value_delimiter = ',', value_parser = parse_length_scale)]
    pub ly_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.0)]
    pub age_noise: f64,
    #[arg(long, value_delimiter = ',', default_value = "HC,DX")]
    pub groups: Vec<String>,
    /// Sweep table CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value = "none")]
    pub mode: DeviationMode,
    #[arg(long, default_value_t = 500)]
    pub n_healthy: usize,
    #[arg(long, default_value_t = 0)]
    pub n_diseased: usize,
    #[arg(long, default_value_t = 6)]
    pub n_features: usize,
    /// Displacement of diseased subjects, in units of the feature noise std.
    #[arg(long, default_value_t = 4.0)]
    pub magnitude: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 20.0)]
    pub age_min: f64,
    #[arg(long, default_value_t = 90.0)]
    pub age_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRAJECTORY_SEED)]
    pub trajectory_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error chain to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(
            Error::Parse { .. }
            | Error::Structure(_)
            | Error::Schema(_)
            | Error::Contract(_)
            | Error::ConstantColumn { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Integrity(_)
            | Error::RankDeficient(_),
        ) => 2,
        Some(Error::Conditioning { .. } | Error::NumericalFailure(_) | Error::Fit(_)) => 3,
        Some(Error::Io { .. }) | None => 1,
    }
}

/// Caps the rayon pool from `NORMATIVE_GP_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{THREADS_ENV}={v:?} is not a thread count"))?;
        // a pool may already exist when embedded; keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn log(verbose: bool, msg: impl AsRef<str>) {
    if verbose {
        eprintln!("normgp: {}", msg.as_ref());
    }
}

fn group_pair(groups: &[String]) -> anyhow::Result<(&str, &str)> {
    match groups {
        [neg, pos] => Ok((neg, pos)),
        _ => Err(Error::Contract(format!("--groups takes exactly two labels, got {}", groups.len())).into()),
    }
}

fn load(path: &Path, schema: &SchemaArgs) -> anyhow::Result<Cohort> {
    load_cohort(path, &schema.schema()).with_context(|| format!("loading cohort {}", path.display()))
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let v = cli.verbose;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, cli, v),
        Command::Score(a) => cmd_score(a, cli, v),
        Command::Evaluate(a) => cmd_evaluate(a, cli),
        Command::Sweep(a) => cmd_sweep(a, cli, v),
        Command::Synth(a) => cmd_synth(a, v),
    }
}

/// Tab-separated MAE / R² summary for one feature set.
pub fn quality_table(label: &str, mae: f64, r2: f64) -> String {
    format!("features\tMAE\tR2\n{label}\t{mae:.2}\t{r2:.2}\n")
}

fn cmd_fit(a: &FitArgs, cli: &Cli, v: bool) -> anyhow::Result<()> {
    let mut cohort = load(&a.train, &a.schema)?;
    if let Some(label) = &a.healthy_label {
        let rows = cohort.rows_with_diagnosis(label);
        if rows.is_empty() {
            return Err(Error::Schema(format!("no training rows with diagnosis {label:?}")).into());
        }
        cohort = cohort.select(&rows);
    }
    let config = ModelConfig {
        preprocess: PreprocessConfig {
            standardize: a.standardize,
            pca_components: a.pca,
        },
        fit: FitConfig {
            form: a.kernel,
            restarts: a.restarts,
            seed: a.seed,
            age_normalization: a.normalize_age,
            ..FitConfig::default()
        },
    };
    log(v, format!("fitting {} subjects x {} features", cohort.len(), cohort.feature_names.len()));
    let model = Model::train(&cohort, &config)?;
    save_model(&model.to_artifact(), &a.out)?;
    log(v, format!("wrote {}", a.out.display()));

    let quality = if a.folds > 0 {
        log(v, format!("{}-fold cross-validation", a.folds));
        Some(cross_validated_quality(&cohort.features, &cohort.feature_names, &cohort.age, a.folds, &config)?)
    } else {
        None
    };
    let params = model.gp.params();
    let report = json!({
        "config": cli,
        "model_config": config,
        "n_subjects": cohort.len(),
        "n_features": cohort.feature_names.len(),
        "pca_default_components": DEFAULT_PCA_COMPONENTS,
        "fit": {
            "log_marginal_likelihood": model.gp.log_marginal_likelihood(),
            "length_scales": params.length_scales,
            "noise_variance": params.noise_variance,
            "jitter": model.gp.factor().jitter(),
            "trace": model.gp.trace(),
        },
        "quality": quality,
    });
    let report_path = a.report.clone().unwrap_or_else(|| sidecar(&a.out, ".report.json"));
    write_json(&report_path, &report)?;
    if let Some(q) = &quality {
        let label = a.train.file_stem().and_then(|s| s.to_str()).unwrap_or("all");
        print!("{}", quality_table(label, q.mae, q.r2));
    }
    Ok(())
}

fn cmd_score(a: &ScoreArgs, cli: &Cli, v: bool) -> anyhow::Result<()> {
    let artifact = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let model = Model::from_artifact(&artifact)?;
    let cohort = load(&a.test, &a.schema)?;
    let age = AgeKernel::new(a.age_length_scale, a.age_noise)?;
    log(v, format!("scoring {} subjects", cohort.len()));
    let scores = model.score(&cohort, &age)?;
    if scores.cov_score.iter().chain(&scores.cov_w_score).any(|c| *c < 0.0) {
        return Err(Error::NumericalFailure("negative variance in scores".into()).into());
    }
    save_scores(&scores.to_table(&cohort)?, &a.out)?;
    let meta = json!({
        "config": cli,
        "n_subjects": cohort.len(),
        "age_length_scale": if a.age_length_scale.is_infinite() { json!("inf") } else { json!(a.age_length_scale) },
        "age_noise": a.age_noise,
        "model_kernel_form": artifact.kernel_form,
    });
    write_json(&sidecar(&a.out, ".meta.json"), &meta)?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, cli: &Cli) -> anyhow::Result<()> {
    let table = load_scores(&a.scores).with_context(|| format!("loading scores {}", a.scores.display()))?;
    let metrics: Vec<&str> = a.metrics.iter().map(String::as_str).collect();
    if let Some(bad) = metrics.iter().find(|m| !METRICS.contains(m)) {
        return Err(Error::Contract(format!("unknown metric {bad:?} (expected epsilon, cov or cov_w)")).into());
    }
    let (neg, pos) = group_pair(&a.groups)?;
    let report = evaluate(&table, neg, pos, &metrics, a.abs_epsilon)?;
    write_json(&a.out, &json!({ "config": cli, "report": report }))?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, cli: &Cli, v: bool) -> anyhow::Result<()> {
    let model = Model::from_artifact(&load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?)?;
    let cohort = load(&a.test, &a.schema)?;
    let grid = a.ly_grid.clone().unwrap_or_else(|| DEFAULT_LY_GRID.to_vec());
    log(v, format!("sweeping {} age length scales", grid.len()));
    let (neg, pos) = group_pair(&a.groups)?;
    let table = ly_sweep(&model, &cohort, &grid, a.age_noise, neg, pos)?;
    write_atomic(&a.out, table.to_csv().as_bytes())?;
    write_json(&sidecar(&a.out, ".meta.json"), &json!({ "config": cli, "best_index": table.best_index }))?;
    let best = table.best();
    println!("best age_length_scale={} auc={:.4}", best.age_length_scale, best.auc);
    Ok(())
}

fn cmd_synth(a: &SynthArgs, v: bool) -> anyhow::Result<()> {
    let config = SynthConfig {
        n_healthy: a.n_healthy,
        n_diseased: a.n_diseased,
        n_features: a.n_features,
        age_range: (a.age_min, a.age_max),
        deviation_mode: a.mode,
        deviation_magnitude: a.magnitude,
        noise_std: a.noise_std,
        seed: a.seed,
        trajectory_seed: a.trajectory_seed,
    };
    let synth = generate_cohort(&config)?;
    save_cohort(&synth.cohort, &a.out)?;
    log(v, format!("wrote {} subjects to {}", synth.cohort.len(), a.out.display()));
    Ok(())
}
