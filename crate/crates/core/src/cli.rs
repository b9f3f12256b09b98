//! Command-line front end and the end-to-end pipeline.
//!
//! Every command writes fixed file names under `--out` plus a
//! `manifest.json` holding SHA-256 hashes of what was written. Only the
//! manifest carries a timestamp; all other outputs are byte-identical for
//! identical inputs, flags and seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{BcmParams, EgoNetwork, ValueDimension, DEFAULT_MU};
use crate::dynamics::{converged, pair_update, simulate, GroupScheme, InteractionMode};
use crate::error::{Error, Result};
use crate::io::{self, GroundTruth, PlotInput, PlotKind, SigmaDistribution, SynthSpec, TrajectoryFormat};
use crate::labeling::{build_dataset, split_dataset, SigmaDataset, SplitFractions, Splits, DEFAULT_DELTA};
use crate::pso::{default_space, tune_regressor, HistoryEntry, PsoConfig, SearchSpace};
use crate::regress::{dataset_mse, fit_sigma_model, Family, FittedModel, RegressorSpec};

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SIMULATION_SUMMARY_FILE: &str = "simulation_summary.csv";
pub const DATASET_FILE: &str = "dataset.csv";
pub const BEST_SPEC_FILE: &str = "best_spec.json";
pub const TUNING_FILE: &str = "tuning.json";
pub const HISTORY_FILE: &str = "pso_history.csv";
pub const MODEL_FILE: &str = "model.json";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLOT_HYPERPARAMS_FILE: &str = "plot_hyperparam_variation.csv";
pub const PLOT_LOSS_FILE: &str = "plot_model_loss.csv";
pub const PLOT_ACTUAL_FILE: &str = "plot_actual_vs_predicted.csv";

/// Tolerance used when scoring forecasts against held-out values.
pub const FORECAST_TOLERANCE: f64 = 0.02;

/// Default cap on training tuples per fit.
pub const DEFAULT_MAX_TRAIN: usize = 1000;

/// Everything a run needs; absent JSON fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub mu: f64,
    pub delta: f64,
    pub split: SplitFractions,
    pub pso: PsoConfig,
    /// Search space per family name; families without an entry use the default.
    pub spaces: BTreeMap<String, SearchSpace>,
    pub seed: u64,
    pub mode: InteractionMode,
    pub scheme: GroupScheme,
    /// Families tuned and compared by the pipeline.
    pub families: Vec<Family>,
    /// Family whose tuned model produces forecasts.
    pub forecast_family: Family,
    /// Training tuples per fit, subsampled deterministically; `None` uses all.
    pub max_train: Option<usize>,
    pub interpolate: bool,
    /// Withhold each network's last segment and score forecasts against it.
    pub holdout_last: bool,
    /// Used by the pipeline when no input files are given.
    pub synth: Option<SynthSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: Vec::new(),
            out: PathBuf::from("out"),
            mu: DEFAULT_MU,
            delta: DEFAULT_DELTA,
            split: SplitFractions::default(),
            pso: PsoConfig::default(),
            spaces: BTreeMap::new(),
            seed: 0,
            mode: InteractionMode::default(),
            scheme: GroupScheme::default(),
            families: Family::ALL.to_vec(),
            forecast_family: Family::Svr,
            max_train: Some(DEFAULT_MAX_TRAIN),
            interpolate: false,
            holdout_last: false,
            synth: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        BcmParams::new(self.mu, 0.0)?;
        if !(self.delta > 0.0) {
            return Err(Error::param(format!("delta must be > 0, got {}", self.delta)));
        }
        self.split.validate()?;
        self.pso.validate()?;
        for (name, space) in &self.spaces {
            name.parse::<Family>()?;
            space.validate()?;
        }
        if self.families.is_empty() {
            return Err(Error::param("at least one family must be tuned"));
        }
        if self.max_train == Some(0) {
            return Err(Error::param("max_train must be at least 1"));
        }
        for p in &self.inputs {
            if !p.exists() {
                return Err(Error::data(format!("input {} does not exist", p.display())));
            }
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn space_for(&self, family: Family) -> SearchSpace {
        self.spaces
            .iter()
            .find(|(k, _)| k.parse::<Family>().ok() == Some(family))
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| default_space(family))
    }

    /// PSO settings with the run seed.
    pub fn pso_config(&self) -> PsoConfig {
        PsoConfig {
            seed: self.seed,
            ..self.pso.clone()
        }
    }
}

/// Next-segment forecast of one ego score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub ego_id: String,
    pub dimension: ValueDimension,
    /// Segment being forecast.
    pub segment: u32,
    pub current: f64,
    pub predicted: f64,
    pub actual: Option<f64>,
}

/// Forecast the ego's scores one segment past the end of `net`.
///
/// For each alter and dimension the threshold is predicted from the last
/// observed transition; the ego's latest score then meets each alter's
/// latest score in alter order under that threshold.
pub fn forecast_network(net: &EgoNetwork, model: &FittedModel, mu: f64) -> Result<Vec<Forecast>> {
    if net.num_segments() < 2 {
        return Err(Error::data(format!(
            "ego {}: forecasting needs at least 2 segments, got {}",
            net.ego_id(),
            net.num_segments()
        )));
    }
    BcmParams::new(mu, 0.0)?;
    let last = net.last_segment();
    let ego_prev = net.profile(0, last - 1).unwrap();
    let ego_now = net.profile(0, last).unwrap();
    let mut out = Vec::with_capacity(ValueDimension::COUNT);
    for dim in ValueDimension::ALL {
        let mut v = ego_now.get(dim);
        for k in 1..=net.num_alters() {
            let alter_prev = net.profile(k, last - 1).unwrap().get(dim);
            let sigma = model.predict(&[ego_prev.get(dim), alter_prev, ego_now.get(dim), mu])?;
            v = pair_update(v, net.profile(k, last).unwrap().get(dim), mu, sigma.clamp(0.0, 1.0));
        }
        out.push(Forecast {
            ego_id: net.ego_id().to_string(),
            dimension: dim,
            segment: last + 1,
            current: ego_now.get(dim),
            predicted: v,
            actual: None,
        });
    }
    Ok(out)
}

/// Forecasts for every network with at least two segments (three when
/// holding out the last one). Returns the forecasts and skip warnings.
pub fn forecast_all(
    networks: &[EgoNetwork],
    model: &FittedModel,
    mu: f64,
    holdout_last: bool,
) -> Result<(Vec<Forecast>, Vec<String>)> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let need = if holdout_last { 3 } else { 2 };
    for net in networks {
        if net.num_segments() < need {
            warnings.push(format!("ego {}: too few segments to forecast; skipped", net.ego_id()));
            continue;
        }
        if holdout_last {
            let observed = net.truncated(net.last_segment() - 1)?;
            let truth = net.profile(0, net.last_segment()).unwrap();
            for mut f in forecast_network(&observed, model, mu)? {
                f.actual = Some(truth.get(f.dimension));
                out.push(f);
            }
        } else {
            out.extend(forecast_network(net, model, mu)?);
        }
    }
    Ok((out, warnings))
}

pub fn forecast_csv(forecasts: &[Forecast]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ego_id", "dimension", "segment", "current", "predicted", "actual"])?;
    for f in forecasts {
        w.write_record([
            f.ego_id.clone(),
            f.dimension.as_str().to_string(),
            f.segment.to_string(),
            f.current.to_string(),
            f.predicted.to_string(),
            f.actual.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(body).map_err(|e| Error::data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub pairs: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub within_tolerance: usize,
    pub fraction_within: f64,
}

/// Error statistics over forecasts that carry an actual value.
pub fn summarize_forecasts(forecasts: &[Forecast], tolerance: f64) -> Option<ForecastSummary> {
    let errs: Vec<f64> = forecasts
        .iter()
        .filter_map(|f| f.actual.map(|a| (f.predicted - a).abs()))
        .collect();
    if errs.is_empty() {
        return None;
    }
    let within = errs.iter().filter(|&&e| e <= tolerance).count();
    Some(ForecastSummary {
        pairs: errs.len(),
        mean_abs_error: errs.iter().sum::<f64>() / errs.len() as f64,
        max_abs_error: errs.iter().copied().fold(0.0, f64::max),
        tolerance,
        within_tolerance: within,
        fraction_within: within as f64 / errs.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_tuples: usize,
    pub validation_tuples: usize,
    pub test_tuples: usize,
    pub train_egos: usize,
    pub validation_egos: usize,
    pub test_egos: usize,
}

impl SplitSizes {
    fn of(s: &Splits) -> Self {
        SplitSizes {
            train_tuples: s.train.len(),
            validation_tuples: s.validation.len(),
            test_tuples: s.test.len(),
            train_egos: s.train.ego_ids().len(),
            validation_egos: s.validation.ego_ids().len(),
            test_egos: s.test.ego_ids().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: Family,
    pub spec: RegressorSpec,
    pub validation_mse: f64,
    pub test_mse: f64,
    pub failed_evaluations: usize,
}

/// Deterministic summary of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub format_version: u32,
    pub seed: u64,
    pub mu: f64,
    pub delta: f64,
    pub networks: usize,
    pub tuples: usize,
    pub split: SplitSizes,
    pub families: Vec<FamilyResult>,
    pub forecast_family: Family,
    pub test_mse: f64,
    pub forecast: Option<ForecastSummary>,
    pub warnings: Vec<String>,
}

/// Tuning output per family, as written to `tuning.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub family: Family,
    pub space: SearchSpace,
    pub spec: RegressorSpec,
    pub validation_mse: f64,
    pub initial_best_fitness: f64,
    pub history: Vec<HistoryEntry>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub metrics: PipelineMetrics,
    pub dataset: SigmaDataset,
    pub splits: Splits,
    pub tuning: Vec<TuningRecord>,
    pub model: FittedModel,
    pub forecasts: Vec<Forecast>,
    /// File name and contents, in write order; excludes the manifest.
    pub artifacts: Vec<(String, String)>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// label, split, tune, fit, evaluate, forecast.
///
/// Artifacts produced before a failure are returned inside the error path's
/// caller via `partial`.
pub fn run_pipeline(
    cfg: &RunConfig,
    networks: &[EgoNetwork],
    partial: &mut Vec<(String, String)>,
) -> Result<PipelineOutput> {
    if networks.is_empty() {
        return Err(Error::data("no networks loaded"));
    }
    let mut warnings = Vec::new();
    let training_nets: Vec<EgoNetwork> = if cfg.holdout_last {
        networks
            .iter()
            .filter(|n| n.num_segments() >= 3)
            .map(|n| n.truncated(n.last_segment() - 1))
            .collect::<Result<_>>()?
    } else {
        networks.to_vec()
    };

    let dataset = stage("label", build_dataset(&training_nets, cfg.mu, cfg.delta))?;
    warnings.extend(dataset.provenance.warnings.iter().cloned());
    if dataset.is_empty() {
        return Err(Error::data("label: no tuples could be built (every network has fewer than 2 segments)"));
    }
    partial.push((DATASET_FILE.into(), io::dataset_csv(&dataset)?));

    let splits = stage("split", split_dataset(&dataset, cfg.split, cfg.seed))?;
    if splits.validation.is_empty() {
        return Err(Error::param("split: tuning needs a non-empty validation split"));
    }

    let mut tuning = Vec::new();
    let mut families = Vec::new();
    let mut forecast_model = None;
    let mut chosen: Vec<Family> = cfg.families.clone();
    if !chosen.contains(&cfg.forecast_family) {
        chosen.push(cfg.forecast_family);
    }
    for family in chosen {
        let space = cfg.space_for(family);
        let tuned = stage(
            &format!("tune {family}"),
            tune_regressor(&splits.train, &splits.validation, family, &space, &cfg.pso_config(), cfg.max_train),
        )?;
        let model = stage(
            &format!("fit {family}"),
            fit_sigma_model(&splits.train, &tuned.spec, cfg.max_train, cfg.seed),
        )?;
        let test_mse = if splits.test.is_empty() {
            f64::NAN
        } else {
            stage("evaluate", dataset_mse(&model, &splits.test))?
        };
        families.push(FamilyResult {
            family,
            spec: tuned.spec.clone(),
            validation_mse: tuned.validation_mse,
            test_mse,
            failed_evaluations: tuned.search.diagnostics.len(),
        });
        tuning.push(TuningRecord {
            family,
            space,
            spec: tuned.spec,
            validation_mse: tuned.validation_mse,
            initial_best_fitness: tuned.search.initial_best_fitness,
            history: tuned.search.history,
            diagnostics: tuned.search.diagnostics,
        });
        if family == cfg.forecast_family {
            forecast_model = Some(model);
        }
    }
    let model = forecast_model.expect("forecast family is always tuned");
    let main = tuning.iter().find(|t| t.family == cfg.forecast_family).unwrap();
    partial.push((BEST_SPEC_FILE.into(), serde_json::to_string_pretty(&main.spec)? + "\n"));
    partial.push((TUNING_FILE.into(), serde_json::to_string_pretty(&tuning)? + "\n"));
    partial.push((HISTORY_FILE.into(), history_csv(&main.history)?));
    partial.push((MODEL_FILE.into(), io::model_json(&model)?));

    let (forecasts, skipped) = stage("forecast", forecast_all(networks, &model, cfg.mu, cfg.holdout_last))?;
    warnings.extend(skipped);
    partial.push((FORECAST_FILE.into(), forecast_csv(&forecasts)?));

    let test_mse = families
        .iter()
        .find(|f| f.family == cfg.forecast_family)
        .map(|f| f.test_mse)
        .unwrap();
    let metrics = PipelineMetrics {
        format_version: io::FORMAT_VERSION,
        seed: cfg.seed,
        mu: cfg.mu,
        delta: cfg.delta,
        networks: networks.len(),
        tuples: dataset.len(),
        split: SplitSizes::of(&splits),
        families,
        forecast_family: cfg.forecast_family,
        test_mse,
        forecast: summarize_forecasts(&forecasts, FORECAST_TOLERANCE),
        warnings,
    };
    partial.push((METRICS_FILE.into(), serde_json::to_string_pretty(&metrics)? + "\n"));

    if !main.history.is_empty() {
        let t = io::emit_plot_data(&PlotInput::HyperparamVariation {
            space: &main.space,
            history: &main.history,
        })?;
        partial.push((PLOT_HYPERPARAMS_FILE.into(), t));
    }
    let losses: Vec<(String, f64)> = metrics
        .families
        .iter()
        .map(|f| (f.family.to_string(), f.test_mse))
        .collect();
    partial.push((PLOT_LOSS_FILE.into(), io::emit_plot_data(&PlotInput::ModelLoss { losses: &losses })?));
    if !splits.test.is_empty() {
        partial.push((PLOT_ACTUAL_FILE.into(), actual_vs_predicted(&model, &splits.test)?));
    }

    Ok(PipelineOutput {
        metrics,
        dataset,
        splits,
        tuning,
        model,
        forecasts,
        artifacts: partial.clone(),
    })
}

fn history_csv(history: &[HistoryEntry]) -> Result<String> {
    let mut buf = Vec::new();
    crate::pso::write_history_csv(history, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::data(e.to_string()))
}

fn actual_vs_predicted(model: &FittedModel, d: &SigmaDataset) -> Result<String> {
    let actual: Vec<f64> = d.tuples.iter().map(|t| t.sigma_label).collect();
    let predicted = d
        .tuples
        .iter()
        .map(|t| model.predict(&t.features()))
        .collect::<Result<Vec<_>>>()?;
    io::emit_plot_data(&PlotInput::ActualVsPredicted {
        actual: &actual,
        predicted: &predicted,
    })
}

#[derive(Debug, Parser)]
#[command(name = "valueshift", version, about = "Bounded-confidence value dynamics and threshold learning")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Convergence factor.
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    /// Label margin added to the observed gap.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic trajectories with known thresholds.
    Synth(SynthArgs),
    /// Run the dynamics forward from each network's first segment.
    Simulate(SimulateArgs),
    /// Build the labelled threshold dataset.
    Label(InputArgs),
    /// Tune one regressor family with particle swarm search.
    Tune(TuneArgs),
    /// Fit a regressor on the training split.
    Fit(FitArgs),
    /// Forecast each ego's next-segment scores.
    Forecast(ForecastArgs),
    /// Score a model on a dataset split.
    Evaluate(EvaluateArgs),
    /// Write plotting tables.
    PlotData(PlotArgs),
    /// Label, tune, fit, evaluate and forecast in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Default)]
pub struct InputArgs {
    /// Trajectory files (.csv or .json).
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Fill interior segment gaps by linear interpolation.
    #[arg(long)]
    pub interpolate: bool,
}

#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub networks: Option<usize>,
    #[arg(long)]
    pub alters: Option<usize>,
    #[arg(long)]
    pub segments: Option<usize>,
    /// Fixed threshold for every network.
    #[arg(long, conflicts_with_all = ["sigma_lo", "sigma_hi"])]
    pub sigma: Option<f64>,
    #[arg(long, requires = "sigma_hi")]
    pub sigma_lo: Option<f64>,
    #[arg(long, requires = "sigma_lo")]
    pub sigma_hi: Option<f64>,
    /// Standard deviation of additive observation noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub scheme: Option<String>,
    /// Spread below which a group counts as converged.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub max_train: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "svr")]
    pub family: String,
    /// Search space JSON; defaults to the built-in space of the family.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Regressor spec JSON, e.g. the `best_spec.json` written by `tune`.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub max_train: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub holdout_last: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// train, validation, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// hyperparam-variation, model-loss or actual-vs-predicted.
    #[arg(long)]
    pub kind: String,
    /// `tuning.json` (hyperparam-variation).
    #[arg(long)]
    pub tuning: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    /// `metrics.json` (model-loss).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Dataset and model (actual-vs-predicted); scored on the test split.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Generate a synthetic corpus instead of reading input files.
    #[arg(long)]
    pub synth: bool,
    #[command(flatten)]
    pub synth_args: SynthArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Comma-separated families to tune.
    #[arg(long, value_delimiter = ',')]
    pub families: Vec<String>,
    #[arg(long)]
    pub forecast_family: Option<String>,
    #[arg(long)]
    pub holdout_last: bool,
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    file: String,
    sha256: String,
    bytes: usize,
    partial: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    created_utc: String,
    status: &'static str,
    error: Option<String>,
    seed: u64,
    config: &'a RunConfig,
    artifacts: Vec<ArtifactEntry>,
}

/// Collects output files and writes the manifest last.
struct Outputs {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: String) -> Result<()> {
        fs::write(self.dir.join(name), &contents)?;
        self.written.push((name.to_string(), contents));
        Ok(())
    }

    fn finish(&self, command: &str, cfg: &RunConfig, error: Option<&Error>) -> Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            created_utc: timestamp(),
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.map(ToString::to_string),
            seed: cfg.seed,
            config: cfg,
            artifacts: self
                .written
                .iter()
                .map(|(name, body)| ArtifactEntry {
                    file: name.clone(),
                    sha256: hex::encode(Sha256::digest(body.as_bytes())),
                    bytes: body.len(),
                    partial: error.is_some(),
                })
                .collect(),
        };
        fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .map(|t| t.to_rfc3339())
        .unwrap_or_default()
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) => 1,
        Error::Numerical(_) => 3,
        Error::InvalidData(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
    }
}

fn load_networks(inputs: &[PathBuf], interpolate: bool) -> Result<Vec<EgoNetwork>> {
    if inputs.is_empty() {
        return Err(Error::param("no --input given"));
    }
    let mut nets = Vec::new();
    for p in inputs {
        let loaded = io::load_trajectories(p, TrajectoryFormat::from_path(p), interpolate)
            .map_err(|e| e.in_stage(&format!("load {}", p.display())))?;
        nets.extend(loaded);
    }
    if nets.is_empty() {
        return Err(Error::data("no networks loaded"));
    }
    let mut ids: Vec<&str> = nets.iter().map(|n| n.ego_id()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::data(format!("ego {} appears in more than one input", w[0])));
    }
    Ok(nets)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<SigmaDataset> {
    let d = io::parse_dataset_csv(&read(path)?)?;
    if d.is_empty() {
        return Err(Error::data(format!("{} holds no tuples", path.display())));
    }
    Ok(d)
}

fn load_model(path: &Path) -> Result<FittedModel> {
    io::parse_model_json(&read(path)?)
}

fn synth_spec(base: Option<&SynthSpec>, args: &SynthArgs, seed: u64) -> Result<SynthSpec> {
    let mut s = base.cloned().unwrap_or_default();
    if let Some(v) = args.networks {
        s.num_networks = v;
    }
    if let Some(v) = args.alters {
        s.alters_per_network = v;
    }
    if let Some(v) = args.segments {
        s.num_segments = v;
    }
    if let Some(v) = args.sigma {
        s.sigma = SigmaDistribution::Fixed { value: v };
    }
    if let (Some(lo), Some(hi)) = (args.sigma_lo, args.sigma_hi) {
        s.sigma = SigmaDistribution::Uniform { lo, hi };
    }
    if let Some(v) = args.noise {
        s.noise_sd = v;
    }
    if let Some(m) = &args.mode {
        s.mode = m.parse()?;
    }
    if let Some(m) = &args.scheme {
        s.scheme = m.parse()?;
    }
    s.seed = seed;
    s.validate()?;
    Ok(s)
}

fn apply_search(cfg: &mut RunConfig, s: &SearchArgs) {
    if let Some(p) = s.particles {
        cfg.pso.num_particles = p;
    }
    if let Some(g) = s.generations {
        cfg.pso.num_generations = g;
    }
    if let Some(m) = s.max_train {
        cfg.max_train = Some(m);
    }
}

fn select_split(d: &SigmaDataset, cfg: &RunConfig, which: &str) -> Result<SigmaDataset> {
    if which == "all" {
        return Ok(d.clone());
    }
    let s = split_dataset(d, cfg.split, cfg.seed)?;
    match which {
        "train" => Ok(s.train),
        "validation" => Ok(s.validation),
        "test" => Ok(s.test),
        other => Err(Error::param(format!("unknown split {other:?}"))),
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&read(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = cli.mu {
        cfg.mu = m;
    }
    if let Some(d) = cli.delta {
        cfg.delta = d;
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Simulate(_) => "simulate",
        Command::Label(_) => "label",
        Command::Tune(_) => "tune",
        Command::Fit(_) => "fit",
        Command::Forecast(_) => "forecast",
        Command::Evaluate(_) => "evaluate",
        Command::PlotData(_) => "plot-data",
        Command::Pipeline(_) => "pipeline",
    }
}

/// Merge command flags into the configuration.
fn configure(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::Label(a) => set_inputs(&mut cfg, a),
        Command::Simulate(a) => set_inputs(&mut cfg, &a.input),
        Command::Forecast(a) => {
            set_inputs(&mut cfg, &a.input);
            cfg.holdout_last |= a.holdout_last;
        }
        Command::Tune(a) => apply_search(&mut cfg, &a.search),
        Command::Fit(a) => {
            if let Some(m) = a.max_train {
                cfg.max_train = Some(m);
            }
        }
        Command::Pipeline(a) => {
            set_inputs(&mut cfg, &a.input);
            apply_search(&mut cfg, &a.search);
            if !a.families.is_empty() {
                cfg.families = a.families.iter().map(|f| f.parse()).collect::<Result<_>>()?;
            }
            if let Some(f) = &a.forecast_family {
                cfg.forecast_family = f.parse()?;
            }
            cfg.holdout_last |= a.holdout_last;
            if a.synth || (cfg.inputs.is_empty() && cfg.synth.is_some()) {
                cfg.synth = Some(synth_spec(cfg.synth.as_ref(), &a.synth_args, cfg.seed)?);
            }
        }
        Command::Synth(a) => cfg.synth = Some(synth_spec(cfg.synth.as_ref(), a, cfg.seed)?),
        Command::Evaluate(_) | Command::PlotData(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_inputs(cfg: &mut RunConfig, a: &InputArgs) {
    if !a.inputs.is_empty() {
        cfg.inputs = a.inputs.clone();
    }
    cfg.interpolate |= a.interpolate;
}

fn execute(cli: &Cli, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    match &cli.command {
        Command::Synth(_) => {
            let corpus = io::generate_synthetic(cfg.synth.as_ref().unwrap())?;
            out.write(TRAJECTORIES_FILE, io::trajectory_csv(&corpus.networks)?)?;
            out.write(GROUND_TRUTH_FILE, io::ground_truth_csv(&corpus.truth)?)?;
        }
        Command::Simulate(a) => {
            let nets = load_networks(&cfg.inputs, cfg.interpolate)?;
            let params = BcmParams::new(cfg.mu, a.sigma)?;
            let mode = a.mode.as_deref().map(str::parse).transpose()?.unwrap_or(cfg.mode);
            let scheme = a.scheme.as_deref().map(str::parse).transpose()?.unwrap_or(cfg.scheme);
            let mut trace = String::new();
            let mut summary = csv::Writer::from_writer(Vec::new());
            summary.write_record(["ego_id", "steps", "final_spread", "converged"])?;
            for (i, net) in nets.iter().enumerate() {
                let traces = simulate(net, &params, mode, scheme, a.steps);
                let t = io::trace_csv(net, &traces)?;
                // keep a single header
                trace.push_str(if i == 0 { &t } else { t.split_once('\n').map_or("", |x| x.1) });
                let (ok, s) = converged(&traces, a.tol)?;
                summary.write_record([net.ego_id(), &a.steps.to_string(), &s.to_string(), &ok.to_string()])?;
            }
            out.write(TRACE_FILE, trace)?;
            let body = summary.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            out.write(SIMULATION_SUMMARY_FILE, String::from_utf8(body).map_err(|e| Error::data(e.to_string()))?)?;
        }
        Command::Label(_) => {
            let nets = load_networks(&cfg.inputs, cfg.interpolate)?;
            let d = build_dataset(&nets, cfg.mu, cfg.delta)?;
            if d.is_empty() {
                return Err(Error::data("no tuples could be built: every network has fewer than 2 segments"));
            }
            out.write(DATASET_FILE, io::dataset_csv(&d)?)?;
        }
        Command::Tune(a) => {
            let d = load_dataset(&a.dataset)?;
            let family: Family = a.family.parse()?;
            let space = match &a.space {
                Some(p) => SearchSpace::from_json(&read(p)?)?,
                None => cfg.space_for(family),
            };
            let s = split_dataset(&d, cfg.split, cfg.seed)?;
            let t = tune_regressor(&s.train, &s.validation, family, &space, &cfg.pso_config(), cfg.max_train)?;
            out.write(BEST_SPEC_FILE, serde_json::to_string_pretty(&t.spec)? + "\n")?;
            out.write(HISTORY_FILE, history_csv(&t.search.history)?)?;
            let record = TuningRecord {
                family,
                space,
                spec: t.spec,
                validation_mse: t.validation_mse,
                initial_best_fitness: t.search.initial_best_fitness,
                history: t.search.history,
                diagnostics: t.search.diagnostics,
            };
            out.write(TUNING_FILE, serde_json::to_string_pretty(&[record])? + "\n")?;
        }
        Command::Fit(a) => {
            let d = load_dataset(&a.dataset)?;
            let spec: RegressorSpec = serde_json::from_str(&read(&a.spec)?)?;
            let s = split_dataset(&d, cfg.split, cfg.seed)?;
            let model = fit_sigma_model(&s.train, &spec, cfg.max_train, cfg.seed)?;
            out.write(MODEL_FILE, io::model_json(&model)?)?;
        }
        Command::Forecast(a) => {
            let nets = load_networks(&cfg.inputs, cfg.interpolate)?;
            let model = load_model(&a.model)?;
            let (f, _) = forecast_all(&nets, &model, cfg.mu, cfg.holdout_last)?;
            if f.is_empty() {
                return Err(Error::data("no network has enough segments to forecast"));
            }
            out.write(FORECAST_FILE, forecast_csv(&f)?)?;
        }
        Command::Evaluate(a) => {
            let d = load_dataset(&a.dataset)?;
            let model = load_model(&a.model)?;
            let part = select_split(&d, cfg, &a.split)?;
            if part.is_empty() {
                return Err(Error::data(format!("the {} split is empty", a.split)));
            }
            let m = dataset_mse(&model, &part)?;
            let report = serde_json::json!({
                "format_version": io::FORMAT_VERSION,
                "family": model.family(),
                "split": a.split,
                "tuples": part.len(),
                "mse": m,
            });
            out.write(EVALUATION_FILE, serde_json::to_string_pretty(&report)? + "\n")?;
        }
        Command::PlotData(a) => {
            let kind: PlotKind = a.kind.parse()?;
            let missing = |what: &str| Error::param(format!("plot kind {} needs --{what}", a.kind));
            let (name, table) = match kind {
                PlotKind::HyperparamVariation => {
                    let p = a.tuning.as_ref().ok_or_else(|| missing("tuning"))?;
                    let records: Vec<TuningRecord> = serde_json::from_str(&read(p)?)?;
                    let want: Option<Family> = a.family.as_deref().map(str::parse).transpose()?;
                    let r = records
                        .iter()
                        .find(|r| want.is_none_or(|f| f == r.family))
                        .ok_or_else(|| Error::data("tuning file has no matching family"))?;
                    let t = io::emit_plot_data(&PlotInput::HyperparamVariation {
                        space: &r.space,
                        history: &r.history,
                    })?;
                    (PLOT_HYPERPARAMS_FILE, t)
                }
                PlotKind::ModelLoss => {
                    let p = a.metrics.as_ref().ok_or_else(|| missing("metrics"))?;
                    let m: PipelineMetrics = serde_json::from_str(&read(p)?)?;
                    let losses: Vec<(String, f64)> =
                        m.families.iter().map(|f| (f.family.to_string(), f.test_mse)).collect();
                    (PLOT_LOSS_FILE, io::emit_plot_data(&PlotInput::ModelLoss { losses: &losses })?)
                }
                PlotKind::ActualVsPredicted => {
                    let d = load_dataset(a.dataset.as_ref().ok_or_else(|| missing("dataset"))?)?;
                    let model = load_model(a.model.as_ref().ok_or_else(|| missing("model"))?)?;
                    let test = select_split(&d, cfg, "test")?;
                    (PLOT_ACTUAL_FILE, actual_vs_predicted(&model, &test)?)
                }
            };
            out.write(name, table)?;
        }
        Command::Pipeline(_) => {
            let nets = if cfg.inputs.is_empty() {
                let spec = cfg
                    .synth
                    .as_ref()
                    .ok_or_else(|| Error::param("pipeline needs --input files or --synth"))?;
                let corpus = stage("synth", io::generate_synthetic(spec))?;
                out.write(TRAJECTORIES_FILE, io::trajectory_csv(&corpus.networks)?)?;
                out.write(GROUND_TRUTH_FILE, io::ground_truth_csv(&corpus.truth)?)?;
                corpus.networks
            } else {
                stage("load", load_networks(&cfg.inputs, cfg.interpolate))?
            };
            let mut produced = Vec::new();
            let result = run_pipeline(cfg, &nets, &mut produced);
            for (name, body) in produced {
                out.write(&name, body)?;
            }
            result?;
        }
    }
    Ok(())
}

/// Ground-truth rows loaded from a file, for callers that score recovery.
pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    io::parse_ground_truth_csv(&read(path)?)
}

/// Run the command line; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = command_name(&cli.command);
    let cfg = match configure(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let mut out = match Outputs::new(&cfg.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = execute(&cli, &cfg, &mut out);
    let err = result.err();
    if let Err(e) = out.finish(name, &cfg, err.as_ref()) {
        eprintln!("error: could not write manifest: {e}");
        return exit_code(&e);
    }
    match err {
        None => 0,
        Some(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ValueProfile;
    use crate::regress::{Kernel, Samples};

    fn constant_model(sigma: f64) -> FittedModel {
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 0.0, 1.0, 0.4]).collect();
        let s = Samples::new(x, vec![sigma; 4]).unwrap();
        crate::regress::fit(&s, &RegressorSpec::Ridge { alpha: 1.0 }).unwrap().with_clamp(0.0, 1.0)
    }

    fn net(ego: [f64; 3], alter: [f64; 3]) -> EgoNetwork {
        let t = |v: [f64; 3]| v.iter().map(|&s| ValueProfile::uniform(s).unwrap()).collect();
        EgoNetwork::new("e", vec!["a".into()], 0, vec![t(ego), t(alter)]).unwrap()
    }

    #[test]
    fn forecast_applies_predicted_threshold() {
        let n = net([0.2, 0.3, 0.5], [0.6, 0.6, 0.6]);
        let open = forecast_network(&n, &constant_model(1.0), 0.4).unwrap();
        assert_eq!(open.len(), 5);
        assert!((open[0].predicted - (0.5 + 0.4 * 0.1)).abs() < 1e-12);
        assert_eq!(open[0].segment, 3);
        let closed = forecast_network(&n, &constant_model(0.0), 0.4).unwrap();
        assert_eq!(closed[0].predicted, 0.5);
    }

    #[test]
    fn holdout_scores_against_last_segment() {
        let n = net([0.2, 0.3, 0.36], [0.6, 0.6, 0.6]);
        let (f, w) = forecast_all(&[n], &constant_model(1.0), 0.4, true).unwrap();
        assert!(w.is_empty());
        assert_eq!(f[0].segment, 2);
        assert!((f[0].predicted - 0.42).abs() < 1e-12);
        assert_eq!(f[0].actual, Some(0.36));
        let s = summarize_forecasts(&f, 0.02).unwrap();
        assert_eq!(s.pairs, 5);
        assert_eq!(s.within_tolerance, 0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::param("x")), 1);
        assert_eq!(exit_code(&Error::data("x")), 2);
        assert_eq!(exit_code(&Error::numerical("x")), 3);
        assert_eq!(exit_code(&Error::numerical("x").in_stage("fit")), 3);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = RunConfig::from_json(r#"{"mu": 0.3, "families": ["ridge"], "spaces": {"ridge": {"dimensions": [{"name": "alpha", "kind": "continuous", "lo": 0.5, "hi": 0.5}]}}}"#).unwrap();
        assert_eq!(c.mu, 0.3);
        assert_eq!(c.delta, DEFAULT_DELTA);
        assert_eq!(c.pso.num_particles, 10);
        assert_eq!(c.space_for(Family::Ridge).dimensions[0].name, "alpha");
        assert_eq!(c.space_for(Family::Svr), default_space(Family::Svr));
        c.validate().unwrap();
        assert!(RunConfig { mu: 0.7, ..c.clone() }.validate().is_err());
        assert!(RunConfig { inputs: vec!["/no/such/file".into()], ..c }.validate().is_err());
    }

    #[test]
    fn kernel_spec_json_is_stable() {
        let spec = RegressorSpec::svr(Kernel::Rbf { gamma: 0.5 }, 10.0);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<RegressorSpec>(&text).unwrap(), spec);
    }
}
