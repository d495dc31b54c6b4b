//! End-to-end runs: load or generate a field, corrupt it, place sensors,
//! build the lagged datasets, train one of the two models and score it on
//! held-out snapshots. One seed drives every random choice, so a run config
//! names its result exactly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::bpdn::{
    AvailabilityMode, LambdaRule, Recovery, RecoveryStats, SolveError, SolverConfig, StepRule,
};
use crate::field::{
    extract_sequences, extract_targets, fit_scaler, place_sensors, split_dataset,
    train_time_rows, valid_locations, DataError, Field, FieldError, Normalization, Scaler,
    SensorSet, SequenceDataset, EPS_VALID,
};
use crate::metrics::{evaluate, EvalDetail, MetricError, MetricReport};
use crate::net::{init_params, save_checkpoint, FinalActivation, ModelParams, ModelSpec, NetError};
use crate::subsample::{apply_plan, make_plan, PlanError, SubsamplePlan};
use crate::synth::{AmplitudeLaw, SyntheticKind, SyntheticSpec, SynthError};
use crate::train::{fit, history_to_tsv, EpochRecord, LossWeights, SchedulerKind, TrainConfig,
    TrainError};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("configs disagree on {what}; compared runs must share the corrupted data")]
    ConfigMismatch { what: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// l1 spectral recovery in front of the network
    CsShred,
    /// the network alone, gappy windows go straight in
    Shred,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::CsShred => write!(f, "cs-shred"),
            ModelKind::Shred => write!(f, "shred"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cs-shred" => Ok(ModelKind::CsShred),
            "shred" => Ok(ModelKind::Shred),
            other => Err(format!("unknown model kind: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    Ista,
    Fista,
    Sparsa,
}

impl SolverChoice {
    fn step_rule(self) -> (StepRule, bool) {
        match self {
            SolverChoice::Ista => (StepRule::Fixed, false),
            SolverChoice::Fista => (StepRule::Fixed, true),
            SolverChoice::Sparsa => (StepRule::BarzilaiBorwein, false),
        }
    }
}

impl std::fmt::Display for SolverChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverChoice::Ista => write!(f, "ista"),
            SolverChoice::Fista => write!(f, "fista"),
            SolverChoice::Sparsa => write!(f, "sparsa"),
        }
    }
}

impl std::str::FromStr for SolverChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ista" => Ok(SolverChoice::Ista),
            "fista" => Ok(SolverChoice::Fista),
            "sparsa" => Ok(SolverChoice::Sparsa),
            other => Err(format!("unknown solver: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Everything a run needs, serializable as plain `key value` text. The echo
/// written next to the artifacts reproduces the run byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub source: DataSource,
    /// spatial columns the corruption hits
    pub sub_cols: usize,
    /// snapshots the corruption hits
    pub sub_snaps: usize,
    pub n_sensors: usize,
    pub lag: usize,
    pub normalization: Normalization,
    /// restrict sensor placement to locations with signal
    pub filter_valid: bool,
    pub availability: AvailabilityMode,
    pub solver: SolverChoice,
    pub lambda_rule: LambdaRule,
    pub max_iters: usize,
    pub tol: f64,
    /// memoize recovered windows across batches and epochs
    pub cache: bool,
    pub hidden_size: usize,
    pub hidden_layers: usize,
    pub l1: usize,
    pub l2: usize,
    pub dropout: f64,
    pub split_input_weights: bool,
    pub final_activation: FinalActivation,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::CsShred,
            seed: 0,
            source: DataSource::Synthetic(SyntheticSpec {
                kind: SyntheticKind::FourierSparse,
                n_x: 32,
                n_y: 32,
                n_t: 300,
                n_modes: 4,
                amplitude: AmplitudeLaw::Constant,
                noise_rel: 0.0,
                seed: 0,
            }),
            sub_cols: 8,
            sub_snaps: 120,
            n_sensors: 3,
            lag: 52,
            normalization: Normalization::MinMax,
            filter_valid: true,
            availability: AvailabilityMode::Mask,
            solver: SolverChoice::Sparsa,
            lambda_rule: LambdaRule::ScaledInfNorm(0.01),
            max_iters: 2000,
            tol: 1e-8,
            cache: true,
            hidden_size: 64,
            hidden_layers: 2,
            l1: 350,
            l2: 400,
            dropout: 0.1,
            split_input_weights: false,
            final_activation: FinalActivation::Linear,
            train: TrainConfig::default(),
            loss: LossWeights {
                lambda_l2: 1.0,
                lambda_l1: 1e-4,
                lambda_snr: 1.0,
                ..LossWeights::default()
            },
        }
    }
}

impl RunConfig {
    pub fn solver_config(&self) -> SolverConfig {
        let (step_rule, acceleration) = self.solver.step_rule();
        SolverConfig {
            lambda: self.lambda_rule,
            max_iters: self.max_iters,
            tol: self.tol,
            step_rule,
            acceleration,
        }
    }

    pub fn model_spec(&self, output_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim: self.n_sensors,
            hidden_size: self.hidden_size,
            hidden_layers: self.hidden_layers,
            d1: self.l1,
            d2: self.l2,
            output_dim,
            split_input_weights: self.split_input_weights,
            dropout: self.dropout,
            final_activation: self.final_activation,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model {}\n", self.model));
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str("# data\n");
        match &self.source {
            DataSource::File(p) => {
                s.push_str("source file\n");
                s.push_str(&format!("field_path {}\n", p.display()));
            }
            DataSource::Synthetic(sp) => {
                s.push_str("source synthetic\n");
                s.push_str(&format!("synth_kind {}\n", sp.kind));
                s.push_str(&format!("n_x {}\n", sp.n_x));
                s.push_str(&format!("n_y {}\n", sp.n_y));
                s.push_str(&format!("n_t {}\n", sp.n_t));
                s.push_str(&format!("n_modes {}\n", sp.n_modes));
                let (base, rate) = match sp.amplitude {
                    AmplitudeLaw::Constant => (1.0, 0.0),
                    AmplitudeLaw::Decay { base, rate } => (base, rate),
                };
                s.push_str(&format!("amp_base {base}\n"));
                s.push_str(&format!("amp_rate {rate}\n"));
                s.push_str(&format!("noise_rel {}\n", sp.noise_rel));
            }
        }
        s.push_str("# corruption\n");
        s.push_str(&format!("sub_cols {}\n", self.sub_cols));
        s.push_str(&format!("sub_snaps {}\n", self.sub_snaps));
        s.push_str("# sensing\n");
        s.push_str(&format!("n_sensors {}\n", self.n_sensors));
        s.push_str(&format!("lag {}\n", self.lag));
        s.push_str(&format!("normalization {}\n", self.normalization));
        s.push_str(&format!("filter_valid {}\n", self.filter_valid));
        s.push_str("# recovery\n");
        let avail = match self.availability {
            AvailabilityMode::SentinelNonZero => "sentinel-nonzero",
            AvailabilityMode::SentinelPositive => "sentinel-positive",
            AvailabilityMode::Mask => "mask",
        };
        s.push_str(&format!("availability {avail}\n"));
        s.push_str(&format!("solver {}\n", self.solver));
        match self.lambda_rule {
            LambdaRule::Fixed(v) => {
                s.push_str("lambda_rule fixed\n");
                s.push_str(&format!("lambda {v}\n"));
            }
            LambdaRule::ScaledInfNorm(c) => {
                s.push_str("lambda_rule scaled\n");
                s.push_str(&format!("lambda {c}\n"));
            }
        }
        s.push_str(&format!("max_iters {}\n", self.max_iters));
        s.push_str(&format!("tol {}\n", self.tol));
        s.push_str(&format!("cache {}\n", self.cache));
        s.push_str("# model\n");
        s.push_str(&format!("hidden_size {}\n", self.hidden_size));
        s.push_str(&format!("hidden_layers {}\n", self.hidden_layers));
        s.push_str(&format!("l1 {}\n", self.l1));
        s.push_str(&format!("l2 {}\n", self.l2));
        s.push_str(&format!("dropout {}\n", self.dropout));
        s.push_str(&format!("split_input_weights {}\n", self.split_input_weights));
        s.push_str(&format!("final_activation {}\n", self.final_activation));
        s.push_str("# training\n");
        s.push_str(&format!("epochs {}\n", self.train.epochs));
        s.push_str(&format!("batch_size {}\n", self.train.batch_size));
        s.push_str(&format!("lr {}\n", self.train.lr));
        s.push_str(&format!("patience {}\n", self.train.patience));
        s.push_str(&format!("epoch_step {}\n", self.train.epoch_step));
        s.push_str(&format!("scheduler {}\n", self.train.scheduler));
        s.push_str("# loss\n");
        s.push_str(&format!("lambda_l2 {}\n", self.loss.lambda_l2));
        s.push_str(&format!("lambda_l1 {}\n", self.loss.lambda_l1));
        s.push_str(&format!("lambda_snr {}\n", self.loss.lambda_snr));
        s.push_str(&format!("weight_decay {}\n", self.loss.weight_decay));
        s.push_str(&format!("snr_cap {}\n", self.loss.snr_cap));
        s.push_str(&format!("snr_from_prediction {}\n", self.loss.snr_from_prediction));
        s.push_str(&format!("mae_on_residual {}\n", self.loss.mae_on_residual));
        s
    }

    /// Parse `key value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        Self::from_text_over(RunConfig::default(), text)
    }

    /// Same grammar, but keys fall back to `base` instead of the defaults.
    /// Command line overrides reuse this so flags and files cannot drift.
    pub fn from_text_over(base: RunConfig, text: &str) -> Result<Self, PipelineError> {
        let mut cfg = base;
        let mut map: HashMap<&str, &str> = HashMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| PipelineError::Config(format!("line {}: `{raw}`", ln + 1)))?;
            map.insert(k, v.trim());
        }
        let bad = |k: &str, v: &str| PipelineError::Config(format!("bad value for {k}: {v}"));
        macro_rules! take {
            ($key:literal, $target:expr) => {
                if let Some(v) = map.remove($key) {
                    $target = v.parse().map_err(|_| bad($key, v))?;
                }
            };
        }
        take!("model", cfg.model);
        take!("seed", cfg.seed);
        take!("sub_cols", cfg.sub_cols);
        take!("sub_snaps", cfg.sub_snaps);
        take!("n_sensors", cfg.n_sensors);
        take!("lag", cfg.lag);
        take!("filter_valid", cfg.filter_valid);
        take!("solver", cfg.solver);
        take!("max_iters", cfg.max_iters);
        take!("tol", cfg.tol);
        take!("cache", cfg.cache);
        take!("hidden_size", cfg.hidden_size);
        take!("hidden_layers", cfg.hidden_layers);
        take!("l1", cfg.l1);
        take!("l2", cfg.l2);
        take!("dropout", cfg.dropout);
        take!("split_input_weights", cfg.split_input_weights);
        take!("epochs", cfg.train.epochs);
        take!("batch_size", cfg.train.batch_size);
        take!("lr", cfg.train.lr);
        take!("patience", cfg.train.patience);
        take!("epoch_step", cfg.train.epoch_step);
        take!("lambda_l2", cfg.loss.lambda_l2);
        take!("lambda_l1", cfg.loss.lambda_l1);
        take!("lambda_snr", cfg.loss.lambda_snr);
        take!("weight_decay", cfg.loss.weight_decay);
        take!("snr_cap", cfg.loss.snr_cap);
        take!("snr_from_prediction", cfg.loss.snr_from_prediction);
        take!("mae_on_residual", cfg.loss.mae_on_residual);

        if let Some(v) = map.remove("normalization") {
            cfg.normalization = match v {
                "min-max" | "minmax" => Normalization::MinMax,
                "z-score" | "zscore" => Normalization::ZScore,
                _ => return Err(bad("normalization", v)),
            };
        }
        if let Some(v) = map.remove("availability") {
            cfg.availability = match v {
                "sentinel-nonzero" => AvailabilityMode::SentinelNonZero,
                "sentinel-positive" => AvailabilityMode::SentinelPositive,
                "mask" => AvailabilityMode::Mask,
                _ => return Err(bad("availability", v)),
            };
        }
        if let Some(v) = map.remove("final_activation") {
            cfg.final_activation = match v {
                "linear" => FinalActivation::Linear,
                "relu" => FinalActivation::Relu,
                _ => return Err(bad("final_activation", v)),
            };
        }
        if let Some(v) = map.remove("scheduler") {
            cfg.train.scheduler = match v {
                "plateau" => SchedulerKind::Plateau,
                "step" => SchedulerKind::Step,
                _ => return Err(bad("scheduler", v)),
            };
        }
        let lambda_value = match map.remove("lambda") {
            Some(v) => Some(v.parse::<f64>().map_err(|_| bad("lambda", v))?),
            None => None,
        };
        match (map.remove("lambda_rule"), lambda_value) {
            (Some("fixed"), Some(v)) => cfg.lambda_rule = LambdaRule::Fixed(v),
            (Some("scaled"), Some(v)) => cfg.lambda_rule = LambdaRule::ScaledInfNorm(v),
            (Some("fixed"), None) | (Some("scaled"), None) => {
                return Err(PipelineError::Config("lambda_rule given without lambda".into()))
            }
            (Some(other), _) => return Err(bad("lambda_rule", other)),
            (None, Some(v)) => {
                cfg.lambda_rule = match cfg.lambda_rule {
                    LambdaRule::Fixed(_) => LambdaRule::Fixed(v),
                    LambdaRule::ScaledInfNorm(_) => LambdaRule::ScaledInfNorm(v),
                }
            }
            (None, None) => {}
        }

        // the data source is assembled last so key order does not matter
        let source_kind = map.remove("source");
        let field_path = map.remove("field_path");
        let touched_synth = ["synth_kind", "n_x", "n_y", "n_t", "n_modes", "amp_base",
            "amp_rate", "noise_rel"]
            .iter()
            .any(|k| map.contains_key(*k));
        let mut synth = match &cfg.source {
            DataSource::Synthetic(sp) => sp.clone(),
            DataSource::File(_) => SyntheticSpec::default(),
        };
        take!("n_x", synth.n_x);
        take!("n_y", synth.n_y);
        take!("n_t", synth.n_t);
        take!("n_modes", synth.n_modes);
        take!("noise_rel", synth.noise_rel);
        if let Some(v) = map.remove("synth_kind") {
            synth.kind = v.parse().map_err(PipelineError::Config)?;
        }
        let mut amp_base = match synth.amplitude {
            AmplitudeLaw::Constant => 1.0,
            AmplitudeLaw::Decay { base, .. } => base,
        };
        let mut amp_rate = match synth.amplitude {
            AmplitudeLaw::Constant => 0.0,
            AmplitudeLaw::Decay { rate, .. } => rate,
        };
        take!("amp_base", amp_base);
        take!("amp_rate", amp_rate);
        synth.amplitude = if amp_rate > 0.0 {
            AmplitudeLaw::Decay { base: amp_base, rate: amp_rate }
        } else {
            AmplitudeLaw::Constant
        };
        cfg.source = match (source_kind, field_path) {
            (Some("file") | None, Some(p)) => DataSource::File(PathBuf::from(p)),
            (Some("file"), None) => {
                return Err(PipelineError::Config("source file needs field_path".into()))
            }
            (Some("synthetic"), _) => DataSource::Synthetic(synth),
            (Some(other), _) => return Err(bad("source", other)),
            (None, None) if touched_synth => DataSource::Synthetic(synth),
            (None, None) => cfg.source,
        };

        if let Some(k) = map.keys().next() {
            return Err(PipelineError::Config(format!("unknown key: {k}")));
        }
        // one master seed governs every stream, including the generator
        if let DataSource::Synthetic(sp) = &mut cfg.source {
            sp.seed = cfg.seed;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

/// The corrupted-and-normalized view of one run's data, shared by both
/// models under comparison.
pub struct PreparedData {
    /// normalized ground truth
    pub original: Field,
    /// normalized corrupted field
    pub subsampled: Field,
    pub scaler: Scaler,
    pub plan: SubsamplePlan,
    pub sensors: SensorSet,
    pub train_ds: SequenceDataset,
    pub val_ds: SequenceDataset,
    pub test_ds: SequenceDataset,
    pub dims: (usize, usize, usize),
}

pub fn load_source(cfg: &RunConfig) -> Result<Field, PipelineError> {
    match &cfg.source {
        DataSource::File(p) => Ok(Field::read_binary(p)?),
        DataSource::Synthetic(spec) => Ok(crate::synth::generate_synthetic(spec)?),
    }
}

/// Corrupt, normalize, place sensors and split. The scaler is fitted on the
/// time rows the training windows can see, on the corrupted field, and then
/// applied to both fields; test targets come from the original.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData, PipelineError> {
    let original = load_source(cfg)?;
    let dims = original.dims();
    let plan = make_plan(dims, cfg.sub_cols, cfg.sub_snaps, cfg.seed)?;
    let subsampled = apply_plan(&original, &plan)?;

    let rows = train_time_rows(dims.2, cfg.lag, TRAIN_FRACTION);
    let scaler = fit_scaler(&subsampled, rows, cfg.normalization)?;
    let norm_sub = scaler.apply_field(&subsampled);
    let norm_orig = scaler.apply_field(&original);

    let valid: Vec<usize> = if cfg.filter_valid {
        valid_locations(&subsampled, EPS_VALID)?
    } else {
        (0..subsampled.n_points()).collect()
    };
    let sensors = place_sensors(&valid, cfg.n_sensors, cfg.seed)?;

    let inputs = extract_sequences(&norm_sub, &sensors, cfg.lag)?;
    let targets_sub = extract_targets(&norm_sub, cfg.lag)?;
    let targets_orig = extract_targets(&norm_orig, cfg.lag)?;
    let n_samples = dims.2 - cfg.lag;
    let missing = Array3::from_shape_fn((n_samples, cfg.lag, sensors.count()), |(k, j, s)| {
        plan.masked_flat(sensors.indices[s], k + j)
    });
    let (train_ds, val_ds, test_ds) = split_dataset(
        &inputs,
        &targets_sub,
        &targets_orig,
        Some(&missing),
        cfg.lag,
        (TRAIN_FRACTION, VAL_FRACTION),
    )?;
    Ok(PreparedData {
        original: norm_orig,
        subsampled: norm_sub,
        scaler,
        plan,
        sensors,
        train_ds,
        val_ds,
        test_ds,
        dims,
    })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub params: ModelParams,
    pub report: MetricReport,
    pub detail: EvalDetail,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// The recovery stage a config asks for: present for cs-shred, absent for
/// the plain shred baseline.
pub fn recovery_for(cfg: &RunConfig) -> Option<Recovery> {
    match cfg.model {
        ModelKind::CsShred => Some(Recovery::new(
            cfg.solver_config(),
            cfg.availability,
            cfg.cache,
        )),
        ModelKind::Shred => None,
    }
}

/// Train and score one model on freshly prepared data.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    let data = prepare_data(cfg)?;
    run_on_prepared(cfg, &data)
}

/// Train and score one model on data prepared elsewhere, so two models can
/// share the identical corruption.
pub fn run_on_prepared(cfg: &RunConfig, data: &PreparedData) -> Result<RunOutcome, PipelineError> {
    let (n_x, n_y, _) = data.dims;
    let spec = cfg.model_spec(n_x * n_y);
    let params0 = init_params(&spec, cfg.seed);
    let recovery = recovery_for(cfg);
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let fit_out = fit(
        params0,
        &data.train_ds,
        &data.val_ds,
        recovery.as_ref(),
        &tc,
        &cfg.loss,
    )?;
    let (report, detail) = evaluate(
        &fit_out.params,
        recovery.as_ref(),
        &data.test_ds,
        &data.scaler,
        n_x,
        n_y,
    )?;
    log::info!(
        "{}: normalized error {:.4e}, ssim {:.4}, psnr {:.2} dB over {} test snapshots",
        cfg.model,
        report.normalized_error_mean,
        report.ssim_mean,
        report.psnr_mean_db,
        report.n_snapshots
    );
    Ok(RunOutcome {
        config: cfg.clone(),
        params: fit_out.params,
        report,
        detail,
        history: fit_out.history,
        best_epoch: fit_out.best_epoch,
        best_val_loss: fit_out.best_val_loss,
        stopped_early: fit_out.stopped_early,
    })
}

fn grid_to_field(name: &str, grid: &Array2<f64>) -> Result<Field, FieldError> {
    let (n_x, n_y) = grid.dim();
    let mut data = Array2::zeros((1, n_x * n_y));
    for ((x, y), &v) in grid.indexed_iter() {
        data[(0, x * n_y + y)] = v;
    }
    Field::from_time_major(name, (n_x, n_y, 1), data)
}

/// Write the full artifact set of a finished run into `out_dir`.
pub fn save_run(outcome: &RunOutcome, data: &PreparedData, out_dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), outcome.config.to_text())?;
    fs::write(out_dir.join("plan.txt"), data.plan.to_text())?;
    fs::write(out_dir.join("sensors.txt"), data.sensors.to_text())?;
    save_checkpoint(
        &outcome.params,
        &out_dir.join("checkpoint.bin"),
        &out_dir.join("checkpoint.txt"),
    )?;
    fs::write(out_dir.join("history.tsv"), history_to_tsv(&outcome.history))?;
    fs::write(out_dir.join("metrics.txt"), outcome.report.to_text())?;
    let mut per = String::from("time\tnormalized_error\tpsnr_db\tssim\n");
    for s in &outcome.detail.per_snapshot {
        per.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.time, s.normalized_error, s.psnr_db, s.ssim
        ));
    }
    fs::write(out_dir.join("per_snapshot.tsv"), per)?;
    grid_to_field("last-predicted", &outcome.detail.last_pred_grid)?
        .write_binary(&out_dir.join("last_pred.bin"))?;
    grid_to_field("last-true", &outcome.detail.last_true_grid)?
        .write_binary(&out_dir.join("last_true.bin"))?;
    fs::write(out_dir.join("last_pred.txt"), grid_text(&outcome.detail.last_pred_grid))?;
    fs::write(out_dir.join("last_true.txt"), grid_text(&outcome.detail.last_true_grid))?;
    Ok(())
}

/// One text line per x row, y values whitespace-separated, plot-ready.
pub fn grid_text(grid: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Check that two configs describe the same corrupted data, so their models
/// can be compared honestly.
pub fn check_comparable(a: &RunConfig, b: &RunConfig) -> Result<(), PipelineError> {
    let mismatch = |what: &str| Err(PipelineError::ConfigMismatch { what: what.into() });
    if a.source != b.source {
        return mismatch("source");
    }
    if a.seed != b.seed {
        return mismatch("seed");
    }
    if a.sub_cols != b.sub_cols {
        return mismatch("sub_cols");
    }
    if a.sub_snaps != b.sub_snaps {
        return mismatch("sub_snaps");
    }
    if a.n_sensors != b.n_sensors {
        return mismatch("n_sensors");
    }
    if a.lag != b.lag {
        return mismatch("lag");
    }
    if a.normalization != b.normalization {
        return mismatch("normalization");
    }
    if a.filter_valid != b.filter_valid {
        return mismatch("filter_valid");
    }
    Ok(())
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub a: RunOutcome,
    pub b: RunOutcome,
}

/// Run two configs on one shared prepared dataset. Fails fast when the
/// configs would not see the same corruption.
pub fn compare(cfg_a: &RunConfig, cfg_b: &RunConfig) -> Result<CompareOutcome, PipelineError> {
    check_comparable(cfg_a, cfg_b)?;
    let data = prepare_data(cfg_a)?;
    let a = run_on_prepared(cfg_a, &data)?;
    let b = run_on_prepared(cfg_b, &data)?;
    Ok(CompareOutcome { a, b })
}

pub fn comparison_text(out: &CompareOutcome) -> String {
    let (a, b) = (&out.a, &out.b);
    let mut s = String::new();
    s.push_str(&format!(
        "metric\t{}\t{}\n",
        a.config.model, b.config.model
    ));
    let rows: [(&str, f64, f64); 5] = [
        (
            "normalized_error_mean",
            a.report.normalized_error_mean,
            b.report.normalized_error_mean,
        ),
        (
            "normalized_error_last",
            a.report.normalized_error_last,
            b.report.normalized_error_last,
        ),
        ("ssim_mean", a.report.ssim_mean, b.report.ssim_mean),
        ("psnr_mean_db", a.report.psnr_mean_db, b.report.psnr_mean_db),
        ("mse_last", a.report.mse_last, b.report.mse_last),
    ];
    for (name, va, vb) in rows {
        s.push_str(&format!("{name}\t{va}\t{vb}\n"));
    }
    s
}

/// Run the l1 stage over every spatial location's full time series and
/// return the recovered field. This is the recovery stage alone, no network.
pub fn recover_field(
    field: &Field,
    plan: Option<&SubsamplePlan>,
    solver: SolverConfig,
    availability: AvailabilityMode,
) -> Result<(Field, RecoveryStats), PipelineError> {
    let (n_x, n_y, n_t) = field.dims();
    let n = field.n_points();
    let mut windows = Array3::zeros((n, n_t, 1));
    for t in 0..n_t {
        for p in 0..n {
            windows[(p, t, 0)] = field.data()[(t, p)];
        }
    }
    let missing = plan.map(|pl| {
        Array3::from_shape_fn((n, n_t, 1), |(p, t, _)| pl.masked_flat(p, t))
    });
    let recovery = Recovery::new(solver, availability, true);
    let (recovered, stats) = recovery.recover_batch(&windows, missing.as_ref())?;
    let mut data = Array2::zeros((n_t, n));
    for t in 0..n_t {
        for p in 0..n {
            data[(t, p)] = recovered[(p, t, 0)];
        }
    }
    let out = Field::from_time_major(
        format!("{}-recovered", field.name),
        (n_x, n_y, n_t),
        data,
    )?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::load_checkpoint;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            seed: 11,
            source: DataSource::Synthetic(SyntheticSpec {
                kind: SyntheticKind::FourierSparse,
                n_x: 6,
                n_y: 6,
                n_t: 48,
                n_modes: 2,
                amplitude: AmplitudeLaw::Constant,
                noise_rel: 0.0,
                seed: 11,
            }),
            sub_cols: 2,
            sub_snaps: 16,
            n_sensors: 2,
            lag: 6,
            hidden_size: 6,
            hidden_layers: 2,
            l1: 10,
            l2: 12,
            dropout: 0.0,
            max_iters: 400,
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                lr: 1e-2,
                patience: 10,
                epoch_step: 10,
                scheduler: SchedulerKind::Plateau,
                seed: 11,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_text_round_trips() {
        for cfg in [
            RunConfig::default(),
            tiny_cfg(),
            RunConfig {
                model: ModelKind::Shred,
                source: DataSource::File(PathBuf::from("data/field.bin")),
                lambda_rule: LambdaRule::Fixed(2.5e-3),
                solver: SolverChoice::Fista,
                availability: AvailabilityMode::SentinelPositive,
                normalization: Normalization::ZScore,
                final_activation: FinalActivation::Relu,
                split_input_weights: true,
                ..RunConfig::default()
            },
        ] {
            let text = cfg.to_text();
            let back = RunConfig::from_text(&text).unwrap();
            assert_eq!(back, cfg, "round trip changed the config:\n{text}");
        }
    }

    #[test]
    fn config_parser_rejects_garbage() {
        assert!(matches!(
            RunConfig::from_text("definitely_not_a_key 5\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_text("model hovercraft\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_text("source file\n"),
            Err(PipelineError::Config(_))
        ));
        // comments and blank lines are fine
        let cfg = RunConfig::from_text("# hello\n\nseed 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7, "train seed follows the master seed");
    }

    #[test]
    fn overrides_layer_onto_a_base_config() {
        let base = RunConfig {
            source: DataSource::File(PathBuf::from("data/f.bin")),
            ..RunConfig::default()
        };
        let cfg = RunConfig::from_text_over(base.clone(), "seed 5\nepochs 3\n").unwrap();
        assert_eq!(cfg.source, base.source, "file source survives unrelated overrides");
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.epochs, 3);
        // naming any generator key switches the source to synthetic
        let cfg2 = RunConfig::from_text_over(cfg, "n_modes 7\n").unwrap();
        match cfg2.source {
            DataSource::Synthetic(sp) => {
                assert_eq!(sp.n_modes, 7);
                assert_eq!(sp.seed, 5);
            }
            other => panic!("expected synthetic source, got {other:?}"),
        }
    }

    #[test]
    fn prepared_data_respects_the_split_contract() {
        let cfg = tiny_cfg();
        let data = prepare_data(&cfg).unwrap();
        let (n_x, n_y, n_t) = data.dims;
        assert_eq!((n_x, n_y, n_t), (6, 6, 48));
        let n_samples = n_t - cfg.lag;
        let n_train = (TRAIN_FRACTION * n_samples as f64).floor() as usize;
        let n_val = (VAL_FRACTION * n_samples as f64).floor() as usize;
        assert_eq!(data.train_ds.n_samples(), n_train);
        assert_eq!(data.val_ds.n_samples(), n_val);
        assert_eq!(
            data.test_ds.n_samples(),
            n_samples - n_train - n_val
        );
        // test targets are rows of the normalized original field
        let k0 = data.test_ds.first_target_time;
        for k in 0..data.test_ds.n_samples() {
            let want = data.original.snapshot(k0 + k);
            let got = data.test_ds.targets.row(k);
            assert_eq!(got, want);
        }
        // train targets come from the corrupted field instead
        let t0 = data.train_ds.first_target_time;
        let want = data.subsampled.snapshot(t0);
        assert_eq!(data.train_ds.targets.row(0), want);
        // missing flags match the plan at the sensor locations
        let missing = data.train_ds.missing.as_ref().unwrap();
        for k in 0..2 {
            for j in 0..cfg.lag {
                for (s, &p) in data.sensors.indices.iter().enumerate() {
                    assert_eq!(
                        missing[(k, j, s)],
                        data.plan.masked_flat(p, k + j),
                    );
                }
            }
        }
        // sensors sit on locations that pass the validity filter
        let valid = valid_locations(&apply_plan(&load_source(&cfg).unwrap(), &data.plan).unwrap(), EPS_VALID).unwrap();
        for p in &data.sensors.indices {
            assert!(valid.contains(p));
        }
    }

    #[test]
    fn pipeline_runs_and_artifacts_round_trip() {
        let cfg = tiny_cfg();
        let data = prepare_data(&cfg).unwrap();
        let out = run_on_prepared(&cfg, &data).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.report.normalized_error_mean.is_finite());

        let dir = std::env::temp_dir().join(format!("cs_shred_run_{}", std::process::id()));
        save_run(&out, &data, &dir).unwrap();
        let report_back =
            MetricReport::from_text(&fs::read_to_string(dir.join("metrics.txt")).unwrap()).unwrap();
        assert_eq!(report_back, out.report);
        let params_back =
            load_checkpoint(&dir.join("checkpoint.bin"), &dir.join("checkpoint.txt")).unwrap();
        assert_eq!(params_back, out.params);
        let cfg_back = RunConfig::from_text(&fs::read_to_string(dir.join("config.txt")).unwrap())
            .unwrap();
        assert_eq!(cfg_back, cfg);
        let plan_back =
            SubsamplePlan::from_text(&fs::read_to_string(dir.join("plan.txt")).unwrap()).unwrap();
        assert_eq!(plan_back, data.plan);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = tiny_cfg();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn compare_requires_shared_corruption() {
        let a = tiny_cfg();
        let mut b = tiny_cfg();
        b.model = ModelKind::Shred;
        check_comparable(&a, &b).unwrap();
        b.sub_cols += 1;
        match check_comparable(&a, &b) {
            Err(PipelineError::ConfigMismatch { what }) => assert_eq!(what, "sub_cols"),
            other => panic!("expected ConfigMismatch, got {other:?}"),
        }
        let mut c = tiny_cfg();
        c.seed = 999;
        if let DataSource::Synthetic(sp) = &mut c.source {
            sp.seed = 999;
        }
        assert!(check_comparable(&a, &c).is_err());
    }

    #[test]
    fn recover_field_restores_sparse_signals() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::FourierSparse,
            n_x: 6,
            n_y: 6,
            n_t: 64,
            n_modes: 2,
            amplitude: AmplitudeLaw::Constant,
            noise_rel: 0.0,
            seed: 21,
        };
        let original = crate::synth::generate_synthetic(&spec).unwrap();
        let plan = make_plan(original.dims(), 2, 20, 21).unwrap();
        let corrupted = apply_plan(&original, &plan).unwrap();
        let (recovered, stats) = recover_field(
            &corrupted,
            Some(&plan),
            SolverConfig::default(),
            AvailabilityMode::Mask,
        )
        .unwrap();
        assert_eq!(stats.solved + stats.cache_hits + stats.passed_through, 36);
        // corrupted pixels should come back close to the truth
        let mut err = 0.0;
        let mut norm = 0.0;
        for (a, b) in recovered.data().iter().zip(original.data()) {
            err += (a - b) * (a - b);
            norm += b * b;
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 0.05, "relative recovery error {rel}");
        // untouched pixels pass through bit for bit
        for p in 0..original.n_points() {
            let y = p % 6;
            if !plan.y_sub.contains(&y) {
                assert_eq!(recovered.series(p), original.series(p), "pixel {p}");
            }
        }
    }
}
