//! Command line front end. Each subcommand is a thin wrapper over the
//! library: parse flags, call in, print a short summary. Run directories
//! collect every artifact a run produces; failures leave an error record
//! in the same place.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use ndarray::Array3;

use cs_shred::bpdn::{AvailabilityMode, Recovery};
use cs_shred::field::Field;
use cs_shred::metrics::{evaluate, MetricReport};
use cs_shred::net::load_checkpoint;
use cs_shred::pipeline::{
    check_comparable, comparison_text, prepare_data, recover_field, recovery_for,
    run_on_prepared, save_run, CompareOutcome, DataSource, ModelKind, PipelineError, RunConfig,
};
use cs_shred::subsample::{apply_plan, make_plan, SubsamplePlan};
use cs_shred::synth::generate_synthetic;

#[derive(Parser)]
#[command(
    name = "cs-shred",
    version,
    about = "Spatiotemporal field reconstruction from sparse sensors with gappy time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic field in the binary field format
    Generate(GenerateArgs),
    /// Draw a column/snapshot dropout plan and apply it to a field
    Subsample(SubsampleArgs),
    /// Train a model and write the full artifact set of the run
    Train(TrainArgs),
    /// Re-score a finished run's checkpoint on its test split
    Evaluate(EvaluateArgs),
    /// Train two configs on identical corrupted data and tabulate both
    Compare(CompareArgs),
    /// Run the l1 recovery alone, on one window or a whole field
    Recover(RecoverArgs),
}

/// Config-file keys as flags. Any flag given here overrides the matching
/// entry of `--config`, through the same parser, so the two cannot drift.
#[derive(Args, Default)]
struct Overrides {
    /// cs-shred or shred
    #[arg(long)]
    model: Option<String>,
    /// master seed for every random stream
    #[arg(long)]
    seed: Option<u64>,
    /// file or synthetic
    #[arg(long)]
    source: Option<String>,
    /// binary field to load when the source is a file
    #[arg(long)]
    field_path: Option<PathBuf>,
    /// fourier-sparse, traveling-waves or gaussian-blobs
    #[arg(long)]
    synth_kind: Option<String>,
    /// generator grid rows
    #[arg(long)]
    n_x: Option<usize>,
    /// generator grid columns
    #[arg(long)]
    n_y: Option<usize>,
    /// generator snapshots
    #[arg(long)]
    n_t: Option<usize>,
    /// active frequencies per pixel
    #[arg(long)]
    n_modes: Option<usize>,
    /// mode amplitude at the first mode
    #[arg(long)]
    amp_base: Option<f64>,
    /// exponential amplitude falloff per mode, 0 for constant
    #[arg(long)]
    amp_rate: Option<f64>,
    /// gaussian noise level relative to the field's std
    #[arg(long)]
    noise_rel: Option<f64>,
    /// columns the corruption hits
    #[arg(long)]
    sub_cols: Option<usize>,
    /// snapshots the corruption hits
    #[arg(long)]
    sub_snaps: Option<usize>,
    /// sensors to place
    #[arg(long)]
    n_sensors: Option<usize>,
    /// window length fed to the encoder
    #[arg(long)]
    lag: Option<usize>,
    /// min-max or z-score
    #[arg(long)]
    normalization: Option<String>,
    /// restrict sensors to locations with signal
    #[arg(long)]
    filter_valid: Option<bool>,
    /// mask, sentinel-nonzero or sentinel-positive
    #[arg(long)]
    availability: Option<String>,
    /// ista, fista or sparsa
    #[arg(long)]
    solver: Option<String>,
    /// fixed or scaled
    #[arg(long)]
    lambda_rule: Option<String>,
    /// penalty weight, or its scale under the scaled rule
    #[arg(long)]
    lambda: Option<f64>,
    /// solver iteration cap
    #[arg(long)]
    max_iters: Option<usize>,
    /// solver stopping tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// memoize recovered windows
    #[arg(long)]
    cache: Option<bool>,
    /// LSTM state width
    #[arg(long)]
    hidden_size: Option<usize>,
    /// stacked LSTM layers
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// first decoder layer width
    #[arg(long)]
    l1: Option<usize>,
    /// second decoder layer width
    #[arg(long)]
    l2: Option<usize>,
    /// dropout rate between LSTM layers
    #[arg(long)]
    dropout: Option<f64>,
    /// give each gate its own input matrix
    #[arg(long)]
    split_input_weights: Option<bool>,
    /// linear or relu
    #[arg(long)]
    final_activation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// validations without improvement before stopping
    #[arg(long)]
    patience: Option<usize>,
    /// scheduler period
    #[arg(long)]
    epoch_step: Option<usize>,
    /// plateau or step
    #[arg(long)]
    scheduler: Option<String>,
    /// mean squared error weight
    #[arg(long)]
    lambda_l2: Option<f64>,
    /// mean absolute error weight
    #[arg(long)]
    lambda_l1: Option<f64>,
    /// snr penalty weight
    #[arg(long)]
    lambda_snr: Option<f64>,
    /// decoupled weight decay
    #[arg(long)]
    weight_decay: Option<f64>,
    /// ceiling on the inverse-snr term
    #[arg(long)]
    snr_cap: Option<f64>,
    /// measure snr against the prediction's own power
    #[arg(long)]
    snr_from_prediction: Option<bool>,
    /// compute the l1 term on the residual instead of the prediction
    #[arg(long)]
    mae_on_residual: Option<bool>,
}

impl Overrides {
    fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! push {
            ($key:literal, $field:expr) => {
                if let Some(v) = &$field {
                    s.push_str(&format!(concat!($key, " {}\n"), v));
                }
            };
        }
        push!("model", self.model);
        push!("seed", self.seed);
        push!("source", self.source);
        if let Some(p) = &self.field_path {
            s.push_str(&format!("field_path {}\n", p.display()));
        }
        push!("synth_kind", self.synth_kind);
        push!("n_x", self.n_x);
        push!("n_y", self.n_y);
        push!("n_t", self.n_t);
        push!("n_modes", self.n_modes);
        push!("amp_base", self.amp_base);
        push!("amp_rate", self.amp_rate);
        push!("noise_rel", self.noise_rel);
        push!("sub_cols", self.sub_cols);
        push!("sub_snaps", self.sub_snaps);
        push!("n_sensors", self.n_sensors);
        push!("lag", self.lag);
        push!("normalization", self.normalization);
        push!("filter_valid", self.filter_valid);
        push!("availability", self.availability);
        push!("solver", self.solver);
        push!("lambda_rule", self.lambda_rule);
        push!("lambda", self.lambda);
        push!("max_iters", self.max_iters);
        push!("tol", self.tol);
        push!("cache", self.cache);
        push!("hidden_size", self.hidden_size);
        push!("hidden_layers", self.hidden_layers);
        push!("l1", self.l1);
        push!("l2", self.l2);
        push!("dropout", self.dropout);
        push!("split_input_weights", self.split_input_weights);
        push!("final_activation", self.final_activation);
        push!("epochs", self.epochs);
        push!("batch_size", self.batch_size);
        push!("lr", self.lr);
        push!("patience", self.patience);
        push!("epoch_step", self.epoch_step);
        push!("scheduler", self.scheduler);
        push!("lambda_l2", self.lambda_l2);
        push!("lambda_l1", self.lambda_l1);
        push!("lambda_snr", self.lambda_snr);
        push!("weight_decay", self.weight_decay);
        push!("snr_cap", self.snr_cap);
        push!("snr_from_prediction", self.snr_from_prediction);
        push!("mae_on_residual", self.mae_on_residual);
        s
    }
}

fn load_config(config: Option<&Path>, over: &Overrides) -> Result<RunConfig, PipelineError> {
    let base = match config {
        Some(p) => RunConfig::from_text(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    RunConfig::from_text_over(base, &over.to_text())
}

#[derive(Args)]
struct GenerateArgs {
    /// output path for the field binary; a .label sidecar lands next to it
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn cmd_generate(a: GenerateArgs) -> Result<(), PipelineError> {
    let cfg = load_config(None, &a.overrides)?;
    let spec = match &cfg.source {
        DataSource::Synthetic(sp) => sp,
        DataSource::File(_) => {
            return Err(PipelineError::Config("generate needs a synthetic source".into()))
        }
    };
    let field = generate_synthetic(spec)?;
    field.write_binary(&a.out)?;
    let (n_x, n_y, n_t) = field.dims();
    println!("wrote {} ({n_x}x{n_y}x{n_t}, {}, seed {})", a.out.display(), spec.kind, spec.seed);
    Ok(())
}

#[derive(Args)]
struct SubsampleArgs {
    /// field binary to corrupt
    #[arg(long)]
    field: PathBuf,
    /// columns to zero
    #[arg(long)]
    cols: usize,
    /// snapshots to zero; the final snapshot is always among them
    #[arg(long)]
    snaps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// directory receiving plan.txt and subsampled.bin
    #[arg(long)]
    out: PathBuf,
}

fn cmd_subsample(a: SubsampleArgs) -> Result<(), PipelineError> {
    let field = Field::read_binary(&a.field)?;
    let plan = make_plan(field.dims(), a.cols, a.snaps, a.seed)?;
    let corrupted = apply_plan(&field, &plan)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("plan.txt"), plan.to_text())?;
    corrupted.write_binary(&a.out.join("subsampled.bin"))?;
    println!(
        "wrote {} ({} columns x {} snapshots zeroed)",
        a.out.display(),
        plan.y_sub.len(),
        plan.t_sub.len()
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// key value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// run directory, default runs/<model>-seed<seed>-<unix time>
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{}-seed{}-{secs}", cfg.model, cfg.seed))
}

fn cmd_train(a: TrainArgs) -> Result<(), PipelineError> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let out_dir = a.out.unwrap_or_else(|| default_run_dir(&cfg));
    let report = guarded(&out_dir, "train", || {
        let data = prepare_data(&cfg)?;
        let outcome = run_on_prepared(&cfg, &data)?;
        save_run(&outcome, &data, &out_dir)?;
        Ok(outcome.report)
    })?;
    print!("{}", report.to_text());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    /// finished run directory with config.txt and checkpoint files
    #[arg(long)]
    run: PathBuf,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), PipelineError> {
    let cfg = RunConfig::from_text(&fs::read_to_string(a.run.join("config.txt"))?)?;
    let params = load_checkpoint(&a.run.join("checkpoint.bin"), &a.run.join("checkpoint.txt"))?;
    let data = prepare_data(&cfg)?;
    let recovery = recovery_for(&cfg);
    let (n_x, n_y, _) = data.dims;
    let (report, _) = evaluate(&params, recovery.as_ref(), &data.test_ds, &data.scaler, n_x, n_y)?;
    print!("{}", report.to_text());
    if let Some(saved) =
        fs::read_to_string(a.run.join("metrics.txt")).ok().and_then(|t| MetricReport::from_text(&t))
    {
        println!("matches saved metrics: {}", saved == report);
    }
    Ok(())
}

#[derive(Args)]
struct CompareArgs {
    /// config for run a
    #[arg(long)]
    config_a: PathBuf,
    /// config for run b; default is a's config with the model switched
    #[arg(long)]
    config_b: Option<PathBuf>,
    /// directory receiving a/, b/ and comparison.txt
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_compare(a: CompareArgs) -> Result<(), PipelineError> {
    let cfg_a = RunConfig::from_text(&fs::read_to_string(&a.config_a)?)?;
    let cfg_b = match &a.config_b {
        Some(p) => RunConfig::from_text(&fs::read_to_string(p)?)?,
        None => {
            let mut b = cfg_a.clone();
            b.model = match b.model {
                ModelKind::CsShred => ModelKind::Shred,
                ModelKind::Shred => ModelKind::CsShred,
            };
            b
        }
    };
    let out_dir = a.out.unwrap_or_else(|| default_run_dir(&cfg_a));
    let text = guarded(&out_dir, "compare", || {
        check_comparable(&cfg_a, &cfg_b)?;
        let data = prepare_data(&cfg_a)?;
        let run_a = run_on_prepared(&cfg_a, &data)?;
        let run_b = run_on_prepared(&cfg_b, &data)?;
        save_run(&run_a, &data, &out_dir.join("a"))?;
        save_run(&run_b, &data, &out_dir.join("b"))?;
        let text = comparison_text(&CompareOutcome { a: run_a, b: run_b });
        fs::write(out_dir.join("comparison.txt"), &text)?;
        Ok(text)
    })?;
    print!("{text}");
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["window", "field"]))]
struct RecoverArgs {
    /// text window, one sample per line; in mask mode the token x marks a gap
    #[arg(long)]
    window: Option<PathBuf>,
    /// field binary to recover pixel by pixel
    #[arg(long)]
    field: Option<PathBuf>,
    /// subsample plan giving ground-truth missingness for the field
    #[arg(long, requires = "field")]
    plan: Option<PathBuf>,
    /// recovered window text or field binary; windows print to stdout if absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_window(text: &str, mask_mode: bool) -> Result<(Vec<f64>, Vec<bool>), PipelineError> {
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let tok = raw.trim();
        if tok.is_empty() || tok.starts_with('#') {
            continue;
        }
        if tok == "x" {
            if !mask_mode {
                return Err(PipelineError::Config(format!(
                    "line {}: the x gap marker needs availability mask",
                    i + 1
                )));
            }
            values.push(0.0);
            missing.push(true);
        } else {
            let v: f64 = tok.parse().map_err(|_| {
                PipelineError::Config(format!("line {}: bad sample: {tok}", i + 1))
            })?;
            values.push(v);
            missing.push(false);
        }
    }
    if values.is_empty() {
        return Err(PipelineError::Config("empty window".into()));
    }
    Ok((values, missing))
}

fn cmd_recover(a: RecoverArgs) -> Result<(), PipelineError> {
    let cfg = load_config(None, &a.overrides)?;
    if let Some(path) = &a.window {
        let mask_mode = cfg.availability == AvailabilityMode::Mask;
        let (values, missing) = parse_window(&fs::read_to_string(path)?, mask_mode)?;
        let lag = values.len();
        let mut inputs = Array3::zeros((1, lag, 1));
        let mut mask = Array3::from_elem((1, lag, 1), false);
        for (j, (&v, &m)) in values.iter().zip(&missing).enumerate() {
            inputs[(0, j, 0)] = v;
            mask[(0, j, 0)] = m;
        }
        let recovery = Recovery::new(cfg.solver_config(), cfg.availability, false);
        let (recovered, stats) =
            recovery.recover_batch(&inputs, mask_mode.then_some(&mask))?;
        let mut text = String::new();
        for j in 0..lag {
            text.push_str(&format!("{}\n", recovered[(0, j, 0)]));
        }
        match &a.out {
            Some(p) => {
                fs::write(p, text)?;
                println!("wrote {} ({} gaps filled)", p.display(), missing.iter().filter(|&&m| m).count());
            }
            None => print!("{text}"),
        }
        log::info!(
            "windows solved {}, passed through {}, all missing {}",
            stats.solved,
            stats.passed_through,
            stats.all_missing
        );
    } else {
        let field = Field::read_binary(a.field.as_ref().unwrap())?;
        let plan = match &a.plan {
            Some(p) => Some(SubsamplePlan::from_text(&fs::read_to_string(p)?)?),
            None => None,
        };
        if cfg.availability == AvailabilityMode::Mask && plan.is_none() {
            return Err(PipelineError::Config(
                "availability mask needs --plan for ground-truth missingness".into(),
            ));
        }
        let out = a.out.as_ref().ok_or_else(|| {
            PipelineError::Config("field recovery needs --out for the recovered binary".into())
        })?;
        let (recovered, stats) =
            recover_field(&field, plan.as_ref(), cfg.solver_config(), cfg.availability)?;
        recovered.write_binary(out)?;
        println!(
            "wrote {} (solved {}, cache hits {}, passed through {}, all missing {})",
            out.display(),
            stats.solved,
            stats.cache_hits,
            stats.passed_through,
            stats.all_missing
        );
    }
    Ok(())
}

/// Run `body`; on failure leave a structured error record in the run
/// directory before bubbling the error up.
fn guarded<T>(
    dir: &Path,
    command: &str,
    body: impl FnOnce() -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    body().map_err(|err| {
        let mut s = format!("status failed\ncommand {command}\nerror {err}\n");
        let mut src = std::error::Error::source(&err);
        while let Some(e) = src {
            s.push_str(&format!("cause {e}\n"));
            src = e.source();
        }
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join("error.txt"), s);
        }
        err
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Subsample(a) => cmd_subsample(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Recover(a) => cmd_recover(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
