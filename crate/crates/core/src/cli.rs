//! Command-line experiment runner.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
//! run fails (invariant violation, divergence, failed gradient check).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, RunConfig};
use crate::diagnostics::{self, SummaryInfo};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig};
use crate::linalg::Rng;
use crate::model::ModelParams;
use crate::synth::{self, Dataset};
use crate::trainer::{self, TrainReport};

/// Stream used for evaluation-time noise so it never collides with the
/// training streams of the same seed.
const NOISE_STREAM: u64 = 0xE7A1;

#[derive(Parser, Debug)]
#[command(name = "rollingq", version, about = "Attention-fusion training and diagnostics on synthetic two-modality data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `--set out_dir=DIR`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Evaluate this checkpoint instead of training a model first.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and export diagnostics.
    Train(RunArgs),
    /// Accuracy and attention mass under increasing noise on one modality.
    EvalNoise(ModelArgs),
    /// Correlation between clean inputs and the attention they receive.
    Correlate(ModelArgs),
    /// Accuracy under attention masking and block averaging.
    Quag(ModelArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Paired runs with and without query rotation.
    DemoCycle(RunArgs),
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit status. Normal output goes to `out`, errors to `err`.
pub fn dispatch<I, S>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::InvalidArgument(_) | Error::Io { .. } => 1,
        _ => 2,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut overrides = args
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &args.out {
        overrides.push(("out_dir".into(), dir.display().to_string()));
    }
    RunConfig::layered(RunConfig::default(), args.config.as_deref(), &overrides)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains under `cfg` and writes the diagnostics, summary, scatter dump and
/// checkpoint into `cfg.out_dir`.
pub fn train_and_export(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.echo()?;
    let report = trainer::run(&cfg.train_config(), &cfg.data_spec())?;
    let info = SummaryInfo {
        // the output location is left out so identical runs export identical bytes
        config: cfg.entries().into_iter().filter(|(k, _)| k != "out_dir").collect(),
        events: report.events.clone(),
        rotations_used: report.controller.rotations_used,
        extra: vec![("final_test_accuracy".into(), report.final_test_accuracy.to_string())],
    };
    diagnostics::export(&cfg.out_dir, &report.records, &report.final_scatter, &info)?;
    report.model.save(&cfg.out_dir.join("model.ckpt"), cfg.seed)?;
    Ok(report)
}

fn check_matches(model: &ModelParams, cfg: &RunConfig) -> Result<()> {
    let want = cfg.train_config().model_spec(&cfg.data_spec());
    let got = &model.spec;
    let same = (got.d_in_a, got.d_in_v, got.hidden, got.dim, got.classes)
        == (want.d_in_a, want.d_in_v, want.hidden, want.dim, want.classes);
    if !same {
        return Err(Error::Config(format!(
            "checkpoint shapes {got:?} do not match the configuration {want:?}"
        )));
    }
    Ok(())
}

/// The model to analyse: a loaded checkpoint, or a fresh training run.
fn obtain_model(args: &ModelArgs) -> Result<(RunConfig, ModelParams, Dataset)> {
    let cfg = load_config(&args.run)?;
    cfg.echo()?;
    match &args.checkpoint {
        Some(path) => {
            let (model, _) = ModelParams::load(path)?;
            check_matches(&model, &cfg)?;
            let data = synth::generate(&cfg.data_spec())?;
            Ok((cfg, model, data))
        }
        None => {
            let report = train_and_export(&cfg)?;
            Ok((cfg, report.model, report.dataset))
        }
    }
}

pub fn correlation_for(cfg: &RunConfig, model: &ModelParams, data: &Dataset) -> Result<f64> {
    let mut rng = Rng::new(cfg.seed).fork(NOISE_STREAM);
    diagnostics::noise_attention_correlation(model, &data.test, cfg.noise.modality, &mut rng)
}

pub fn noise_table_for(cfg: &RunConfig, model: &ModelParams, data: &Dataset) -> Result<Vec<diagnostics::NoiseRow>> {
    let rng = Rng::new(cfg.seed).fork(NOISE_STREAM + 1);
    diagnostics::noise_response(model, &data.test, cfg.noise.modality, &cfg.noise.levels, cfg.noise.mode, &rng)
}

fn execute(command: Command, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut text = String::new();
    let code = match command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let report = train_and_export(&cfg)?;
            let last = report.last_record();
            let _ = writeln!(
                text,
                "test_accuracy = {}\nair = {}\nscore_a = {}\nrotations_used = {}\nout_dir = {}",
                last.test_accuracy,
                last.air,
                last.score_a,
                report.controller.rotations_used,
                cfg.out_dir.display()
            );
            0
        }
        Command::EvalNoise(args) => {
            let (cfg, model, data) = obtain_model(&args)?;
            let rows = noise_table_for(&cfg, &model, &data)?;
            let mut csv = String::from("level,accuracy,mean_score\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{},{}", r.level, r.accuracy, r.mean_score);
            }
            write_file(&cfg.out_dir.join("noise_response.csv"), &csv)?;
            text = csv;
            0
        }
        Command::Correlate(args) => {
            let (cfg, model, data) = obtain_model(&args)?;
            let c = correlation_for(&cfg, &model, &data)?;
            text = format!("modality = {}\ncorrelation = {c}\n", cfg.noise.modality);
            write_file(&cfg.out_dir.join("correlation.txt"), &text)?;
            0
        }
        Command::Quag(args) => {
            let (cfg, model, data) = obtain_model(&args)?;
            let rows = diagnostics::quag_ablation(&model, &data.test)?;
            let mut csv = String::from("mode,accuracy\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{}", r.mode.label(), r.accuracy);
            }
            write_file(&cfg.out_dir.join("quag.csv"), &csv)?;
            text = csv;
            0
        }
        Command::Gradcheck {
            instances,
            seed,
            report,
        } => {
            let r = gradcheck::run_suite(&GradCheckConfig {
                instances,
                seed,
                ..GradCheckConfig::default()
            })?;
            text = r.render();
            if let Some(path) = report {
                write_file(&path, &text)?;
            }
            if r.passed() {
                0
            } else {
                2
            }
        }
        Command::DemoCycle(args) => {
            let base = load_config(&args)?;
            base.echo()?;
            let rows = demo_cycle(&base)?;
            let mut csv = String::from("method,final_accuracy,final_air,correlation\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{},{},{}", r.method, r.final_accuracy, r.final_air, r.correlation);
            }
            write_file(&base.out_dir.join("demo_cycle.csv"), &csv)?;
            let _ = writeln!(text, "{:<10} {:>14} {:>10} {:>12}", "method", "final_accuracy", "final_air", "correlation");
            for r in &rows {
                let _ = writeln!(
                    text,
                    "{:<10} {:>14.4} {:>10.4} {:>12.4}",
                    r.method, r.final_accuracy, r.final_air, r.correlation
                );
            }
            0
        }
    };
    let _ = out.write_all(text.as_bytes());
    Ok(code)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoRow {
    pub method: &'static str,
    pub final_accuracy: f64,
    pub final_air: f64,
    pub correlation: f64,
}

/// Trains the vanilla and the rotating arm on identical data and seeds,
/// each exporting into its own subdirectory of `base.out_dir`.
pub fn demo_cycle(base: &RunConfig) -> Result<Vec<DemoRow>> {
    [("vanilla", false), ("rollingq", true)]
        .into_iter()
        .map(|(method, enabled)| {
            let mut cfg = base.clone();
            cfg.train.rollingq_enabled = enabled;
            cfg.out_dir = base.out_dir.join(method);
            let report = train_and_export(&cfg)?;
            let correlation = correlation_for(&cfg, &report.model, &report.dataset)?;
            Ok(DemoRow {
                method,
                final_accuracy: report.final_test_accuracy,
                final_air: report.last_record().air,
                correlation,
            })
        })
        .collect()
}
