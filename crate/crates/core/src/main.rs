use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use omniweave::config::RunConfig;
use omniweave::data::Split;
use omniweave::model::Checkpoint;
use omniweave::numeric::{OpKind, Real};
use omniweave::pipeline::{self, StageRun};
use omniweave::session::MetricsSink;
use omniweave::verify::{gradcheck, GradOptions};
use omniweave::{Error, Result};

#[derive(Parser)]
#[command(name = "omniweave", version, about = "Multimodal multitask transformer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint or report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append per-step JSON lines here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Compute in 64-bit floats.
    #[arg(long = "f64")]
    f64: bool,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Stop after this many steps of the stage and write a resumable
    /// checkpoint.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Matmul,
    Add,
    Softmax,
    LayerNorm,
    Gelu,
    Gather,
}

#[derive(Subcommand)]
enum Command {
    /// Unimodal masked pretraining.
    Pretrain1(StageArgs),
    /// Pairwise masked pretraining from a stage-1 checkpoint.
    Pretrain2(StageArgs),
    /// Supervised multitask training, then test-split evaluation.
    Train {
        #[command(flatten)]
        stage: StageArgs,
        /// Start from fresh parameters without a stage-2 checkpoint.
        #[arg(long)]
        cold_start: bool,
    },
    /// Evaluate every task of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train adapters on frozen embeddings of held-out modalities.
    Adapt(Common),
    /// Finite-difference check of all stage losses on a miniature model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Print the default configuration.
    Defaults,
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::config("--config", format!("{}: {io}", p.display())),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint(c: &Common) -> Result<Option<Checkpoint>> {
    c.checkpoint.as_deref().map(Checkpoint::load).transpose()
}

fn require_checkpoint(c: &Common) -> Result<Checkpoint> {
    checkpoint(c)?.ok_or_else(|| Error::config("--checkpoint", "this command needs an input checkpoint"))
}

fn metrics(c: &Common, cfg: &RunConfig) -> Result<MetricsSink> {
    match c.metrics.as_ref().or(cfg.paths.metrics.as_ref()) {
        Some(p) => MetricsSink::append(p),
        None => Ok(MetricsSink::memory()),
    }
}

fn out_path(c: &Common, cfg: &RunConfig, fallback: &str) -> PathBuf {
    c.out.clone().or_else(|| cfg.paths.checkpoint.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn summary<T>(stage: u32, run: &StageRun<T>, out: &Path) -> serde_json::Value {
    json!({
        "stage": stage,
        "complete": run.complete,
        "steps": run.losses.len(),
        "final_loss": run.losses.last(),
        "checkpoint": out.display().to_string(),
    })
}

fn pretrain_cmd<T: Real>(stage: u32, a: &StageArgs) -> Result<()> {
    let cfg = config(&a.common)?;
    let suite = cfg.suite()?;
    let input = checkpoint(&a.common)?;
    let mut sink = metrics(&a.common, &cfg)?;
    let run = pipeline::pretrain::<T>(stage, &cfg, &suite, input.as_ref(), &mut sink, a.stop_after)?;
    let out = out_path(&a.common, &cfg, &format!("stage{stage}.owck"));
    run.checkpoint.save(&out)?;
    eprintln!("{}", summary(stage, &run, &out));
    Ok(())
}

fn train_cmd<T: Real>(a: &StageArgs, cold: bool) -> Result<()> {
    let cfg = config(&a.common)?;
    let suite = cfg.suite()?;
    let input = if cold { None } else { checkpoint(&a.common)? };
    let mut sink = metrics(&a.common, &cfg)?;
    let mut run = pipeline::train::<T>(&cfg, &suite, input.as_ref(), cold, &mut sink, a.stop_after)?;
    let out = out_path(&a.common, &cfg, "stage3.owck");
    run.checkpoint.save(&out)?;
    eprintln!("{}", summary(3, &run, &out));
    if run.complete {
        let reports = pipeline::evaluate_all(&mut run.bundle, &suite, Split::Test)?;
        write_json(None, &serde_json::to_value(reports)?)?;
    }
    Ok(())
}

fn eval_cmd<T: Real>(c: &Common, split: SplitArg) -> Result<()> {
    let cfg = config(c)?;
    let ck = require_checkpoint(c)?;
    let mut bundle = pipeline::trained_bundle::<T>(&cfg, &ck)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let reports = pipeline::evaluate_all(&mut bundle, &cfg.suite()?, split)?;
    write_json(c.out.as_deref(), &serde_json::to_value(reports)?)
}

fn adapt_cmd<T: Real>(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let ck = require_checkpoint(c)?;
    let bundle = pipeline::trained_bundle::<T>(&cfg, &ck)?;
    let (reports, before, after) = pipeline::adapt_all(&cfg, &bundle, &cfg.suite()?)?;
    if before != after {
        return Err(Error::Invalid("adaptation changed the frozen bundle".into()));
    }
    let value = json!({ "reports": reports, "bundle_checksum": before, "bundle_unchanged": true });
    write_json(c.out.as_deref(), &value)
}

fn gradcheck_cmd(c: &Common, fault: Option<Fault>) -> Result<()> {
    let cfg = config(c)?;
    let fault = fault.map(|f| match f {
        Fault::Matmul => OpKind::MatMul,
        Fault::Add => OpKind::Add,
        Fault::Softmax => OpKind::Softmax,
        Fault::LayerNorm => OpKind::LayerNorm,
        Fault::Gelu => OpKind::Gelu,
        Fault::Gather => OpKind::Gather,
    });
    let report = gradcheck(&cfg, &GradOptions { fault, ..GradOptions::default() })?;
    let value = json!({ "passed": report.passed(), "worst": report.worst(), "tolerance": report.tolerance, "groups": report.groups });
    write_json(c.out.as_deref(), &value)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("worst relative error {:.3e} exceeds {:.0e}", report.worst(), report.tolerance)))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    macro_rules! precision {
        ($flag:expr, $f:ident($($arg:expr),*)) => {
            if $flag { $f::<f64>($($arg),*) } else { $f::<f32>($($arg),*) }
        };
    }
    match cli.command {
        Command::Pretrain1(a) => precision!(a.common.f64, pretrain_cmd(1, &a)),
        Command::Pretrain2(a) => precision!(a.common.f64, pretrain_cmd(2, &a)),
        Command::Train { stage, cold_start } => precision!(stage.common.f64, train_cmd(&stage, cold_start)),
        Command::Eval { common, split } => precision!(common.f64, eval_cmd(&common, split)),
        Command::Adapt(common) => precision!(common.f64, adapt_cmd(&common)),
        Command::Gradcheck { common, inject_fault } => gradcheck_cmd(&common, inject_fault),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
