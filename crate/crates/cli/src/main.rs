use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scse_cli::config::{Overrides, RunConfig};
use scse_cli::gradcheck::{self, Target};
use scse_cli::{ablate, eval, paramcount, report, train, EXIT_FAILURE};
use scse_core::data::Split;
use scse_core::gradsuite::GradReport;
use scse_core::se::SeVariant;
use scse_core::zoo::{ArchKind, ArchSpec};
use scse_core::{Error, Result};

/// Concurrent spatial and channel squeeze & excitation for segmentation networks.
#[derive(Parser)]
#[command(name = "scse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of a layer, SE block, loss or whole network.
    Gradcheck(GradcheckArgs),
    /// Vanilla parameter count and SE overhead.
    Paramcount(ParamcountArgs),
    /// Train one network; writes checkpoint, epoch log and manifest.
    Train(TrainArgs),
    /// Dice of a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate every (architecture, SE variant) cell.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layer, block or loss name, or `net` for whole networks.
    #[arg(long)]
    block: String,
    /// Finite-difference step (largest step for `net`).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture for `net`; all three when omitted.
    #[arg(long)]
    arch: Option<String>,
    /// SE variant for `net`; all four when omitted.
    #[arg(long)]
    se: Option<String>,
    /// Fraction of each parameter tensor checked for `net`.
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    /// Input height and width for `net`.
    #[arg(long, default_value_t = 16)]
    size: usize,
}

#[derive(Args)]
struct ParamcountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    se: Option<String>,
    /// `desk` or `paper`; replaces the configured architecture widths.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    se: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, required_unless_present = "passthrough")]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Score the ground truth against itself.
    #[arg(long)]
    passthrough: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "unet,sdnet,densenet")]
    archs: String,
    #[arg(long, default_value = "none,cse,sse,scse")]
    variants: String,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let o = Overrides {
            arch: self.arch.as_deref().map(str::parse).transpose()?,
            se: self.se.as_deref().map(str::parse).transpose()?,
            seed: self.seed,
            epochs: self.epochs,
            out: self.out.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Paramcount(a) => cmd_paramcount(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    result.unwrap_or_else(|e| report(&e))
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let target: Target = a.block.parse()?;
    let archs = match (&a.arch, target) {
        (Some(s), _) => vec![s.parse()?],
        (None, Target::Net) => ArchKind::ALL.to_vec(),
        (None, _) => vec![ArchKind::Unet],
    };
    let variants = match (&a.se, target) {
        (Some(s), _) => vec![s.parse()?],
        (None, Target::Net) => SeVariant::ALL.to_vec(),
        (None, _) => vec![SeVariant::Scse],
    };
    let mut reports: Vec<GradReport> = Vec::new();
    for &arch in &archs {
        for &se in &variants {
            let o = gradcheck::Options {
                target,
                eps: a.eps,
                seed: a.seed,
                arch,
                se,
                fraction: a.fraction,
                size: a.size,
            };
            let r = gradcheck::run(&o)?;
            print!("{}", gradcheck::render(&r));
            reports.push(r);
            if target != Target::Net {
                break;
            }
        }
        if target != Target::Net {
            break;
        }
    }
    Ok(verdict(reports.iter().all(GradReport::passed)))
}

fn cmd_paramcount(a: ParamcountArgs) -> Result<ExitCode> {
    let mut spec = match &a.config {
        Some(p) => RunConfig::load(p)?.arch,
        None => ArchSpec::desk(ArchKind::Unet, SeVariant::Scse),
    };
    if let Some(s) = &a.arch {
        spec.kind = s.parse()?;
    }
    if let Some(s) = &a.se {
        spec.se_variant = s.parse()?;
    }
    if let Some(name) = &a.preset {
        spec = ArchSpec::preset(name, spec.kind, spec.se_variant)?;
    }
    spec.validate()?;
    print!("{}", paramcount::render(&paramcount::count(&spec)?));
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.run.resolve()?;
    let out = train::run(&cfg)?;
    print!("{}", scse_core::train::log_csv(&out.report.log));
    println!(
        "best epoch {} of {}; wrote {}, {} and {} in {}",
        out.report.best_epoch,
        out.report.log.len(),
        train::CHECKPOINT,
        train::LOG,
        train::MANIFEST,
        out.dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = a.run.resolve()?;
    let split: Split = a.split.parse()?;
    let predictor = match (&a.checkpoint, a.passthrough) {
        (_, true) => eval::Predictor::PassThrough,
        (Some(p), false) => eval::Predictor::Checkpoint(p),
        (None, false) => return Err(Error::Config("--checkpoint is required".into())),
    };
    let out = eval::run(&cfg, predictor, split)?;
    print!(
        "{}",
        eval::summary_csv(&out.report, out.report.per_sample.len())
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(a: AblateArgs) -> Result<ExitCode> {
    let cfg = a.run.resolve()?;
    let opts = ablate::Options {
        archs: ablate::parse_list(&a.archs)?,
        variants: ablate::parse_list(&a.variants)?,
        threads: ablate::threads_from_env()?,
    };
    let grid = ablate::run(&cfg, &opts)?;
    print!("{}", grid.render());
    Ok(verdict(!grid.failed()))
}
