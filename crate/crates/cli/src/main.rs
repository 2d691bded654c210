use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dftr::config::{RunConfig, RESOLVED_FILE};
use dftr::data::pnm::write_atomic;
use dftr::data::{write_dataset, Dataset, SceneSpec, ShapeKind};
use dftr::infer::{infer_dir, Predictor};
use dftr::metrics::evaluate_dir;
use dftr::train::{Checkpoint, StepLog, Trainer};
use dftr::verify::{self, Suite};
use dftr::Error;

/// Depth-supervised fusion transformer for salient object detection.
#[derive(Parser)]
#[command(name = "dftr", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic RGB / depth / mask dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoints, train.log and config.resolved.
    Train(TrainArgs),
    /// Predict saliency maps for every .ppm in a directory.
    Infer(InferArgs),
    /// Score predicted maps against ground-truth masks.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Comma-separated subset of disk, rectangle, triangle, blob.
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<ShapeKind>>,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Component combination a-e; overrides the decoder flags.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Do not echo per-step log lines to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of .ppm images, or a dataset root with an rgb/ subdirectory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model configuration; defaults to config.resolved next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write depth estimates to <out>/depth/.
    #[arg(long)]
    save_depth: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: Suite,
}

/// Process exit status for each failure class.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } => 4,
        Error::ConfigMismatch(_) => 5,
        Error::Pairing(_) => 6,
        _ => 1,
    }
}

/// Raised when a verification check fails; exit 7.
struct VerifyFailed(usize);

enum Failure {
    Run(Error),
    Verify(VerifyFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn create_dir(dir: &Path) -> dftr::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn gen(a: GenArgs) -> dftr::Result<()> {
    let mut run = RunConfig::default();
    run.data.size = a.size;
    if let Some(shapes) = a.shapes {
        run.data.shapes = shapes;
    }
    run.train.seed = a.seed;
    run.validate()?;
    let spec = SceneSpec {
        size: a.size,
        shapes: run.data.shapes.clone(),
        seed: a.seed,
    };
    let manifest = write_dataset(&a.out, &spec, a.n)?;
    write_atomic(&a.out.join(RESOLVED_FILE), run.to_text().as_bytes())?;
    let mut counts = String::new();
    for kind in ShapeKind::ALL {
        let n = manifest.iter().filter(|m| m.shape == kind).count();
        let _ = write!(counts, " {kind}={n}");
    }
    println!("wrote {} samples ({}x{}) to {}:{counts}", manifest.len(), a.size, a.size, a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> dftr::Result<RunConfig> {
    let mut run = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(ab) = &a.ablation {
        run.set("decoder.ablation", ab)?;
    }
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        run.set(k.trim(), v.trim())?;
    }
    run.validate()?;
    Ok(run)
}

fn train(a: TrainArgs) -> dftr::Result<()> {
    let run = resolve_train_config(&a)?;
    let data = Dataset::load(&a.data)?;
    if data.is_empty() {
        return Err(Error::Config(format!("dataset {} has no samples", a.data.display())));
    }
    create_dir(&a.out)?;
    write_atomic(&a.out.join(RESOLVED_FILE), run.to_text().as_bytes())?;

    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&run.model, &run.train, data.samples, run.data.augment, &Checkpoint::load(path)?)?,
        None => Trainer::new(&run.model, &run.train, data.samples, run.data.augment)?,
    };
    let log_path = a.out.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(trainer.step > 0)
        .write(true)
        .truncate(trainer.step == 0)
        .open(&log_path)
        .map_err(|e| io_error(&log_path, e))?;
    let header = StepLog::tsv_header();
    if trainer.step == 0 {
        writeln!(log, "{header}").map_err(|e| io_error(&log_path, e))?;
    }
    if !a.quiet {
        println!("{header}");
    }
    let per_epoch = trainer.steps_per_epoch();
    let every = run.train.checkpoint_every;
    let out = a.out.clone();
    trainer.run_until(usize::MAX, |t, line| {
        let text = line.to_tsv();
        writeln!(log, "{text}").map_err(|e| io_error(&log_path, e))?;
        if !a.quiet {
            println!("{text}");
        }
        let done = t.step;
        if every > 0 && done % per_epoch == 0 && (done / per_epoch) % every == 0 && done < t.total_steps() {
            t.checkpoint().save(&out.join(format!("epoch_{:04}.ckpt", done / per_epoch)))?;
        }
        Ok(())
    })?;
    let final_path = a.out.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    eprintln!(
        "trained {} steps; parameters {}; checkpoint {}",
        trainer.step,
        trainer.params.digest(),
        final_path.display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> dftr::Result<()> {
    let predictor = Predictor::load(&a.ckpt, a.config.as_deref())?;
    let names = infer_dir(&predictor, &a.input, &a.out, a.save_depth)?;
    let cfg_src = a
        .config
        .clone()
        .unwrap_or_else(|| a.ckpt.parent().unwrap_or(Path::new(".")).join(RESOLVED_FILE));
    let cfg = RunConfig::load(&cfg_src)?;
    write_atomic(&a.out.join(RESOLVED_FILE), cfg.to_text().as_bytes())?;
    println!("wrote {} saliency maps to {}", names.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> dftr::Result<()> {
    let report = evaluate_dir(&a.pred, &a.gt)?;
    let text = report.to_tsv();
    write_atomic(&a.report, text.as_bytes())?;
    print!("{text}");
    for (name, why) in &report.skipped {
        eprintln!("skipped {name}: {why}");
    }
    Ok(())
}

fn run_verify(a: VerifyArgs) -> Result<(), Failure> {
    let checks = verify::run(a.suite)?;
    println!("status\tcheck\tmeasured\ttolerance");
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(Failure::Verify(VerifyFailed(failed)));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => gen(a).map_err(Failure::from),
        Cmd::Train(a) => train(a).map_err(Failure::from),
        Cmd::Infer(a) => infer(a).map_err(Failure::from),
        Cmd::Eval(a) => eval(a).map_err(Failure::from),
        Cmd::Verify(a) => run_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verify(VerifyFailed(n))) => {
            eprintln!("error: {n} verification checks failed");
            ExitCode::from(7)
        }
    }
}
