//! `ndpnet` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use ndpnet_core::engine::ablation::run_ablation;
use ndpnet_core::engine::diagnostics::gradient_suite;
use ndpnet_core::engine::eval::evaluate;
use ndpnet_core::engine::formats::write_file;
use ndpnet_core::engine::loader::{write_datasets, ImageFormat};
use ndpnet_core::engine::train::{prepare_data, train, TrainOptions};
use ndpnet_core::engine::{load_checkpoint, synth_splits, Config, EvalReport, Split, TrainState};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "NDPNET_OUT";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ndpnet_core::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(ndpnet_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ndpnet", version, about = "Few-shot fine-grained classification with learned descriptor projections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Ppm,
    Nt,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Validation,
    Test,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Config file; documented defaults are used when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `train.lr=0.01`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: $NDPNET_OUT/<command> or runs/<command>].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset in the on-disk layout.
    SynthData {
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 24)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Classes per split as `auxiliary,validation,test`; must sum to --classes.
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "ppm")]
        format: FormatArg,
    },
    /// Episodic training with periodic validation and checkpoints.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from a checkpoint; its stored config is used and overrides still apply.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Test-split accuracy of a checkpoint with a 95% interval.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and test every variant and k of the comparison grid.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Finite-difference checks of every kernel and the episode loss.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Coordinates checked per parameter tensor in the episode checks.
        #[arg(long, default_value_t = 8)]
        max_elements: usize,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            classes,
            per_class,
            size,
            seed,
            splits,
            format,
        } => synth_data(&out, classes, per_class, size, seed, splits, format),
        Command::Train { args, resume } => train_cmd(&args, resume.as_deref()),
        Command::Eval {
            checkpoint,
            overrides,
            out,
            split,
        } => eval_cmd(&checkpoint, &overrides, out, split),
        Command::Ablate { args } => ablate_cmd(&args),
        Command::Gradcheck { seed, max_elements } => gradcheck_cmd(seed, max_elements),
    }
}

fn out_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    })
}

fn resolve_config(args: &ConfigArgs) -> Result<Config> {
    Ok(match &args.config {
        Some(path) => Config::load(path, &args.overrides)?,
        None => Config::parse("", &args.overrides)?,
    })
}

fn echo_config(dir: &Path, config: &Config) -> Result<()> {
    write_file(&dir.join(RESOLVED_CONFIG), config.to_toml().as_bytes())?;
    Ok(())
}

fn default_splits(classes: usize) -> [usize; 3] {
    let held_out = classes / 4;
    [classes - 2 * held_out, held_out, held_out]
}

fn synth_data(
    out: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    splits: Option<Vec<usize>>,
    format: FormatArg,
) -> Result<()> {
    let counts = match splits {
        None => default_splits(classes),
        Some(v) => {
            let counts: [usize; 3] = v
                .try_into()
                .map_err(|v: Vec<usize>| CliError::Usage(format!("--splits needs 3 counts, got {}", v.len())))?;
            if counts.iter().sum::<usize>() != classes {
                return Err(CliError::Usage(format!("--splits {counts:?} does not sum to --classes {classes}")));
            }
            counts
        }
    };
    if size == 0 || !size.is_multiple_of(8) {
        return Err(CliError::Usage(format!("--size {size} must be a positive multiple of 8")));
    }
    let data = synth_splits(counts, per_class, size, seed)?;
    let format = match format {
        FormatArg::Ppm => ImageFormat::Ppm,
        FormatArg::Nt => ImageFormat::Tensor,
    };
    let written = write_datasets(out, &[&data.auxiliary, &data.validation, &data.test], format)?;
    println!(
        "wrote {written} images of {classes} classes ({} auxiliary, {} validation, {} test) to {}",
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

/// Raised by Ctrl-C; training polls it between episodes.
fn interrupt_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let handler_flag = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst)) {
            eprintln!("warning: cannot install interrupt handler: {e}");
        }
        flag
    })
    .clone()
}

fn train_cmd(args: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let (config, state) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let config = Config::parse(&ckpt.config.to_toml(), &args.overrides)?;
            (config, ckpt.state)
        }
        None => {
            let config = resolve_config(args)?;
            let state = TrainState::new(&config)?;
            (config, state)
        }
    };
    let dir = out_dir(args.out.clone(), "train");
    echo_config(&dir, &config)?;
    let data = prepare_data(&config)?;
    let start = Instant::now();
    let report_every = (config.train.episodes / 20).max(1);
    let flag = interrupt_flag();
    flag.store(false, Ordering::SeqCst);
    let mut options = TrainOptions {
        out_dir: Some(dir.clone()),
        interrupt: Some(flag),
        stop_at: None,
        progress: Some(Box::new(move |r| {
            if r.episode % report_every == 0 || r.val_accuracy.is_some() {
                let val = r.val_accuracy.map(|v| format!("  val {:.2}%", 100.0 * v)).unwrap_or_default();
                eprintln!(
                    "episode {:>6}  loss {:.4}  lr {:.2e}{val}  [{:.0}s]",
                    r.episode,
                    r.loss,
                    r.lr,
                    start.elapsed().as_secs_f64()
                );
            }
        })),
    };
    let outcome = train(&config, &data, state, &mut options)?;
    let best = outcome
        .state
        .best_val
        .map(|v| format!("{:.2}%", 100.0 * v))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "trained {} episodes in {:.1}s; best validation accuracy {best}; outputs in {}",
        outcome.state.episode,
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn report_line(report: &EvalReport) -> String {
    format!(
        "accuracy {:.2} ± {:.2}% over {} episodes ({:.1}s)",
        100.0 * report.mean,
        100.0 * report.half_width,
        report.episodes,
        report.seconds
    )
}

fn eval_cmd(checkpoint: &Path, overrides: &[String], out: Option<PathBuf>, split: SplitArg) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let config = Config::parse(&ckpt.config.to_toml(), overrides)?;
    let dir = out_dir(out, "eval");
    echo_config(&dir, &config)?;
    let data = prepare_data(&config)?;
    let (dataset, split) = match split {
        SplitArg::Validation => (&data.validation, Split::Validation),
        SplitArg::Test => (&data.test, Split::Test),
    };
    let mut model = ckpt.state.model;
    let mut csv = String::from("repeat,episode,accuracy\n");
    let mut means = Vec::new();
    for repeat in 0..config.eval.repeats {
        let report = evaluate(
            &mut model,
            dataset,
            config.eval.episodes,
            config.episode.eval_shape(),
            &config.augment,
            config.seed.wrapping_add(repeat as u64),
        )?;
        for (i, a) in report.accuracies.iter().enumerate() {
            csv.push_str(&format!("{repeat},{i},{a}\n"));
        }
        println!("{} repeat {repeat}: {}", split.name(), report_line(&report));
        means.push(report.mean);
    }
    if means.len() > 1 {
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        println!("{} mean over {} repeats: {:.2}%", split.name(), means.len(), 100.0 * mean);
    }
    write_file(&dir.join("eval.csv"), csv.as_bytes())?;
    Ok(())
}

fn ablate_cmd(args: &ConfigArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let dir = out_dir(args.out.clone(), "ablate");
    echo_config(&dir, &config)?;
    let data = prepare_data(&config)?;
    let start = Instant::now();
    let report = run_ablation(&config, &data, Some(&dir), |cell| {
        eprintln!(
            "{:<16} k={}  {}  [{:.0}s]",
            cell.variant.name,
            cell.k,
            report_line(&cell.report),
            start.elapsed().as_secs_f64()
        );
    })?;
    print!("{}", report.to_table());
    println!("written to {}", dir.display());
    Ok(())
}

fn gradcheck_cmd(seed: u64, max_elements: usize) -> Result<()> {
    let start = Instant::now();
    let entries = gradient_suite(seed, max_elements)?;
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for entry in &entries {
        println!("== {}", entry.name);
        print!("{}", entry.report);
        worst = worst.max(entry.report.max_rel_error());
        if !entry.report.passed() {
            failed.push(entry.name.clone());
        }
    }
    println!(
        "{} checks, max relative error {worst:.3e}, {:.1}s",
        entries.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
