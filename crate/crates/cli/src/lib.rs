//! Command-line driver: dataset generation, training, evaluation, gradient
//! checks and the head comparison, plus the on-disk formats they use.

pub mod config;
pub mod format;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ccn_core::gradcheck::run_suite;
use ccn_core::synthcam::generate_dataset;
use ccn_core::trainer::{compare_heads, evaluate, train, EpochRecord, HeadMode};

use config::{parse_config, RunConfig};
use format::{read_checkpoint, read_dataset, write_atomic, write_checkpoint, write_dataset};

pub const TRAIN_FILE: &str = "train.ccns";
pub const VAL_FILE: &str = "val.ccns";

#[derive(Parser, Debug)]
#[command(name = "ccn", version, about = "Cylindrical convolutional head: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train and val splits into a directory
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives train.ccns and val.ccns
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and epoch log
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print one key=value metric per line
        #[arg(long)]
        porcelain: bool,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Train both heads on matched seeds and compare them
    CompareBaseline {
        #[arg(long)]
        config: PathBuf,
        /// Overrides compare_seeds from the config
        #[arg(long)]
        seeds: Option<usize>,
    },
}

/// Exit status for operational failures.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for usage errors.
pub const EXIT_USAGE: i32 = 2;

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    match command {
        Command::GenData { config, out: dir } => gen_data(&config, &dir, out),
        Command::Train { config } => train_cmd(&config, out, err),
        Command::Eval { checkpoint, data, porcelain } => eval_cmd(&checkpoint, &data, porcelain, out),
        Command::Gradcheck { seeds } => gradcheck_cmd(seeds, out),
        Command::CompareBaseline { config, seeds } => compare_cmd(&config, seeds, out, err),
    }
}

/// Reads a config file. Relative data, checkpoint and log paths are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| base.join(p).to_string_lossy().into_owned();
    cfg.train.train_data = resolve(&cfg.train.train_data);
    cfg.train.val_data = resolve(&cfg.train.val_data);
    cfg.train.checkpoint = resolve(&cfg.train.checkpoint);
    cfg.log = resolve(&cfg.log);
    Ok(cfg)
}

fn gen_data(config: &Path, dir: &Path, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = load_config(config)?;
    let data = generate_dataset(&cfg.gen)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, set) in [(TRAIN_FILE, &data.train), (VAL_FILE, &data.val)] {
        let path = dir.join(name);
        write_dataset(&path, set).with_context(|| format!("writing {}", path.display()))?;
        let fg = set.samples.iter().filter(|s| s.label != 0).count();
        writeln!(out, "{}: {} samples ({} objects, {} background)", path.display(), set.len(), fg, set.len() - fg)?;
    }
    Ok(0)
}

fn load_split(path: &str) -> anyhow::Result<ccn_core::Dataset> {
    read_dataset(Path::new(path)).with_context(|| format!("reading {path}"))
}

fn train_cmd(config: &Path, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = load_config(config)?;
    let t = &cfg.train;
    let train_set = load_split(&t.train_data)?;
    let val = load_split(&t.val_data)?;
    let mut lines = Vec::new();
    let result = train(t, &train_set, &val, &mut |rec: &EpochRecord| {
        let _ = writeln!(err, "{rec}");
        lines.push(rec.to_string());
    });
    let log_path = Path::new(&cfg.log);
    write_atomic(log_path, |w| lines.iter().try_for_each(|l| writeln!(w, "{l}")))
        .with_context(|| format!("writing {}", log_path.display()))?;
    let ckpt = Path::new(&t.checkpoint);
    match result {
        Ok(outcome) => {
            write_checkpoint(ckpt, &outcome.model).with_context(|| format!("writing {}", ckpt.display()))?;
            writeln!(out, "wrote {} ({} parameters)", ckpt.display(), outcome.model.parameter_count())?;
            Ok(0)
        }
        Err(failure) => {
            if let Some(model) = &failure.last_good {
                let path = PathBuf::from(format!("{}.last_good", t.checkpoint));
                write_checkpoint(&path, model).with_context(|| format!("writing {}", path.display()))?;
                writeln!(err, "saved last finite parameters to {}", path.display())?;
            }
            bail!("training failed: {failure}")
        }
    }
}

fn eval_cmd(checkpoint: &Path, data: &Path, porcelain: bool, out: &mut dyn Write) -> anyhow::Result<i32> {
    let model = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let set = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let a = model.arch;
    if a.n_views != set.n_views || a.n_classes != set.n_classes {
        bail!(
            "architecture mismatch: checkpoint has n_views={} n_classes={}, dataset has n_views={} n_classes={}",
            a.n_views,
            a.n_classes,
            set.n_views,
            set.n_classes
        );
    }
    let report = evaluate(&model, &set).context("architecture mismatch between checkpoint and dataset")?;
    if porcelain {
        write!(out, "{}", report.porcelain())?;
    } else {
        write!(out, "{report}")?;
    }
    Ok(0)
}

fn gradcheck_cmd(seeds: u64, out: &mut dyn Write) -> anyhow::Result<i32> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let reports = run_suite(seeds)?;
    for r in &reports {
        writeln!(out, "{r}")?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} checks, {} failed", reports.len(), failed)?;
    Ok(if failed == 0 { 0 } else { EXIT_FAILURE })
}

fn compare_cmd(config: &Path, seeds: Option<usize>, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = load_config(config)?;
    let n = seeds.unwrap_or(cfg.compare_seeds);
    let train_set = load_split(&cfg.train.train_data)?;
    let val = load_split(&cfg.train.val_data)?;
    let cmp = compare_heads(&cfg.train, &train_set, &val, n, &mut |seed, mode: HeadMode, rec| {
        let _ = writeln!(err, "seed={seed} head={mode} {rec}");
    })
    .map_err(|f| anyhow::anyhow!("comparison failed: {f}"))?;
    write!(out, "{cmp}")?;
    Ok(0)
}
