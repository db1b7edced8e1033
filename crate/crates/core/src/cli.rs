//! Command-line front end. [`run`] parses, dispatches and maps the outcome
//! to an exit status: 0 on success, 2 on a usage error, 1 on a runtime
//! failure. Messages go to standard error.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{Checkpoint, INDEX_FILE};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::export::{write_masks, write_tokens, Dataset};
use crate::metrics::flops_csv;
use crate::model::Model;
use crate::tensor_file::TensorFile;
use crate::train::{evaluate, prepare, TrainState, Trainer};

/// Name of the metric log inside a checkpoint directory.
pub const METRIC_LOG: &str = "metrics.log";

#[derive(Debug, Parser)]
#[command(
    name = "trajtok",
    version,
    about = "Trajectory tokenizer for synthetic video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation objective alone.
    TrainSeg(TrainArgs),
    /// Train segmentation and contrastive objectives together.
    TrainJoint(TrainArgs),
    /// Tokenize one video file with a trained checkpoint.
    Tokenize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sub-tokens per trajectory.
        #[arg(long, default_value_t = 1, value_parser = parse_n)]
        n: usize,
        /// Frames per chunk; defaults to the checkpoint's setting.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        chunk: Option<u32>,
    },
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = parse_n)]
        n: usize,
    },
    /// FLOPs of both models per frame count, as CSV.
    Flops {
        #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(u32).range(1..))]
        frames: Vec<u32>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gradient checks and invariant suite.
    Selftest,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration; defaults to the one stored with the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; an existing checkpoint there is resumed.
    #[arg(long)]
    out: PathBuf,
    /// Stop after this many total steps instead of the configured count.
    #[arg(long)]
    until: Option<usize>,
}

fn parse_n(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (1 | 2 | 4)) => Ok(n),
        _ => Err(format!("expected 1, 2 or 4, got {s:?}")),
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(explicit: Option<&Path>, fallback: &Path) -> Result<Config> {
    let config = Config::load(explicit.unwrap_or(fallback))?;
    config.validate()?;
    Ok(config)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    let print = |out: &mut dyn Write, text: &str| {
        out.write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))
    };
    match command {
        Command::GenData { config, out: dir } => {
            let config = match config {
                Some(path) => load_config(Some(&path), &path)?,
                None => Config::default(),
            };
            let dataset = Dataset::generate(&config.data)?;
            dataset.save(&dir, &config)?;
            print(
                out,
                &format!(
                    "wrote {} train and {} val videos to {}\n",
                    dataset.train.len(),
                    dataset.val.len(),
                    dir.display()
                ),
            )?;
        }
        Command::TrainSeg(args) => train(args, false, out)?,
        Command::TrainJoint(args) => train(args, true, out)?,
        Command::Tokenize {
            ckpt,
            video,
            out: dir,
            n,
            chunk,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let (model, _) = Model::new(ckpt.config.model.clone(), ckpt.config.train.seed)?;
            let pixels = TensorFile::read(&video)?.to_tensor()?;
            let chunk_len = chunk.map_or(ckpt.config.model.segmenter.chunk_len, |c| c as usize);
            let chunks = model.tokenize(&ckpt.state.params, &pixels, n, chunk_len)?;
            write_tokens(&dir, &chunks)?;
            write_masks(&dir, &chunks)?;
            let trajectories: usize = chunks.iter().map(|c| c.tokens.len()).sum();
            print(
                out,
                &format!(
                    "{} chunks, {trajectories} trajectories, n={n} -> {}\n",
                    chunks.len(),
                    dir.display()
                ),
            )?;
        }
        Command::Eval { ckpt, data, n } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let (model, _) = Model::new(ckpt.config.model.clone(), ckpt.config.train.seed)?;
            let dataset = Dataset::load(&data)?;
            let videos = if dataset.val.is_empty() {
                &dataset.train
            } else {
                &dataset.val
            };
            let prepared = prepare(videos, ckpt.config.model.segmenter.chunk_len)?;
            let report = evaluate(&model, &ckpt.state.params, &prepared, n, &ckpt.config)?;
            print(out, &report.to_text())?;
            print(out, &report.to_csv())?;
        }
        Command::Flops { frames, config } => {
            let config = match config {
                Some(path) => load_config(Some(&path), &path)?,
                None => Config::default(),
            };
            let frames: Vec<usize> = frames.into_iter().map(|f| f as usize).collect();
            print(out, &flops_csv(&frames, &config.model, &config.flops))?;
        }
        Command::Selftest => {
            let checks = crate::selftest::run();
            for c in &checks {
                print(out, &format!("{}\n", c.line()))?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("error: {failed} of {} checks failed", checks.len());
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn train(args: TrainArgs, joint: bool, out: &mut dyn Write) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), &args.data.join("config.cfg"))?;
    config.train.joint = joint;
    let dataset = Dataset::load(&args.data)?;
    let chunk_len = config.model.segmenter.chunk_len;
    let (train, val) = (
        prepare(&dataset.train, chunk_len)?,
        prepare(&dataset.val, chunk_len)?,
    );
    let (trainer, fresh) = Trainer::new(config, &train, &val)?;

    let resume = args.out.join(INDEX_FILE).exists();
    let mut state: TrainState = if resume {
        let ckpt = Checkpoint::load(&args.out)?;
        if ckpt.config != trainer.config {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with a different configuration",
                args.out.display()
            )));
        }
        ckpt.state
    } else {
        fresh
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let log_path = args.out.join(METRIC_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let end = args
        .until
        .unwrap_or(trainer.config.train.steps)
        .min(trainer.config.train.steps);
    let every = match trainer.config.train.eval_interval {
        0 => end.max(1),
        k => k,
    };
    let start = state.step;
    while state.step < end {
        let target = ((state.step / every + 1) * every).min(end);
        trainer.run(&mut state, Some(target), &mut log)?;
        Checkpoint {
            config: trainer.config.clone(),
            state: state.clone(),
        }
        .save(&args.out)?;
    }
    if state.step == start {
        Checkpoint {
            config: trainer.config.clone(),
            state: state.clone(),
        }
        .save(&args.out)?;
    }
    out.write_all(
        format!(
            "trained steps {start}..{} -> {}\n",
            state.step,
            args.out.display()
        )
        .as_bytes(),
    )
    .map_err(|e| Error::io("<stdout>", e))
}
