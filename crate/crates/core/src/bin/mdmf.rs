use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdmf::config::RunConfig;
use mdmf::episodes::{synth_generate, write_dataset, Part, SynthConfig};
use mdmf::harness::{ablate, parse_grid, Session};
use mdmf::{Error, Result};

#[derive(Parser)]
#[command(name = "mdmf", version, about = "Episodic few-shot action recognition with multi-view distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, streaming JSON-lines metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the config seed and MDMF_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics destination; stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Final checkpoint path; defaults to `train.checkpoint`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        part: Option<Part>,
    },
    /// Train and evaluate every row of a grid file, printing a JSON-lines table.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Base config applied before the grid's own base keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-sample fused features as CSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Generate a synthetic motif dataset in manifest format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise_sigma: f64,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::Io { path: p.into(), source: e })?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_line<T: serde::Serialize>(w: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w).map_err(|e| Error::Io { path: "<metrics>".into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, metrics, ckpt } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ckpt = ckpt.or_else(|| cfg.train.checkpoint.clone());
            let mut out = output(metrics.as_deref())?;
            let mut session = Session::new(cfg)?;
            let episodes = session.cfg.train.episodes;
            session.train(episodes, |r| write_line(out.as_mut(), r))?;
            out.flush().map_err(|e| Error::Io { path: "<metrics>".into(), source: e })?;
            if let Some(p) = ckpt {
                session.checkpoint().save(&p)?;
                eprintln!("checkpoint written to {}", p.display());
            }
        }
        Command::Eval { ckpt, episodes, part } => {
            let mut session = Session::load(&ckpt)?;
            if let Some(p) = part {
                session.cfg.eval.part = p;
            }
            let n = episodes.unwrap_or(session.cfg.eval.episodes);
            let summary = session.evaluate(n)?;
            write_line(&mut io::stdout(), &summary)?;
        }
        Command::Ablate { grid, config, out } => {
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let text = std::fs::read_to_string(&grid).map_err(|e| Error::Io { path: grid.clone(), source: e })?;
            let rows = parse_grid(&text, base)?;
            let mut w = output(out.as_deref())?;
            for row in ablate(&rows)? {
                write_line(w.as_mut(), &row)?;
            }
            w.flush().map_err(|e| Error::Io { path: "<table>".into(), source: e })?;
        }
        Command::ExportEmbeddings { ckpt, out, episodes } => {
            let session = Session::load(&ckpt)?;
            let rows = session.export_embeddings(episodes, &out)?;
            eprintln!("{rows} rows written to {}", out.display());
        }
        Command::Synth { out, classes, per_class, seed, noise_sigma } => {
            let cfg = SynthConfig { num_classes: classes, per_class, seed, noise_sigma, ..Default::default() };
            let split = synth_generate(&cfg)?;
            let manifest = write_dataset(&split, &out)?;
            eprintln!("{} samples written, manifest {}", split.num_samples(), manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
