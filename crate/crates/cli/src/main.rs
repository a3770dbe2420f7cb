use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bookmem::agents::{evaluate, CurvePoint, EpsilonSchedule, QModel, WriterAlgo};
use bookmem::harness::{
    self, compute_ratio, run_priority_ablation, run_quantization_sweep, write_csv, ExperimentConfig,
};
use bookmem::reader::{train_reader, ReaderHead};
use bookmem::{make_env, PublishedBook64};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "bookmem", version, about = "Write, publish and read BOOK episodic memories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a writer with a book attached and publish it.
    Write(Common),
    /// Re-publish the top entries of an existing book file.
    Publish {
        #[arg(long)]
        book: PathBuf,
        #[arg(long)]
        publish_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a reader from a book file and save its networks.
    Read {
        #[arg(long)]
        book: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved reader, or pre-train and evaluate straight from a book.
    Eval {
        #[arg(long, conflicts_with = "book")]
        model: Option<PathBuf>,
        #[arg(long)]
        book: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare retention rules on the same writer runs.
    AblatePriority(Common),
    /// Compare quantization levels on the same writer runs.
    SweepQuantization(Common),
    /// Smoothed from-scratch learning curve.
    Baseline {
        #[arg(long, default_value_t = 2_000)]
        eval_every: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Score/Transition/Ratio against a baseline curve CSV.
    Ratio {
        #[arg(long, allow_negative_numbers = true)]
        score: f64,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        publish_size: usize,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    book_capacity: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    publish_size: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<u32>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(env) = &self.env {
            cfg.env = env.clone();
        }
        if let Some(algo) = &self.algo {
            cfg.writer.algo = WriterAlgo::parse(algo)?;
        }
        if let Some(head) = &self.head {
            cfg.reader.head = ReaderHead::parse(head)?;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(steps) = self.steps {
            cfg.writer.total_steps = steps;
            cfg.writer.epsilon = EpsilonSchedule::standard(steps);
        }
        if let Some(k) = self.book_capacity {
            cfg.book_capacity = k;
        }
        if let Some(n) = &self.publish_size {
            cfg.publish_sizes = n.clone();
        }
        if let Some(levels) = &self.levels {
            cfg.levels = levels.clone();
        }
        if let Some(e) = self.episodes {
            cfg.eval_episodes = e;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize, Deserialize)]
struct ReaderFile {
    format_version: u32,
    env_id: String,
    head: ReaderHead,
    model: QModel<f64>,
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_book(path: &Path) -> Result<PublishedBook64> {
    PublishedBook64::load(path).with_context(|| format!("loading book {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Write(common) => {
            let cfg = common.config()?;
            let summaries = cfg
                .seeds
                .iter()
                .map(|&seed| harness::run_write(&cfg, seed))
                .collect::<bookmem::Result<Vec<_>>>()?;
            print_json(&summaries)?;
        }
        Command::Publish { book, publish_size, out } => {
            let top = load_book(&book)?.top(publish_size)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            top.save(&out)?;
            println!("{} entries -> {}", top.len(), out.display());
        }
        Command::Read { book, common } => {
            let cfg = common.config()?;
            let published = load_book(&book)?;
            let reader = bookmem::ReaderConfig { seed: cfg.seeds[0], ..cfg.reader.clone() };
            let model = train_reader(&published, &reader)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("reader.json"));
            let file = ReaderFile { format_version: 1, env_id: published.env_id().to_string(), head: reader.head, model };
            write_json(&out, &file)?;
            println!("{} reader -> {}", reader.head.name(), out.display());
        }
        Command::Eval { model, book, common } => {
            let cfg = common.config()?;
            let seed = cfg.seeds[0];
            let report = match (model, book) {
                (Some(path), None) => {
                    let file: ReaderFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
                    let env_id = common.env.clone().unwrap_or(file.env_id);
                    let mut env = make_env::<f64>(&env_id)?;
                    let mut policy = file.model;
                    let score = evaluate(&mut policy, env.as_mut(), cfg.eval_episodes, seed)?;
                    serde_json::json!({ "env": env_id, "score": score, "episodes": cfg.eval_episodes })
                }
                (None, Some(path)) => {
                    let published = load_book(&path)?;
                    let env_id = common.env.clone().unwrap_or_else(|| published.env_id().to_string());
                    let reader = bookmem::ReaderConfig { seed, ..cfg.reader.clone() };
                    let r = harness::run_read_eval(&published, &env_id, &reader, cfg.eval_episodes, seed)?;
                    serde_json::json!({
                        "env": env_id,
                        "head": reader.head.name(),
                        "score": r.score,
                        "pretrain_env_steps": r.pretrain_env_steps,
                        "episodes": cfg.eval_episodes,
                    })
                }
                _ => bail!("eval needs exactly one of --model or --book"),
            };
            if let Some(out) = &common.out {
                write_json(&out.join("eval.json"), &report)?;
            }
            print_json(&report)?;
        }
        Command::AblatePriority(common) => {
            let cfg = common.config()?;
            let report = run_priority_ablation(&cfg)?;
            write_json(&cfg.out_dir.join("ablate_priority.json"), &report)?;
            print_json(&report)?;
        }
        Command::SweepQuantization(common) => {
            let cfg = common.config()?;
            let report = run_quantization_sweep(&cfg)?;
            write_json(&cfg.out_dir.join("sweep_quantization.json"), &report)?;
            print_json(&report)?;
        }
        Command::Baseline { eval_every, common } => {
            let cfg = common.config()?;
            fs::create_dir_all(&cfg.out_dir)?;
            for &seed in &cfg.seeds {
                let curve = harness::run_baseline(&cfg, seed, eval_every)?;
                let path = cfg.out_dir.join(format!("baseline_{}_{}_s{}.csv", cfg.env, cfg.writer.algo.name(), seed));
                write_csv(&path, &curve)?;
                println!("{} points -> {}", curve.len(), path.display());
            }
        }
        Command::Ratio { score, baseline, publish_size } => {
            let mut reader = csv_reader(&baseline)?;
            let curve = reader.deserialize().collect::<std::result::Result<Vec<CurvePoint>, _>>()?;
            print_json(&compute_ratio(score, &curve, publish_size))?;
        }
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))
}
