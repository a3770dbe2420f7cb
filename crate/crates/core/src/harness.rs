//! Experiment orchestration: write, publish, read, evaluate, the two
//! ablations, and the Score/Transition/Ratio metric.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::agents::{evaluate, train_writer, CurvePoint, EpisodeRecord, WriterAlgo, WriterConfig};
use crate::book::{Book, BookParams, PublishMeta, PublishedBook, Retention};
use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::reader::{train_reader, ReaderConfig};

pub const SMOOTHING_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityMethod {
    #[default]
    Proposed,
    Random,
    FrequencyOnly,
    PerStyle,
}

impl PriorityMethod {
    pub const ALL: [PriorityMethod; 4] =
        [PriorityMethod::Proposed, PriorityMethod::Random, PriorityMethod::FrequencyOnly, PriorityMethod::PerStyle];

    pub fn retention(self, seed: u64) -> Retention {
        match self {
            PriorityMethod::Proposed => Retention::Proposed,
            PriorityMethod::Random => Retention::Random { seed },
            PriorityMethod::FrequencyOnly => Retention::FrequencyOnly,
            PriorityMethod::PerStyle => Retention::PerStyle,
        }
    }

    pub fn name(self) -> &'static str {
        self.retention(0).name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: String,
    pub writer: WriterConfig,
    pub reader: ReaderConfig,
    pub book: BookParams<f64>,
    pub book_capacity: usize,
    pub publish_sizes: Vec<usize>,
    /// Quantization levels. Single-level runs use the first, or the
    /// environment default when empty; sweeps need at least one.
    pub levels: Vec<u32>,
    pub priority: PriorityMethod,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: "cartpole".into(),
            writer: WriterConfig::new(WriterAlgo::Dqn, 200_000),
            reader: ReaderConfig::default(),
            book: BookParams::default(),
            book_capacity: 10_000,
            publish_sizes: vec![500],
            levels: Vec::new(),
            priority: PriorityMethod::Proposed,
            seeds: vec![0, 1, 2],
            eval_episodes: 100,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        make_env::<f64>(&self.env)?;
        self.writer.validate()?;
        self.reader.validate()?;
        self.book.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.book_capacity == 0 {
            return Err(Error::Config("book capacity must be positive".into()));
        }
        if self.publish_sizes.is_empty() || self.publish_sizes.contains(&0) {
            return Err(Error::Config("publish sizes must be a non-empty list of positive sizes".into()));
        }
        if self.levels.contains(&0) {
            return Err(Error::Config("quantization levels must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("evaluation needs at least one episode".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn new_book(&self, env: &dyn Environment<f64>, levels: u32, retention: Retention) -> Result<Book<f64>> {
        let spec = env.spec();
        Ok(Book::new(spec.quantizer.with_levels(levels), spec.action_count, self.book_capacity, self.book.clone())?
            .with_retention(retention))
    }

    fn single_levels(&self, env: &dyn Environment<f64>) -> u32 {
        self.levels.first().copied().unwrap_or(env.spec().quantizer.levels)
    }

    fn meta(&self) -> PublishMeta {
        PublishMeta::new(self.env.clone(), self.writer.algo.name())
    }
}

/// Robust summary of a score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut data = Data::new(values.to_vec());
    Summary { median: data.median(), lower_quartile: data.lower_quartile(), upper_quartile: data.upper_quartile() }
}

#[derive(Debug, Clone)]
pub struct WriteResult {
    pub seed: u64,
    pub writer_score: f64,
    pub episodes: Vec<EpisodeRecord>,
    /// One published book per configured size, in the same order.
    pub books: Vec<PublishedBook<f64>>,
}

/// Trains one writer with a book attached, evaluates it greedily and
/// publishes at every configured size.
pub fn write_books(cfg: &ExperimentConfig, seed: u64) -> Result<WriteResult> {
    cfg.validate()?;
    let mut env = make_env::<f64>(&cfg.env)?;
    let mut book = cfg.new_book(env.as_ref(), cfg.single_levels(env.as_ref()), cfg.priority.retention(seed))?;
    let mut out = train_writer(env.as_mut(), &cfg.writer, std::slice::from_mut(&mut book), seed)?;
    let mut eval_env = env.boxed_fresh();
    let writer_score = evaluate(&mut out.policy, eval_env.as_mut(), cfg.eval_episodes, eval_seed(seed))?;
    let meta = cfg.meta();
    let books = cfg.publish_sizes.iter().map(|&n| book.publish(n, &meta)).collect::<Result<_>>()?;
    Ok(WriteResult { seed, writer_score, episodes: out.episodes, books })
}

fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(1_000_003)
}

pub fn book_file_name(cfg: &ExperimentConfig, seed: u64, size: usize) -> String {
    format!("book_{}_{}_s{}_n{}.json", cfg.env, cfg.writer.algo.name(), seed, size)
}

pub fn write_csv<S: Serialize>(path: impl AsRef<Path>, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// [`write_books`] plus file output: one book file per size, the writer's
/// episode metrics CSV, and a summary JSON. Returns the summary.
pub fn run_write(cfg: &ExperimentConfig, seed: u64) -> Result<WriteSummary> {
    let res = write_books(cfg, seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut book_files = Vec::new();
    for (book, &n) in res.books.iter().zip(&cfg.publish_sizes) {
        let path = cfg.out_dir.join(book_file_name(cfg, seed, n));
        book.save(&path)?;
        book_files.push(path);
    }
    let stem = format!("writer_{}_{}_s{}", cfg.env, cfg.writer.algo.name(), seed);
    write_csv(cfg.out_dir.join(format!("{stem}.csv")), &res.episodes)?;
    let summary = WriteSummary { seed, writer_score: res.writer_score, episodes: res.episodes.len(), book_files };
    fs::write(cfg.out_dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub seed: u64,
    pub writer_score: f64,
    pub episodes: usize,
    pub book_files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadReport {
    pub score: f64,
    /// Environment steps taken while pre-training (always zero).
    pub pretrain_env_steps: u64,
}

/// Pre-trains a reader from `book` and reports its mean greedy score over
/// `episodes` evaluation episodes on `env_id`.
pub fn run_read_eval(
    book: &PublishedBook<f64>,
    env_id: &str,
    cfg: &ReaderConfig,
    episodes: usize,
    seed: u64,
) -> Result<ReadReport> {
    let mut env = make_env::<f64>(env_id)?;
    let spec = env.spec();
    if book.env_id() != env_id || book.action_count() != spec.action_count || book.state_dims() != spec.state_dims {
        return Err(Error::Incompatible(format!(
            "book was written on {:?} ({} actions, {} dims), evaluation env is {:?} ({} actions, {} dims)",
            book.env_id(),
            book.action_count(),
            book.state_dims(),
            env_id,
            spec.action_count,
            spec.state_dims
        )));
    }
    let mut model = train_reader(book, cfg)?;
    let pretrain_env_steps = env.total_steps();
    let score = evaluate(&mut model, env.as_mut(), episodes, eval_seed(seed))?;
    Ok(ReadReport { score, pretrain_env_steps })
}

/// Trailing mean over the last `window` points (fewer at the start).
pub fn smooth(curve: &[CurvePoint], window: usize) -> Vec<CurvePoint> {
    let window = window.max(1);
    (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &curve[lo..=i];
            let mean = slice.iter().map(|p| p.score).sum::<f64>() / slice.len() as f64;
            CurvePoint { transitions: curve[i].transitions, score: mean }
        })
        .collect()
}

/// From-scratch learning curve (smoothed) for the ratio metric.
pub fn run_baseline(cfg: &ExperimentConfig, seed: u64, eval_every: u64) -> Result<Vec<CurvePoint>> {
    let mut env = make_env::<f64>(&cfg.env)?;
    let mut writer = cfg.writer.clone();
    writer.eval_every = Some(eval_every);
    let out = train_writer(env.as_mut(), &writer, &mut [], seed)?;
    Ok(smooth(&out.curve, SMOOTHING_WINDOW))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub score: f64,
    /// First baseline transition count whose smoothed score reaches `score`.
    pub transitions_to_match: Option<u64>,
    /// `publish_size / transitions_to_match`.
    pub ratio: Option<f64>,
    pub matched: bool,
}

pub fn compute_ratio(reader_score: f64, baseline: &[CurvePoint], publish_size: usize) -> RatioReport {
    let hit = baseline.iter().find(|p| p.score >= reader_score).map(|p| p.transitions);
    RatioReport {
        score: reader_score,
        transitions_to_match: hit,
        ratio: hit.map(|t| publish_size as f64 / t as f64),
        matched: hit.is_some(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: PriorityMethod,
    pub scores: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub writer_scores: Vec<f64>,
    pub methods: Vec<MethodScores>,
}

impl AblationReport {
    pub fn median(&self, method: PriorityMethod) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.summary.median)
    }
}

/// Per seed, one writer fills four books that differ only in their
/// retention rule; each is published at the first configured size, read
/// and evaluated.
pub fn run_priority_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let n = cfg.publish_sizes[0];
    let per_seed: Vec<(f64, Vec<f64>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(f64, Vec<f64>)> {
            let mut env = make_env::<f64>(&cfg.env)?;
            let mut books = PriorityMethod::ALL
                .iter()
                .map(|m| cfg.new_book(env.as_ref(), cfg.single_levels(env.as_ref()), m.retention(seed)))
                .collect::<Result<Vec<_>>>()?;
            let mut out = train_writer(env.as_mut(), &cfg.writer, &mut books, seed)?;
            let writer_score = evaluate(&mut out.policy, env.boxed_fresh().as_mut(), cfg.eval_episodes, eval_seed(seed))?;
            let meta = cfg.meta();
            let reader = ReaderConfig { seed, ..cfg.reader.clone() };
            let scores = books
                .iter()
                .map(|b| Ok(run_read_eval(&b.publish(n, &meta)?, &cfg.env, &reader, cfg.eval_episodes, seed)?.score))
                .collect::<Result<Vec<_>>>()?;
            Ok((writer_score, scores))
        })
        .collect::<Result<_>>()?;
    let methods = PriorityMethod::ALL
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let scores: Vec<f64> = per_seed.iter().map(|(_, s)| s[i]).collect();
            MethodScores { method, summary: summarize(&scores), scores }
        })
        .collect();
    Ok(AblationReport { writer_scores: per_seed.iter().map(|(w, _)| *w).collect(), methods })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub levels: u32,
    /// Mean hits per published linguistic state, one value per seed.
    pub mean_hits: Vec<f64>,
    pub scores: Vec<f64>,
    pub hits_summary: Summary,
    pub score_summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub levels: Vec<LevelStats>,
}

/// Per seed, one writer fills one book per quantization level; each is
/// published at the first configured size, read and evaluated.
pub fn run_quantization_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.levels.is_empty() {
        return Err(Error::Config("a quantization sweep needs at least one level".into()));
    }
    let n = cfg.publish_sizes[0];
    let per_seed: Vec<Vec<(f64, f64)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, f64)>> {
            let mut env = make_env::<f64>(&cfg.env)?;
            let mut books = cfg
                .levels
                .iter()
                .map(|&l| cfg.new_book(env.as_ref(), l, cfg.priority.retention(seed)))
                .collect::<Result<Vec<_>>>()?;
            train_writer(env.as_mut(), &cfg.writer, &mut books, seed)?;
            let meta = cfg.meta();
            let reader = ReaderConfig { seed, ..cfg.reader.clone() };
            books
                .iter()
                .map(|b| {
                    let published = b.publish(n, &meta)?;
                    let hits: Vec<f64> = published
                        .entries()
                        .iter()
                        .filter_map(|e| b.hits(&e.key))
                        .map(|h| h as f64)
                        .collect();
                    let mean_hits = if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 };
                    let score = run_read_eval(&published, &cfg.env, &reader, cfg.eval_episodes, seed)?.score;
                    Ok((mean_hits, score))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let levels = cfg
        .levels
        .iter()
        .enumerate()
        .map(|(i, &levels)| {
            let mean_hits: Vec<f64> = per_seed.iter().map(|s| s[i].0).collect();
            let scores: Vec<f64> = per_seed.iter().map(|s| s[i].1).collect();
            LevelStats {
                levels,
                hits_summary: summarize(&mean_hits),
                score_summary: summarize(&scores),
                mean_hits,
                scores,
            }
        })
        .collect();
    Ok(SweepReport { levels })
}
