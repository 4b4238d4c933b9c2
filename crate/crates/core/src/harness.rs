//! Training, evaluation, checkpointing, ablation and embedding export.
//!
//! All randomness is keyed by `(seed, stream, episode index)`, so the
//! position in the training stream is the only RNG state that needs saving.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::episodes::{load_manifest, sample_episode, synth_generate, DatasetSplit, Episode, Part};
use crate::error::{Error, Result};
use crate::model::{feature_width, forward_episode, EpisodeOutput, Model};
use crate::params::{Adam, NamedTensor};
use crate::seed::{self, stream};
use crate::temporal_views::{apply_batch_norm_updates, NormMode, ViewKind};

pub const CHECKPOINT_FORMAT: u32 = 1;

pub fn load_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    match &cfg.data {
        DataSource::Synthetic(s) => synth_generate(s),
        DataSource::Manifest(p) => load_manifest(p),
    }
}

fn raw_width(data: &DatasetSplit) -> usize {
    data.iter().find_map(|(_, s)| feature_width(s)).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub main: f64,
    pub g_to_l: f64,
    pub l_to_g: f64,
    pub total: f64,
    pub accuracy: f64,
    pub omega_g: usize,
    pub omega_l: usize,
    /// True when this episode completed an accumulation window.
    pub step: bool,
    pub wall_ms: f64,
}

impl MetricsRecord {
    fn from_output(episode: usize, out: &EpisodeOutput, step: bool, wall_ms: f64) -> Self {
        let (g, l) = out.partition.as_ref().map_or((0, 0), |p| (p.omega_g.len(), p.omega_l.len()));
        Self {
            episode,
            main: out.main_loss,
            g_to_l: out.distill.global_to_local,
            l_to_g: out.distill.local_to_global,
            total: out.total_loss,
            accuracy: out.accuracy,
            omega_g: g,
            omega_l: l,
            step,
            wall_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub part: Part,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Saved training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: Vec<(String, String)>,
    pub config_hash: String,
    pub seed: u64,
    pub episodes_done: usize,
    /// Episodes accumulated since the last optimizer step.
    pub pending: usize,
    pub params: Vec<NamedTensor>,
    pub grads: Vec<NamedTensor>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }
}

/// A model bound to its data, config and optimizer.
#[derive(Debug)]
pub struct Session {
    pub cfg: RunConfig,
    pub data: DatasetSplit,
    pub model: Model,
    pub optimizer: Adam,
    pub episodes_done: usize,
    pub pending: usize,
}

impl Session {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = load_data(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: RunConfig, data: DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg, raw_width(&data))?;
        let optimizer = Adam::new(cfg.optim.clone(), &model.store);
        Ok(Self { cfg, data, model, optimizer, episodes_done: 0, pending: 0 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in &ck.config {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        if cfg.model_hash() != ck.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut s = Self::new(cfg)?;
        s.restore(ck)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.store.restore(&ck.params)?;
        for g in &ck.grads {
            let id = self
                .model
                .store
                .id(&g.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown gradient {}", g.name)))?;
            self.model.store.get_mut(id).grad = g.value.clone();
        }
        self.optimizer = ck.optimizer.clone();
        self.episodes_done = ck.episodes_done;
        self.pending = ck.pending;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.cfg.pairs(),
            config_hash: self.cfg.model_hash(),
            seed: self.cfg.seed,
            episodes_done: self.episodes_done,
            pending: self.pending,
            params: self.model.store.snapshot(),
            grads: self
                .model
                .store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| NamedTensor { name: p.name.clone(), value: p.grad.clone() })
                .collect(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn train_episode_seed(&self, index: usize) -> u64 {
        seed::derive(self.cfg.seed, stream::TRAIN, index as u64)
    }

    fn episode(&self, part: Part, seed: u64) -> Result<Episode> {
        let e = &self.cfg.episode;
        sample_episode(&self.data, part, e.way, e.shot, e.queries, seed)
    }

    /// One training episode: forward, backward, accumulate, and an Adam step
    /// when the accumulation window fills.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let index = self.episodes_done;
        let seed = self.train_episode_seed(index);
        let ep = self.episode(Part::Train, seed)?;
        let out = forward_episode(&self.model, &ep, &self.cfg, NormMode::Train)
            .map_err(|e| match e {
                Error::Degenerate(_) => Error::NonFinite { episode: index, seed },
                other => other,
            })?;
        if !out.total_loss.is_finite() || !out.graph.value(out.loss).is_finite() {
            return Err(Error::NonFinite { episode: index, seed });
        }
        let grads = out.graph.backward(out.loss);
        grads.accumulate_into(&out.graph, &mut self.model.store);
        apply_batch_norm_updates(&mut self.model.store, &out.bn_updates, self.cfg.views.bn_momentum);
        self.pending += 1;
        self.episodes_done += 1;
        let step = self.pending == self.cfg.train.accumulation_steps;
        if step {
            let scale = 1.0 / self.cfg.train.accumulation_steps as f64;
            self.optimizer.step(&mut self.model.store, scale);
            self.pending = 0;
        }
        Ok(MetricsRecord::from_output(index, &out, step, start.elapsed().as_secs_f64() * 1e3))
    }

    /// Trains `episodes` more episodes, handing each record to `sink` and
    /// writing periodic checkpoints when configured.
    pub fn train(&mut self, episodes: usize, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        for _ in 0..episodes {
            let rec = self.train_step()?;
            sink(&rec)?;
            let every = self.cfg.train.checkpoint_every;
            if let (true, Some(path)) = (every > 0 && self.episodes_done % every == 0, &self.cfg.train.checkpoint) {
                self.checkpoint().save(path)?;
            }
        }
        Ok(())
    }

    pub fn eval_episode(&self, part: Part, index: usize) -> Result<(Episode, EpisodeOutput)> {
        let ep = self.episode(part, seed::derive(self.cfg.seed, stream::EVAL, index as u64))?;
        let out = forward_episode(&self.model, &ep, &self.cfg, NormMode::Eval)?;
        Ok((ep, out))
    }

    /// Mean accuracy over `episodes` held-out episodes with a normal-theory
    /// 95% interval. Episodes run in parallel; results are reduced in order.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalSummary> {
        if episodes == 0 {
            return Err(Error::Parameter("evaluation needs at least one episode".into()));
        }
        let part = self.cfg.eval.part;
        let accs = (0..episodes)
            .into_par_iter()
            .map(|i| self.eval_episode(part, i).map(|(_, o)| o.accuracy))
            .collect::<Result<Vec<f64>>>()?;
        let (accuracy, ci95) = mean_ci95(&accs);
        Ok(EvalSummary { episodes, part, accuracy, ci95 })
    }

    /// Writes mean-pooled fused features of every sample in `episodes`
    /// evaluation episodes as CSV: `id,label,view,d0,...`.
    pub fn export_embeddings(&self, episodes: usize, path: &Path) -> Result<usize> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let dim = self.model.dim();
        let mut header = vec!["id".to_string(), "label".to_string(), "view".to_string()];
        header.extend((0..dim).map(|d| format!("d{d}")));
        w.write_record(&header)?;
        let mut rows = 0;
        for i in 0..episodes {
            let ep = self.episode(self.cfg.eval.part, seed::derive(self.cfg.seed, stream::EXPORT, i as u64))?;
            let out = forward_episode(&self.model, &ep, &self.cfg, NormMode::Eval)?;
            for (s, sample) in ep.support.iter().chain(&ep.queries).enumerate() {
                for v in &out.views {
                    let f = &v.features[s];
                    let pooled = f.slice_rows(1, f.rows() - 1).mean_rows();
                    let mut rec = vec![sample.id.clone(), sample.label.clone(), v.kind.to_string()];
                    rec.extend(pooled.data().iter().map(|x| x.to_string()));
                    w.write_record(&rec)?;
                    rows += 1;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(rows)
    }
}

pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// One named configuration in an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub name: String,
    pub config: RunConfig,
}

/// Parses a grid file. Keys before the first `[name]` header form the base
/// config; each section lists overrides applied on top of the base.
pub fn parse_grid(text: &str, base: RunConfig) -> Result<Vec<GridRow>> {
    let mut base = base;
    let mut rows: Vec<(String, Vec<(usize, String, String)>)> = Vec::new();
    let mut body = String::new();
    let mut line_map = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            rows.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        match rows.last_mut() {
            Some((_, deltas)) => {
                for (_, k, v) in crate::config::parse_pairs(raw)? {
                    deltas.push((i + 1, k, v));
                }
            }
            None => {
                body.push_str(raw);
                body.push('\n');
                line_map.push(i + 1);
            }
        }
    }
    for (line, k, v) in crate::config::parse_pairs(&body)? {
        base.set(&k, &v).map_err(|e| Error::Parse { record: line_map[line - 1], message: e.to_string() })?;
    }
    rows.into_iter()
        .map(|(name, deltas)| {
            let mut cfg = base.clone();
            for (line, k, v) in deltas {
                cfg.set(&k, &v).map_err(|e| Error::Parse { record: line, message: e.to_string() })?;
            }
            cfg.validate()?;
            Ok(GridRow { name, config: cfg })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub views: String,
    pub pps: bool,
    pub mvmd: bool,
    pub direction: String,
    pub conditions: String,
    pub lambda: f64,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Trains and evaluates every grid row.
pub fn ablate(grid: &[GridRow]) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|row| {
            let cfg = &row.config;
            let mut s = Session::new(cfg.clone())?;
            s.train(cfg.train.episodes, |_| Ok(()))?;
            let e = s.evaluate(cfg.eval.episodes)?;
            Ok(AblationRow {
                name: row.name.clone(),
                views: cfg.views.enabled.iter().map(ViewKind::to_string).collect::<Vec<_>>().join(","),
                pps: cfg.pps.enabled,
                mvmd: cfg.mvmd_active(),
                direction: cfg.mvmd.direction.to_string(),
                conditions: cfg.mvmd.conditions.to_string(),
                lambda: cfg.mvmd.lambda,
                train_episodes: cfg.train.episodes,
                eval_episodes: e.episodes,
                accuracy: e.accuracy,
                ci95: e.ci95,
            })
        })
        .collect()
}
