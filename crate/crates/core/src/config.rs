//! Run configuration, read from flat `dotted.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so a
//! typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::episodes::{Part, SynthConfig};
use crate::error::{Error, Result};
use crate::mmfe::MmfeConfig;
use crate::mvmd::{Conditions, Direction};
use crate::params::AdamConfig;
use crate::pps::SelectMode;
use crate::temporal_views::ViewKind;

pub const SEED_ENV: &str = "MDMF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub frames: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { way: 5, shot: 1, queries: 5, frames: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpsConfig {
    pub enabled: bool,
    pub temperature: f64,
    pub mode: SelectMode,
}

impl Default for PpsConfig {
    fn default() -> Self {
        Self { enabled: true, temperature: 0.1, mode: SelectMode::Sample }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewsConfig {
    pub enabled: Vec<ViewKind>,
    pub dilations: Vec<usize>,
    pub ltce_kernel: usize,
    pub bn_momentum: f64,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self { enabled: vec![ViewKind::Local, ViewKind::Global], dilations: vec![1, 2, 4], ltce_kernel: 3, bn_momentum: 0.1 }
    }
}

impl ViewsConfig {
    pub fn has(&self, v: ViewKind) -> bool {
        self.enabled.contains(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtamConfig {
    pub gamma: f64,
    pub bidirectional: bool,
}

impl Default for OtamConfig {
    fn default() -> Self {
        Self { gamma: 0.1, bidirectional: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvmdConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub direction: Direction,
    pub conditions: Conditions,
    pub margin: f64,
}

impl Default for MvmdConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 1.0,
            direction: Direction::Bidirectional,
            conditions: Conditions::default(),
            margin: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub accumulation_steps: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { episodes: 2000, accumulation_steps: 16, checkpoint_every: 0, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub part: Part,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 2000, part: Part::Test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub data: DataSource,
    pub encoder: EncoderConfig,
    pub pps: PpsConfig,
    pub views: ViewsConfig,
    pub mmfe: MmfeConfig,
    pub otam: OtamConfig,
    pub mvmd: MvmdConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episode: EpisodeConfig::default(),
            data: DataSource::Synthetic(SynthConfig::default()),
            encoder: EncoderConfig::default(),
            pps: PpsConfig::default(),
            views: ViewsConfig::default(),
            mmfe: MmfeConfig::default(),
            otam: OtamConfig::default(),
            mvmd: MvmdConfig::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` lines; returns `(line number, key, value)`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { record: i + 1, message: format!("expected `key = value`, got {line:?}") })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|e| Error::Parse { record: line, message: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative manifest paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_text(&text)?;
        if let DataSource::Manifest(m) = &mut cfg.data {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `MDMF_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    fn synth_mut(&mut self) -> &mut SynthConfig {
        if !matches!(self.data, DataSource::Synthetic(_)) {
            self.data = DataSource::Synthetic(SynthConfig::default());
        }
        match &mut self.data {
            DataSource::Synthetic(s) => s,
            DataSource::Manifest(_) => unreachable!(),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "episode.way" => self.episode.way = parse(key, v)?,
            "episode.shot" => self.episode.shot = parse(key, v)?,
            "episode.queries" => self.episode.queries = parse(key, v)?,
            "episode.frames" => self.episode.frames = parse(key, v)?,
            "data.manifest" => {
                self.data = if v.is_empty() {
                    DataSource::Synthetic(SynthConfig::default())
                } else {
                    DataSource::Manifest(PathBuf::from(v))
                }
            }
            "data.synth.classes" => self.synth_mut().num_classes = parse(key, v)?,
            "data.synth.per_class" => self.synth_mut().per_class = parse(key, v)?,
            "data.synth.d_raw" => self.synth_mut().d_raw = parse(key, v)?,
            "data.synth.motif_len" => self.synth_mut().motif_len = parse(key, v)?,
            "data.synth.frames" => self.synth_mut().frames = parse(key, v)?,
            "data.synth.noise_sigma" => self.synth_mut().noise_sigma = parse(key, v)?,
            "data.synth.scene_scale" => self.synth_mut().scene_scale = parse(key, v)?,
            "data.synth.seed" => self.synth_mut().seed = parse(key, v)?,
            "encoder.kind" => self.encoder.kind = v.to_string(),
            "encoder.dim" => self.encoder.dim = parse(key, v)?,
            "encoder.prompt_template" => self.encoder.prompt_template = v.to_string(),
            "encoder.trainable" => self.encoder.trainable = parse_bool(key, v)?,
            "encoder.seed" => self.encoder.seed = parse(key, v)?,
            "pps.enabled" => self.pps.enabled = parse_bool(key, v)?,
            "pps.temperature" => self.pps.temperature = parse(key, v)?,
            "pps.mode" => self.pps.mode = parse(key, v)?,
            "views.enabled" => self.views.enabled = parse_list(key, v)?,
            "views.tcn.dilations" => self.views.dilations = parse_list(key, v)?,
            "views.ltce.kernel" => self.views.ltce_kernel = parse(key, v)?,
            "views.bn.momentum" => self.views.bn_momentum = parse(key, v)?,
            "mmfe.heads" => self.mmfe.heads = parse(key, v)?,
            "mmfe.layers" => self.mmfe.layers = parse(key, v)?,
            "mmfe.ffn_mult" => self.mmfe.ffn_mult = parse(key, v)?,
            "otam.gamma" => self.otam.gamma = parse(key, v)?,
            "otam.bidirectional" => self.otam.bidirectional = parse_bool(key, v)?,
            "mvmd.enabled" => self.mvmd.enabled = parse_bool(key, v)?,
            "mvmd.lambda" => self.mvmd.lambda = parse(key, v)?,
            "mvmd.direction" => self.mvmd.direction = v.parse()?,
            "mvmd.conditions" => self.mvmd.conditions = v.parse()?,
            "mvmd.margin" => self.mvmd.margin = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "train.episodes" => self.train.episodes = parse(key, v)?,
            "train.accumulation_steps" => self.train.accumulation_steps = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.checkpoint" => self.train.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.part" => self.eval.part = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Feeding these
    /// back through [`RunConfig::set`] reproduces the config.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("episode.way", self.episode.way.to_string()),
            ("episode.shot", self.episode.shot.to_string()),
            ("episode.queries", self.episode.queries.to_string()),
            ("episode.frames", self.episode.frames.to_string()),
        ];
        match &self.data {
            DataSource::Manifest(p) => out.push(("data.manifest", p.display().to_string())),
            DataSource::Synthetic(s) => out.extend([
                ("data.synth.classes", s.num_classes.to_string()),
                ("data.synth.per_class", s.per_class.to_string()),
                ("data.synth.d_raw", s.d_raw.to_string()),
                ("data.synth.motif_len", s.motif_len.to_string()),
                ("data.synth.frames", s.frames.to_string()),
                ("data.synth.noise_sigma", s.noise_sigma.to_string()),
                ("data.synth.scene_scale", s.scene_scale.to_string()),
                ("data.synth.seed", s.seed.to_string()),
            ]),
        }
        out.extend([
            ("encoder.kind", self.encoder.kind.clone()),
            ("encoder.dim", self.encoder.dim.to_string()),
            ("encoder.prompt_template", self.encoder.prompt_template.clone()),
            ("encoder.trainable", self.encoder.trainable.to_string()),
            ("encoder.seed", self.encoder.seed.to_string()),
            ("pps.enabled", self.pps.enabled.to_string()),
            ("pps.temperature", self.pps.temperature.to_string()),
            ("pps.mode", self.pps.mode.to_string()),
            ("views.enabled", join(&self.views.enabled)),
            ("views.tcn.dilations", join(&self.views.dilations)),
            ("views.ltce.kernel", self.views.ltce_kernel.to_string()),
            ("views.bn.momentum", self.views.bn_momentum.to_string()),
            ("mmfe.heads", self.mmfe.heads.to_string()),
            ("mmfe.layers", self.mmfe.layers.to_string()),
            ("mmfe.ffn_mult", self.mmfe.ffn_mult.to_string()),
            ("otam.gamma", self.otam.gamma.to_string()),
            ("otam.bidirectional", self.otam.bidirectional.to_string()),
            ("mvmd.enabled", self.mvmd.enabled.to_string()),
            ("mvmd.lambda", self.mvmd.lambda.to_string()),
            ("mvmd.direction", self.mvmd.direction.to_string()),
            ("mvmd.conditions", self.mvmd.conditions.to_string()),
            ("mvmd.margin", self.mvmd.margin.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("train.episodes", self.train.episodes.to_string()),
            ("train.accumulation_steps", self.train.accumulation_steps.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            (
                "train.checkpoint",
                self.train.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.part", self.eval.part.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the settings that shape the model's parameters.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            let shapes = ["encoder.", "views.", "mmfe.", "episode.frames"];
            let synth_width = k == "data.synth.d_raw";
            if shapes.iter().any(|p| k.starts_with(p)) || synth_width {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.episode;
        if e.way < 2 || e.shot < 1 || e.queries < 1 || e.frames < 1 {
            return Err(Error::Config("episode needs way >= 2, shot >= 1, queries >= 1, frames >= 1".into()));
        }
        if self.train.accumulation_steps < 1 {
            return Err(Error::Config("train.accumulation_steps must be >= 1".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("optim.lr must be > 0".into()));
        }
        if !(self.pps.temperature > 0.0) {
            return Err(Error::Config("pps.temperature must be > 0".into()));
        }
        if !(self.otam.gamma > 0.0) {
            return Err(Error::Config("otam.gamma must be > 0".into()));
        }
        if !(self.mvmd.lambda >= 0.0) || !(self.mvmd.margin >= 0.0) {
            return Err(Error::Config("mvmd.lambda and mvmd.margin must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.views.bn_momentum) {
            return Err(Error::Config("views.bn.momentum must lie in [0, 1]".into()));
        }
        let v = &self.views.enabled;
        if v.is_empty() || v.len() > 2 {
            return Err(Error::Config("views.enabled needs one or two views".into()));
        }
        if v.len() == 2 && v[0] == v[1] {
            return Err(Error::Config("views.enabled lists a view twice".into()));
        }
        if self.views.dilations.is_empty() || self.views.dilations.contains(&0) {
            return Err(Error::Config("views.tcn.dilations must be a non-empty list of positive ints".into()));
        }
        self.encoder.validate()?;
        self.mmfe.validate(self.encoder.dim)?;
        Ok(())
    }

    /// Distillation runs only when it is switched on and both views exist.
    pub fn mvmd_active(&self) -> bool {
        self.mvmd.enabled && self.views.has(ViewKind::Local) && self.views.has(ViewKind::Global)
    }
}
