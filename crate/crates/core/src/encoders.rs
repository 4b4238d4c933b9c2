//! Visual and text encoders.
//!
//! Real vision-language backbones plug in through [`VisualEncoder`] and
//! [`TextEncoder`] and are looked up by the `encoder.kind` config key in an
//! [`AdapterRegistry`]. The built-in `stub` kind is a seeded random
//! projection for the visual side and a seeded hash embedding for the text
//! side, which is enough to exercise the whole pipeline on synthetic data.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::FrameRef;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-frame embeddings of one clip, `T x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddingSeq {
    data: Mat,
}

impl FrameEmbeddingSeq {
    pub fn new(data: Mat) -> Result<Self> {
        if data.rows() == 0 || !data.is_finite() {
            return Err(Error::Input("frame embeddings must be non-empty and finite".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptOrigin {
    TextEncoder,
    PpsSampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub data: Vec<f64>,
    pub source_class: String,
    pub origin: PromptOrigin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `stub`, or the name of a registered adapter.
    pub kind: String,
    pub dim: usize,
    pub prompt_template: String,
    pub trainable: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: "stub".into(),
            dim: 32,
            prompt_template: "a video of {label}".into(),
            trainable: false,
            seed: 17,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!("encoder.dim must be >= 8, got {}", self.dim)));
        }
        if !self.prompt_template.contains("{label}") {
            return Err(Error::Config("encoder.prompt_template needs a {label} placeholder".into()));
        }
        Ok(())
    }

    pub fn prompt_for(&self, label: &str) -> String {
        self.prompt_template.replace("{label}", label)
    }
}

pub trait VisualEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_video(&self, frames: &[FrameRef]) -> Result<FrameEmbeddingSeq>;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Templated label encoding.
pub fn encode_label(encoder: &dyn TextEncoder, class_name: &str, cfg: &EncoderConfig) -> Result<PromptEmbedding> {
    if class_name.is_empty() {
        return Err(Error::Input("class name must be non-empty".into()));
    }
    let data = encoder.encode_text(&cfg.prompt_for(class_name))?;
    Ok(PromptEmbedding { data, source_class: class_name.to_string(), origin: PromptOrigin::TextEncoder })
}

/// Row-wise standardisation without affine parameters.
pub fn layer_norm_rows(x: &Mat, eps: f64) -> Mat {
    let n = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|a| *a = (*a - mean) * is);
    }
    out
}

/// Stacks the raw feature vectors of `frames` into an `m x d_raw` matrix.
pub fn raw_feature_matrix(frames: &[FrameRef], d_raw: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(frames.len() * d_raw);
    for f in frames {
        match f {
            FrameRef::Feature(v) if v.len() == d_raw => data.extend_from_slice(v),
            FrameRef::Feature(v) => {
                return Err(Error::Shape(format!("frame feature has width {}, encoder expects {d_raw}", v.len())))
            }
            FrameRef::Path(p) => {
                return Err(Error::Input(format!(
                    "stub encoder reads feature frames only; got image path {}",
                    p.display()
                )))
            }
        }
    }
    Mat::from_vec(frames.len(), d_raw, data)
}

/// Seeded random projection followed by per-frame layer normalisation.
#[derive(Clone, Debug)]
pub struct StubVisualEncoder {
    projection: Mat,
}

impl StubVisualEncoder {
    pub fn new(d_raw: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, seed::stream::INIT, 0x7669_7375_616c);
        let normal = Normal::new(0.0, 1.0 / (d_raw as f64).sqrt()).expect("finite std");
        let data = (0..d_raw * dim).map(|_| normal.sample(&mut rng)).collect();
        Self { projection: Mat::from_vec(d_raw, dim, data).expect("shape") }
    }

    pub fn projection(&self) -> &Mat {
        &self.projection
    }

    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }
}

impl VisualEncoder for StubVisualEncoder {
    fn dim(&self) -> usize {
        self.projection.cols()
    }

    fn encode_video(&self, frames: &[FrameRef]) -> Result<FrameEmbeddingSeq> {
        let raw = raw_feature_matrix(frames, self.input_dim())?;
        FrameEmbeddingSeq::new(layer_norm_rows(&raw.matmul(&self.projection), LAYER_NORM_EPS))
    }
}

/// Hash of the prompt string seeds a Gaussian vector, which is scaled to unit norm.
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    dim: usize,
    seed: u64,
}

impl StubTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = seed::rng(key);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut v: Vec<f64> = (0..self.dim).map(|_| normal.sample(&mut rng)).collect();
        let n = crate::tensor::norm(&v);
        v.iter_mut().for_each(|a| *a /= n);
        Ok(v)
    }
}

pub type AdapterFactory =
    Arc<dyn Fn(&EncoderConfig) -> Result<(Arc<dyn VisualEncoder>, Arc<dyn TextEncoder>)> + Send + Sync>;

/// Maps `encoder.kind` names to adapter constructors. `stub` is built in and
/// cannot be overridden.
#[derive(Clone, Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, kind: impl Into<String>, factory: AdapterFactory) -> Result<()> {
        let kind = kind.into();
        if kind == "stub" {
            return Err(Error::Config("`stub` is reserved for the built-in encoders".into()));
        }
        self.factories.insert(kind, factory);
        Ok(())
    }

    pub fn build(&self, cfg: &EncoderConfig) -> Result<(Arc<dyn VisualEncoder>, Arc<dyn TextEncoder>)> {
        let factory = self
            .factories
            .get(&cfg.kind)
            .ok_or_else(|| Error::Config(format!("no encoder adapter registered for kind {:?}", cfg.kind)))?;
        let (visual, text) = factory(cfg)?;
        if visual.dim() != cfg.dim || text.dim() != cfg.dim {
            return Err(Error::Shape(format!(
                "adapter {:?} produces dims {}/{}, config expects {}",
                cfg.kind,
                visual.dim(),
                text.dim(),
                cfg.dim
            )));
        }
        Ok((visual, text))
    }
}

impl std::fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}
