//! Temporal context extractors.
//!
//! * local: two blocks of {same-padded temporal conv, ReLU, batch norm};
//!   each output frame sees `kernel - 1` neighbours on either side in total.
//! * global: a causal dilated conv stack whose last frame sees the whole
//!   clip; that frame is broadcast over time and added to the input.
//! * none: identity, so the fusion encoder reduces to self-attention.
//!
//! All extractors work on a batch of clips stacked vertically
//! (`B * T x D`); convolutions never cross clip boundaries.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Local,
    Global,
    None,
}

impl ViewKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Local => "local",
            ViewKind::Global => "global",
            ViewKind::None => "none",
        }
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "local" => Ok(ViewKind::Local),
            "global" => Ok(ViewKind::Global),
            "none" => Ok(ViewKind::None),
            other => Err(Error::Config(format!("unknown view {other:?}"))),
        }
    }
}

impl std::fmt::Display for ViewKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    pub data: Mat,
    pub view: ViewKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, with running averages updated afterwards.
    Train,
    /// Frozen running averages.
    Eval,
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BatchNormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub fn apply_batch_norm_updates(store: &mut ParamStore, updates: &[BatchNormUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            let p = store.get_mut(id);
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Mat::filled(1, dim, 1.0), true),
            beta: store.add(format!("{prefix}.beta"), Mat::zeros(1, dim), true),
            running_mean: store.add(format!("{prefix}.running_mean"), Mat::zeros(1, dim), false),
            running_var: store.add(format!("{prefix}.running_var"), Mat::filled(1, dim, 1.0), false),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: NormMode,
        updates: &mut Vec<BatchNormUpdate>,
    ) -> NodeId {
        let normed = match mode {
            NormMode::Train => {
                let (n, mean, var) = g.batch_norm_cols(x, BATCH_NORM_EPS);
                updates.push(BatchNormUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                });
                n
            }
            NormMode::Eval => {
                let neg_mean = g.constant(store.value(self.running_mean).map(|m| -m));
                let inv_std = g.constant(store.value(self.running_var).map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()));
                let centred = g.add_row(x, neg_mean);
                g.mul_row(centred, inv_std)
            }
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let scaled = g.mul_row(normed, gamma);
        g.add_row(scaled, beta)
    }
}

/// Temporal convolution over stacked clips: output row `t` is
/// `sum_j x[t + taps[j]] * W_j + b`, with zero padding at clip edges.
fn temporal_conv(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    clip_len: usize,
    taps: &[isize],
    weight: ParamId,
    bias: ParamId,
) -> NodeId {
    let shifted: Vec<NodeId> =
        taps.iter().map(|&d| if d == 0 { x } else { g.shift_rows(x, -d, clip_len) }).collect();
    let stacked = if shifted.len() == 1 { shifted[0] } else { g.concat_cols(&shifted) };
    let w = g.param(store, weight);
    let b = g.param(store, bias);
    let y = g.matmul(stacked, w);
    g.add_row(y, b)
}

#[derive(Clone, Debug)]
pub struct LtceParams {
    pub kernel: usize,
    pub conv_weight: [ParamId; 2],
    pub conv_bias: [ParamId; 2],
    pub norm: [BatchNormParams; 2],
}

impl LtceParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("views.ltce.kernel must be odd, got {kernel}")));
        }
        let std = (1.0 / (kernel * dim) as f64).sqrt();
        let mut layer = |i: usize, store: &mut ParamStore| {
            let w = store.add_normal(format!("{prefix}.conv{i}.weight"), kernel * dim, dim, std, rng);
            let b = store.add(format!("{prefix}.conv{i}.bias"), Mat::zeros(1, dim), true);
            (w, b)
        };
        let (w1, b1) = layer(1, store);
        let (w2, b2) = layer(2, store);
        Ok(Self {
            kernel,
            conv_weight: [w1, w2],
            conv_bias: [b1, b2],
            norm: [
                BatchNormParams::new(store, &format!("{prefix}.bn1"), dim),
                BatchNormParams::new(store, &format!("{prefix}.bn2"), dim),
            ],
        })
    }

    fn taps(&self) -> Vec<isize> {
        let r = (self.kernel / 2) as isize;
        (-r..=r).collect()
    }

    /// How far (in frames) one output frame can see in either direction.
    pub fn reach(&self) -> usize {
        2 * (self.kernel / 2)
    }
}

/// Local view: conv, ReLU, BN, conv, ReLU, BN.
pub fn ltce_graph(
    g: &mut Graph,
    store: &ParamStore,
    p: &LtceParams,
    x: NodeId,
    clip_len: usize,
    mode: NormMode,
    updates: &mut Vec<BatchNormUpdate>,
) -> Result<NodeId> {
    if clip_len < p.kernel {
        return Err(Error::Shape(format!("local view needs at least {} frames, got {clip_len}", p.kernel)));
    }
    let taps = p.taps();
    let mut h = x;
    for i in 0..2 {
        h = temporal_conv(g, store, h, clip_len, &taps, p.conv_weight[i], p.conv_bias[i]);
        h = g.relu(h);
        h = p.norm[i].forward(g, store, h, mode, updates);
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct GtceParams {
    pub dilations: Vec<usize>,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

/// Frames visible to the last output frame of a kernel-2 causal stack.
pub fn receptive_field(dilations: &[usize]) -> usize {
    1 + dilations.iter().sum::<usize>()
}

impl GtceParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, dilations: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::Config("views.tcn.dilations must be a non-empty list of positive ints".into()));
        }
        let std = (1.0 / (2 * dim) as f64).sqrt();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, _) in dilations.iter().enumerate() {
            weights.push(store.add_normal(format!("{prefix}.tcn{i}.weight"), 2 * dim, dim, std, rng));
            biases.push(store.add(format!("{prefix}.tcn{i}.bias"), Mat::zeros(1, dim), true));
        }
        Ok(Self { dilations: dilations.to_vec(), weights, biases })
    }

    /// Warning text when the last frame cannot see the whole clip.
    pub fn coverage_warning(&self, clip_len: usize) -> Option<String> {
        let rf = receptive_field(&self.dilations);
        (rf < clip_len).then(|| {
            format!("views.tcn.dilations {:?} reach {rf} frames, fewer than the clip length {clip_len}", self.dilations)
        })
    }
}

/// Causal dilated stack, returning the per-frame TCN output (before broadcast).
pub fn tcn_graph(g: &mut Graph, store: &ParamStore, p: &GtceParams, x: NodeId, clip_len: usize) -> NodeId {
    let mut h = x;
    let last = p.dilations.len() - 1;
    for (i, &d) in p.dilations.iter().enumerate() {
        h = temporal_conv(g, store, h, clip_len, &[-(d as isize), 0], p.weights[i], p.biases[i]);
        if i != last {
            h = g.relu(h);
        }
    }
    h
}

/// Global view: last TCN frame repeated over time, plus the input.
pub fn gtce_graph(g: &mut Graph, store: &ParamStore, p: &GtceParams, x: NodeId, clip_len: usize) -> NodeId {
    let h = tcn_graph(g, store, p, x, clip_len);
    let broadcast = g.repeat_last_row(h, clip_len);
    g.add(broadcast, x)
}

#[derive(Clone, Debug)]
pub enum ViewParams {
    Local(LtceParams),
    Global(GtceParams),
    None,
}

impl ViewParams {
    pub fn kind(&self) -> ViewKind {
        match self {
            ViewParams::Local(_) => ViewKind::Local,
            ViewParams::Global(_) => ViewKind::Global,
            ViewParams::None => ViewKind::None,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        clip_len: usize,
        mode: NormMode,
        updates: &mut Vec<BatchNormUpdate>,
    ) -> Result<NodeId> {
        match self {
            ViewParams::Local(p) => ltce_graph(g, store, p, x, clip_len, mode, updates),
            ViewParams::Global(p) => Ok(gtce_graph(g, store, p, x, clip_len)),
            ViewParams::None => Ok(x),
        }
    }
}

/// Runs one extractor on a single clip outside any training graph.
pub fn extract(view: &ViewParams, store: &ParamStore, frames: &Mat, mode: NormMode) -> Result<ContextFeatures> {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let out = view.forward(&mut g, store, x, frames.rows(), mode, &mut Vec::new())?;
    Ok(ContextFeatures { data: g.value(out).clone(), view: view.kind() })
}

pub fn ltce(frames: &Mat, store: &ParamStore, p: &LtceParams, mode: NormMode) -> Result<ContextFeatures> {
    extract(&ViewParams::Local(p.clone()), store, frames, mode)
}

pub fn gtce(frames: &Mat, store: &ParamStore, p: &GtceParams) -> Result<ContextFeatures> {
    extract(&ViewParams::Global(p.clone()), store, frames, NormMode::Eval)
}

pub fn ntce(frames: &Mat) -> ContextFeatures {
    ContextFeatures { data: frames.clone(), view: ViewKind::None }
}
