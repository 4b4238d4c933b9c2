//! Fusion encoder: a cross-attention transformer whose queries are the
//! token-prefixed temporal-context stream and whose keys/values are the
//! token-prefixed raw visual stream. Both streams get the same learned
//! positional embeddings before attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::encoders::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::temporal_views::ViewKind;
use crate::tensor::Mat;

/// `(T + 1) x D`; row 0 is the prompt embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPrefixedSeq {
    data: Mat,
}

impl TokenPrefixedSeq {
    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn token(&self) -> &[f64] {
        self.data.row(0)
    }
}

pub fn concat_token(token: &[f64], frames: &Mat) -> Result<TokenPrefixedSeq> {
    if token.len() != frames.cols() {
        return Err(Error::Shape(format!("token dim {} vs frame dim {}", token.len(), frames.cols())));
    }
    let data = Mat::vstack(&[&Mat::row_vector(token), frames])?;
    Ok(TokenPrefixedSeq { data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub data: Mat,
    pub view: ViewKind,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmfeConfig {
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for MmfeConfig {
    fn default() -> Self {
        Self { heads: 8, layers: 1, ffn_mult: 4 }
    }
}

impl MmfeConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!("mmfe.heads = {} must divide the embedding dim {dim}", self.heads)));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("mmfe.layers and mmfe.ffn_mult must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add_normal(format!("{name}.weight"), fan_in, fan_out, std, rng),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, fan_out), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0), true),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, dim), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul_row(n, gamma);
        g.add_row(s, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

#[derive(Clone, Debug)]
pub struct MmfeParams {
    pub pos: ParamId,
    pub heads: usize,
    pub blocks: Vec<Block>,
}

impl MmfeParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        seq_len: usize,
        dim: usize,
        cfg: &MmfeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let pos = store.add_normal(format!("{prefix}.pos"), seq_len, dim, 0.02, rng);
        let hidden = cfg.ffn_mult * dim;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.block{l}.{s}");
                Block {
                    query: Linear::new(store, &n("query"), dim, dim, rng),
                    key: Linear::new(store, &n("key"), dim, dim, rng),
                    value: Linear::new(store, &n("value"), dim, dim, rng),
                    out: Linear::new(store, &n("out"), dim, dim, rng),
                    norm1: Norm::new(store, &n("norm1"), dim),
                    ffn_in: Linear::new(store, &n("ffn_in"), dim, hidden, rng),
                    ffn_out: Linear::new(store, &n("ffn_out"), hidden, dim, rng),
                    norm2: Norm::new(store, &n("norm2"), dim),
                }
            })
            .collect();
        Ok(Self { pos, heads: cfg.heads, blocks })
    }
}

fn attention(g: &mut Graph, store: &ParamStore, b: &Block, heads: usize, x: NodeId, mem: NodeId) -> NodeId {
    let q = b.query.forward(g, store, x);
    let k = b.key.forward(g, store, mem);
    let v = b.value.forward(g, store, mem);
    let dim = g.value(q).cols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<NodeId> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            g.matmul(attn, vh)
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    b.out.forward(g, store, cat)
}

/// Post-norm transformer: attention, residual, norm, feed-forward, residual, norm.
pub fn fuse_graph(g: &mut Graph, store: &ParamStore, p: &MmfeParams, query: NodeId, kv: NodeId) -> NodeId {
    let pos = g.param(store, p.pos);
    let mut x = g.add(query, pos);
    let mem = g.add(kv, pos);
    for b in &p.blocks {
        let a = attention(g, store, b, p.heads, x, mem);
        let r = g.add(x, a);
        x = b.norm1.forward(g, store, r);
        let h = b.ffn_in.forward(g, store, x);
        let h = g.relu(h);
        let f = b.ffn_out.forward(g, store, h);
        let r = g.add(x, f);
        x = b.norm2.forward(g, store, r);
    }
    x
}

pub fn fuse(
    query: &TokenPrefixedSeq,
    kv: &TokenPrefixedSeq,
    store: &ParamStore,
    p: &MmfeParams,
    view: ViewKind,
    role: Role,
) -> Result<FusedFeatures> {
    let expected = store.value(p.pos).shape();
    if query.data.shape() != expected || kv.data.shape() != expected {
        return Err(Error::Shape(format!(
            "fusion inputs {:?} / {:?}, positional table {:?}",
            query.data.shape(),
            kv.data.shape(),
            expected
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(query.data.clone());
    let k = g.constant(kv.data.clone());
    let out = fuse_graph(&mut g, store, p, q, k);
    Ok(FusedFeatures { data: g.value(out).clone(), view, role })
}
