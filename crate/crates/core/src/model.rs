//! Parameters of the full pipeline and the per-episode forward pass.
//!
//! Every sample in an episode goes through one shared graph: visual
//! encoding, prompt assignment, then for each enabled view the context
//! extractor, the fusion encoder, prototypes and alignment distances. The
//! returned graph ends in the total loss so the trainer can backprop it.

use std::sync::Arc;

use crate::autograd::{Graph, NodeId};
use crate::config::RunConfig;
use crate::encoders::{
    encode_label, raw_feature_matrix, AdapterRegistry, StubTextEncoder, StubVisualEncoder, TextEncoder, VisualEncoder,
    LAYER_NORM_EPS,
};
use crate::episodes::{sample_frames, Episode, FrameRef, VideoSample};
use crate::error::{Error, Result};
use crate::matching::{main_loss_graph, view_distance_graph};
use crate::mmfe::{fuse_graph, MmfeParams};
use crate::mvmd::{
    discriminants, distill_graph, partition, posterior_text, posterior_visual, DiscriminantScores, DistillLosses,
    ReliabilityPartition, ViewPosteriors,
};
use crate::params::{ParamId, ParamStore};
use crate::pps::{prompt_distribution, query_video_vector, select_index, similarity};
use crate::seed::{self, stream};
use crate::temporal_views::{BatchNormUpdate, GtceParams, LtceParams, NormMode, ViewKind, ViewParams};
use crate::tensor::{self, Mat};

#[derive(Clone)]
pub enum Backbone {
    /// Random projection kept in the parameter store (trainable on request).
    Stub { projection: ParamId, d_raw: usize },
    /// External frozen encoder; its outputs enter the graph as constants.
    Adapter(Arc<dyn VisualEncoder>),
}

#[derive(Clone, Debug)]
pub struct ViewBranch {
    pub kind: ViewKind,
    pub extractor: ViewParams,
    pub fusion: MmfeParams,
}

#[derive(Clone)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub text: Arc<dyn TextEncoder>,
    /// Prompt row for queries when prompt selection is switched off.
    pub null_token: ParamId,
    pub branches: Vec<ViewBranch>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("params", &self.store.len())
            .field("branches", &self.branches.iter().map(|b| b.kind).collect::<Vec<_>>())
            .finish()
    }
}

const VIEW_ORDER: [ViewKind; 3] = [ViewKind::Local, ViewKind::Global, ViewKind::None];

impl Model {
    /// Builds freshly initialised parameters for raw frames of width `d_raw`.
    pub fn new(cfg: &RunConfig, d_raw: usize) -> Result<Self> {
        Self::with_registry(cfg, d_raw, &AdapterRegistry::new())
    }

    pub fn with_registry(cfg: &RunConfig, d_raw: usize, registry: &AdapterRegistry) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.encoder.dim;
        let t = cfg.episode.frames;
        let mut store = ParamStore::new();
        let mut rng = seed::derived_rng(cfg.seed, stream::INIT, 1);

        let (backbone, text): (Backbone, Arc<dyn TextEncoder>) = if cfg.encoder.kind == "stub" {
            if d_raw == 0 {
                return Err(Error::Config("stub encoder needs feature frames with a known width".into()));
            }
            let stub = StubVisualEncoder::new(d_raw, dim, cfg.encoder.seed);
            let projection = store.add("encoder.projection", stub.projection().clone(), cfg.encoder.trainable);
            (Backbone::Stub { projection, d_raw }, Arc::new(StubTextEncoder::new(dim, cfg.encoder.seed)))
        } else {
            let (v, t) = registry.build(&cfg.encoder)?;
            (Backbone::Adapter(v), t)
        };

        let null_token = store.add_normal("prompt.null", 1, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        let mut branches = Vec::new();
        for kind in VIEW_ORDER.into_iter().filter(|k| cfg.views.has(*k)) {
            let prefix = format!("view.{kind}");
            let extractor = match kind {
                ViewKind::Local => ViewParams::Local(LtceParams::new(
                    &mut store,
                    &format!("{prefix}.ltce"),
                    dim,
                    cfg.views.ltce_kernel,
                    &mut rng,
                )?),
                ViewKind::Global => {
                    let p = GtceParams::new(&mut store, &format!("{prefix}.tcn"), dim, &cfg.views.dilations, &mut rng)?;
                    if let Some(w) = p.coverage_warning(t) {
                        eprintln!("warning: {w}");
                    }
                    ViewParams::Global(p)
                }
                ViewKind::None => ViewParams::None,
            };
            let fusion = MmfeParams::new(&mut store, &format!("{prefix}.mmfe"), t + 1, dim, &cfg.mmfe, &mut rng)?;
            branches.push(ViewBranch { kind, extractor, fusion });
        }
        Ok(Self { store, backbone, text, null_token, branches })
    }

    pub fn dim(&self) -> usize {
        self.store.value(self.null_token).cols()
    }

    pub fn branch(&self, kind: ViewKind) -> Option<&ViewBranch> {
        self.branches.iter().find(|b| b.kind == kind)
    }
}

/// Width of the raw feature frames in a sample, if it carries any.
pub fn feature_width(sample: &VideoSample) -> Option<usize> {
    sample.frames.iter().find_map(|f| match f {
        FrameRef::Feature(v) => Some(v.len()),
        FrameRef::Path(_) => None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewOutput {
    pub kind: ViewKind,
    /// `Q x N` alignment distances.
    pub distances: Mat,
    pub posteriors: Vec<ViewPosteriors>,
    pub scores: Vec<DiscriminantScores>,
    /// Fused features of every sample, support first then queries.
    pub features: Vec<Mat>,
}

#[derive(Debug)]
pub struct EpisodeOutput {
    pub graph: Graph,
    pub loss: NodeId,
    pub views: Vec<ViewOutput>,
    /// `Q x N` summed distances.
    pub distances: Mat,
    pub probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub main_loss: f64,
    pub distill: DistillLosses,
    pub total_loss: f64,
    pub partition: Option<ReliabilityPartition>,
    /// Class index of the prompt each query received.
    pub query_prompts: Vec<Option<usize>>,
    pub bn_updates: Vec<BatchNormUpdate>,
}

/// Runs one episode. `NormMode::Train` draws random frames within segments
/// and normalises with batch statistics; `NormMode::Eval` takes segment
/// centres and running statistics.
pub fn forward_episode(model: &Model, ep: &Episode, cfg: &RunConfig, mode: NormMode) -> Result<EpisodeOutput> {
    let m = cfg.episode.frames;
    let n = ep.way;
    let q_count = ep.query_count();
    let samples: Vec<&VideoSample> = ep.support.iter().chain(&ep.queries).collect();
    let deterministic = mode == NormMode::Eval;
    let store = &model.store;
    let mut g = Graph::new();

    // Visual encoding of all sampled frames as one (B*m) x D block.
    let clips = samples
        .iter()
        .enumerate()
        .map(|(i, s)| sample_frames(s, m, deterministic, seed::derive(ep.seed, stream::FRAMES, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let frames = match &model.backbone {
        Backbone::Stub { projection, d_raw } => {
            let raws = clips.iter().map(|c| raw_feature_matrix(c, *d_raw)).collect::<Result<Vec<_>>>()?;
            let x = g.constant(Mat::vstack(&raws.iter().collect::<Vec<_>>())?);
            let w = g.param(store, *projection);
            let proj = g.matmul(x, w);
            g.layer_norm_rows(proj, LAYER_NORM_EPS)
        }
        Backbone::Adapter(enc) => {
            let seqs = clips.iter().map(|c| enc.encode_video(c)).collect::<Result<Vec<_>>>()?;
            for s in &seqs {
                if s.frames() != m || s.dim() != model.dim() {
                    return Err(Error::Shape(format!("adapter produced {}x{}", s.frames(), s.dim())));
                }
            }
            g.constant(Mat::vstack(&seqs.iter().map(|s| s.data()).collect::<Vec<_>>())?)
        }
    };

    // Prompts: class tokens for the support set, selected tokens for queries.
    let class_tokens = ep
        .class_set
        .iter()
        .map(|c| encode_label(model.text.as_ref(), c, &cfg.encoder).map(|p| p.data))
        .collect::<Result<Vec<_>>>()?;
    let mut query_prompts = Vec::with_capacity(q_count);
    let mut token_nodes = Vec::with_capacity(samples.len());
    for s in 0..ep.support.len() {
        token_nodes.push(g.constant(Mat::row_vector(&class_tokens[s / ep.shot])));
    }
    let mut pps_rng = seed::derived_rng(ep.seed, stream::PPS, 0);
    let null = if cfg.pps.enabled { None } else { Some(g.param(store, model.null_token)) };
    for qi in 0..q_count {
        let b = ep.support.len() + qi;
        if let Some(nt) = null {
            token_nodes.push(nt);
            query_prompts.push(None);
            continue;
        }
        let clip = g.value(frames).slice_rows(b * m, m);
        let fq = query_video_vector(&clip);
        let sims = class_tokens.iter().map(|t| similarity(&fq, t)).collect::<Result<Vec<_>>>()?;
        let dist = prompt_distribution(&sims, cfg.pps.temperature, &ep.class_set)?;
        let pick = select_index(&dist, cfg.pps.mode, &mut pps_rng);
        token_nodes.push(g.constant(Mat::row_vector(&class_tokens[pick])));
        query_prompts.push(Some(pick));
    }

    let mut bn_updates = Vec::new();
    let mut views = Vec::with_capacity(model.branches.len());
    let mut dist_nodes = Vec::with_capacity(model.branches.len());
    for br in &model.branches {
        let ctx = br.extractor.forward(&mut g, store, frames, m, mode, &mut bn_updates)?;
        let fused: Vec<NodeId> = (0..samples.len())
            .map(|b| {
                let c = g.slice_rows(ctx, b * m, m);
                let f = g.slice_rows(frames, b * m, m);
                let q = g.concat_rows(&[token_nodes[b], c]);
                let kv = g.concat_rows(&[token_nodes[b], f]);
                fuse_graph(&mut g, store, &br.fusion, q, kv)
            })
            .collect();
        let protos: Vec<NodeId> = (0..n)
            .map(|c| {
                let members = &fused[c * ep.shot..(c + 1) * ep.shot];
                if members.len() == 1 {
                    members[0]
                } else {
                    let mut acc = members[0];
                    for &x in &members[1..] {
                        acc = g.add(acc, x);
                    }
                    g.scale(acc, 1.0 / members.len() as f64)
                }
            })
            .collect();
        let mut rows = Vec::with_capacity(q_count);
        let mut posteriors = Vec::with_capacity(q_count);
        for qi in 0..q_count {
            let fq = fused[ep.support.len() + qi];
            let cells = protos
                .iter()
                .map(|&u| view_distance_graph(&mut g, fq, u, cfg.otam.gamma, cfg.otam.bidirectional))
                .collect::<Result<Vec<_>>>()?;
            rows.push(g.concat_cols(&cells));
            let d: Vec<f64> = cells.iter().map(|&c| g.value(c).item()).collect();
            let qt = g.value(fq).row(0).to_vec();
            let pt: Vec<Vec<f64>> = protos.iter().map(|&u| g.value(u).row(0).to_vec()).collect();
            let text = posterior_text(&qt, &pt.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
            posteriors.push(ViewPosteriors { visual: posterior_visual(&d), text });
        }
        let table = g.concat_rows(&rows);
        dist_nodes.push(table);
        views.push(ViewOutput {
            kind: br.kind,
            distances: g.value(table).clone(),
            scores: posteriors.iter().map(discriminants).collect(),
            posteriors,
            features: fused.iter().map(|&f| g.value(f).clone()).collect(),
        });
    }

    let mut total = dist_nodes[0];
    for &d in &dist_nodes[1..] {
        total = g.add(total, d);
    }
    let distances = g.value(total).clone();
    if !distances.is_finite() {
        return Err(Error::Degenerate("non-finite episode distances".into()));
    }
    let main = main_loss_graph(&mut g, total, &ep.query_truth);
    let probs: Vec<Vec<f64>> = (0..q_count).map(|r| crate::matching::classify(distances.row(r))).collect();
    let predictions: Vec<usize> = probs.iter().map(|p| tensor::argmax(p)).collect();
    let correct = predictions.iter().zip(&ep.query_truth).filter(|(p, t)| p == t).count();
    let main_loss = g.value(main).item();

    let mut loss = main;
    let mut distill = DistillLosses::default();
    let mut part = None;
    let local = views.iter().position(|v| v.kind == ViewKind::Local);
    let global = views.iter().position(|v| v.kind == ViewKind::Global);
    if let (true, Some(li), Some(gi)) = (cfg.mvmd_active(), local, global) {
        let p = partition(&views[li].scores, &views[gi].scores, cfg.mvmd.conditions, cfg.mvmd.margin);
        let lambda = cfg.mvmd.lambda;
        let mut terms = Vec::new();
        if cfg.mvmd.direction.global_to_local() {
            if let Some(t) = distill_graph(&mut g, dist_nodes[gi], dist_nodes[li], &p.omega_g, &views[gi].scores) {
                distill.global_to_local = g.value(t).item();
                terms.push(t);
            }
        }
        if cfg.mvmd.direction.local_to_global() {
            if let Some(t) = distill_graph(&mut g, dist_nodes[li], dist_nodes[gi], &p.omega_l, &views[li].scores) {
                distill.local_to_global = g.value(t).item();
                terms.push(t);
            }
        }
        // A zero weight leaves the graph untouched so its gradients match a
        // run without distillation bit for bit.
        if lambda != 0.0 && !terms.is_empty() {
            let s = g.add_scalars(&terms);
            let s = g.scale(s, lambda);
            loss = g.add(main, s);
        }
        part = Some(p);
    }
    let total_loss = crate::mvmd::total_loss(main_loss, distill, cfg.mvmd.lambda);

    Ok(EpisodeOutput {
        graph: g,
        loss,
        views,
        distances,
        probs,
        predictions,
        accuracy: correct as f64 / q_count as f64,
        main_loss,
        distill,
        total_loss,
        partition: part,
        query_prompts,
        bn_updates: if mode == NormMode::Train { bn_updates } else { Vec::new() },
    })
}
