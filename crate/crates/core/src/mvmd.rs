//! Mutual distillation between the local and global views.
//!
//! Each view yields a visual posterior (from its distances) and a text
//! posterior (from prompt-row cosines). Their maxima rate how sure the view
//! is about a query. When one view is surer in every enabled mode it
//! becomes the teacher for that query.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{self, Mat};

/// Floor applied inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-9;

pub fn posterior_visual(dists: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = dists.iter().map(|d| -d).collect();
    tensor::softmax(&neg)
}

pub fn posterior_text(query_token: &[f64], class_tokens: &[&[f64]]) -> Result<Vec<f64>> {
    let sims = class_tokens
        .iter()
        .map(|t| {
            tensor::cosine(query_token, t).ok_or_else(|| Error::Degenerate("zero-norm prompt token".into()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(tensor::softmax(&sims))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPosteriors {
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminantScores {
    pub c_hat: f64,
    pub c_tilde: f64,
}

fn max_of(p: &[f64]) -> f64 {
    p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn discriminants(p: &ViewPosteriors) -> DiscriminantScores {
    DiscriminantScores { c_hat: max_of(&p.visual), c_tilde: max_of(&p.text) }
}

/// Which distillation terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Bidirectional,
    /// Local teaches global only.
    UpDown,
    /// Global teaches local only.
    DownUp,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Bidirectional => "bidirectional",
            Direction::UpDown => "up_down",
            Direction::DownUp => "down_up",
        }
    }

    pub fn global_to_local(self) -> bool {
        self != Direction::UpDown
    }

    pub fn local_to_global(self) -> bool {
        self != Direction::DownUp
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bidirectional" => Ok(Direction::Bidirectional),
            "up_down" => Ok(Direction::UpDown),
            "down_up" => Ok(Direction::DownUp),
            other => Err(Error::Config(format!("unknown mvmd.direction `{other}`"))),
        }
    }
}

/// Modes consulted by the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditions {
    pub text: bool,
    pub visual: bool,
}

impl Default for Conditions {
    fn default() -> Self {
        Self { text: true, visual: true }
    }
}

impl fmt::Display for Conditions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.text {
            parts.push("t_compare");
        }
        if self.visual {
            parts.push("v_compare");
        }
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Conditions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut c = Conditions { text: false, visual: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "t_compare" => c.text = true,
                "v_compare" => c.visual = true,
                other => return Err(Error::Config(format!("unknown mvmd condition `{other}`"))),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityPartition {
    pub omega_g: Vec<usize>,
    pub omega_l: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reliable {
    Global,
    Local,
    Neither,
}

/// Gate for a single query.
pub fn judge(local: DiscriminantScores, global: DiscriminantScores, cond: Conditions, margin: f64) -> Reliable {
    let beats = |a: f64, b: f64| a > b + margin;
    let (use_text, use_visual) = if cond.text || cond.visual { (cond.text, cond.visual) } else { (false, true) };
    let local_wins = (!use_visual || beats(local.c_hat, global.c_hat)) && (!use_text || beats(local.c_tilde, global.c_tilde));
    let global_wins =
        (!use_visual || beats(global.c_hat, local.c_hat)) && (!use_text || beats(global.c_tilde, local.c_tilde));
    match (local_wins, global_wins) {
        (true, false) => Reliable::Local,
        (false, true) => Reliable::Global,
        _ => Reliable::Neither,
    }
}

pub fn partition(
    local: &[DiscriminantScores],
    global: &[DiscriminantScores],
    cond: Conditions,
    margin: f64,
) -> ReliabilityPartition {
    let mut out = ReliabilityPartition::default();
    for (q, (l, g)) in local.iter().zip(global).enumerate() {
        match judge(*l, *g, cond, margin) {
            Reliable::Global => out.omega_g.push(q),
            Reliable::Local => out.omega_l.push(q),
            Reliable::Neither => {}
        }
    }
    out
}

/// `KL(p || q)` with both logs floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()) })
        .sum()
}

fn weighted(members: &[usize], teacher: &[Vec<f64>], student: &[Vec<f64>], scores: &[DiscriminantScores]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &q in members {
        let w = scores[q].c_hat + scores[q].c_tilde;
        num += w * kl_divergence(&teacher[q], &student[q]);
        den += w;
    }
    num / den
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub global_to_local: f64,
    pub local_to_global: f64,
}

/// Values of both distillation terms from per-query visual posteriors.
pub fn distill_losses(
    part: &ReliabilityPartition,
    global_post: &[Vec<f64>],
    local_post: &[Vec<f64>],
    global_scores: &[DiscriminantScores],
    local_scores: &[DiscriminantScores],
) -> DistillLosses {
    DistillLosses {
        global_to_local: weighted(&part.omega_g, global_post, local_post, global_scores),
        local_to_global: weighted(&part.omega_l, local_post, global_post, local_scores),
    }
}

/// Differentiable distillation term. `teacher_dists` and `student_dists` are
/// `Q x N` distance nodes; the teacher side and the weights are constants.
pub fn distill_graph(
    g: &mut Graph,
    teacher_dists: NodeId,
    student_dists: NodeId,
    members: &[usize],
    scores: &[DiscriminantScores],
) -> Option<NodeId> {
    if members.is_empty() {
        return None;
    }
    let teacher = g.value(teacher_dists).clone();
    let (_, n) = teacher.shape();
    let weights: Vec<f64> = members.iter().map(|&q| scores[q].c_hat + scores[q].c_tilde).collect();
    let den: f64 = weights.iter().sum();

    // loss = sum_q w_q/den * sum_c t_qc (ln t_qc - ln s_qc); only ln s is live.
    let mut coeff = Mat::zeros(members.len(), n);
    let mut constant = 0.0;
    for (i, &q) in members.iter().enumerate() {
        let t = posterior_visual(teacher.row(q));
        for (c, &tc) in t.iter().enumerate() {
            let w = weights[i] / den * tc;
            coeff.row_mut(i)[c] = -w;
            if tc > 0.0 {
                constant += w * tc.max(PROB_FLOOR).ln();
            }
        }
    }
    let rows: Vec<NodeId> = members.iter().map(|&q| g.slice_rows(student_dists, q, 1)).collect();
    let picked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    let logits = g.scale(picked, -1.0);
    let logp = g.log_softmax_rows(logits);
    let c = g.constant(coeff);
    let prod = g.mul(logp, c);
    let s = g.sum(prod);
    Some(g.affine(s, 1.0, constant))
}

pub fn total_loss(main: f64, losses: DistillLosses, lambda: f64) -> f64 {
    main + lambda * (losses.global_to_local + losses.local_to_global)
}
