//! Prototypes, ordered temporal alignment distance, distance fusion and the
//! classification head.
//!
//! The alignment DP runs over a cost matrix `C[l][m]` where `l` indexes the
//! first sequence and `m` the second. A path visits every column `m` in
//! order. Between columns it may keep `l` or advance it by one. Inside the
//! first and the last column it may also advance `l` without moving `m`,
//! which is what lets an alignment start and finish at any frame. Each
//! distinct path is counted once and its cost is the sum of visited cells.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mmfe::FusedFeatures;
use crate::temporal_views::ViewKind;
use crate::tensor::{self, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub data: Mat,
    pub class: String,
    pub view: ViewKind,
}

pub fn prototype(samples: &[&FusedFeatures], class: &str) -> Result<Prototype> {
    let first = samples.first().ok_or_else(|| Error::Input("prototype of an empty support set".into()))?;
    let mut acc = Mat::zeros(first.data.rows(), first.data.cols());
    for s in samples {
        if s.view != first.view || s.data.shape() != first.data.shape() {
            return Err(Error::Shape("prototype members disagree in view or shape".into()));
        }
        acc.add_assign(&s.data);
    }
    acc.scale_assign(1.0 / samples.len() as f64);
    Ok(Prototype { data: acc, class: class.to_string(), view: first.view })
}

/// `C[i][j] = 1 - cos(a_i, b_j)`.
pub fn frame_cost(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("frame dims {} vs {}", a.cols(), b.cols())));
    }
    let normalise = |m: &Mat| -> Result<Mat> {
        let mut out = m.clone();
        for r in 0..m.rows() {
            let n = tensor::norm(m.row(r));
            if n == 0.0 {
                return Err(Error::Degenerate(format!("zero-norm frame {r} in cost matrix")));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    };
    let sim = normalise(a)?.matmul_nt(&normalise(b)?);
    Ok(sim.map(|s| 1.0 - s))
}

fn softmin(xs: &[f64], gamma: f64) -> f64 {
    let scaled: Vec<f64> = xs.iter().map(|x| -x / gamma).collect();
    -gamma * tensor::log_sum_exp(&scaled)
}

/// Cells feeding into `(l, m)`; `None` stands for a fresh start at cost 0.
fn predecessors(l: usize, m: usize, cols: usize) -> Vec<Option<(usize, usize)>> {
    let mut out = Vec::with_capacity(3);
    if m == 0 {
        out.push(None);
    } else {
        out.push(Some((l, m - 1)));
        if l > 0 {
            out.push(Some((l - 1, m - 1)));
        }
    }
    if (m == 0 || m + 1 == cols) && l > 0 {
        out.push(Some((l - 1, m)));
    }
    out
}

fn check(cost: &Mat, gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("otam gamma must be > 0, got {gamma}")));
    }
    if cost.rows() == 0 || cost.cols() == 0 {
        return Err(Error::Shape("empty cost matrix".into()));
    }
    if !cost.is_finite() {
        return Err(Error::Degenerate("non-finite alignment cost".into()));
    }
    Ok(())
}

/// One-directional smoothed alignment score and its gradient w.r.t. `cost`.
pub fn otam_directed(cost: &Mat, gamma: f64) -> Result<(f64, Mat)> {
    check(cost, gamma)?;
    let (rows, cols) = cost.shape();
    let mut d = Mat::zeros(rows, cols);
    let mut scratch = Vec::with_capacity(3);
    for m in 0..cols {
        for l in 0..rows {
            scratch.clear();
            scratch.extend(predecessors(l, m, cols).into_iter().map(|p| p.map_or(0.0, |(i, j)| d[(i, j)])));
            d.row_mut(l)[m] = cost[(l, m)] + softmin(&scratch, gamma);
        }
    }
    let last: Vec<f64> = (0..rows).map(|l| d[(l, cols - 1)]).collect();
    let score = softmin(&last, gamma);

    // Adjoint of every cell, swept in reverse evaluation order.
    let mut e = Mat::zeros(rows, cols);
    for (l, v) in last.iter().enumerate() {
        e.row_mut(l)[cols - 1] = (-(v - score) / gamma).exp();
    }
    for m in (0..cols).rev() {
        for l in (0..rows).rev() {
            let adj = e[(l, m)];
            if adj == 0.0 {
                continue;
            }
            let here = d[(l, m)] - cost[(l, m)];
            for (i, j) in predecessors(l, m, cols).into_iter().flatten() {
                let w = (-(d[(i, j)] - here) / gamma).exp();
                e.row_mut(i)[j] += adj * w;
            }
        }
    }
    Ok((score, e))
}

/// Symmetrised distance `(otam(C) + otam(C^T)) / 2` with its gradient.
pub fn otam_with_grad(cost: &Mat, gamma: f64, bidirectional: bool) -> Result<(f64, Mat)> {
    let (forward, mut grad) = otam_directed(cost, gamma)?;
    if !bidirectional {
        return Ok((forward, grad));
    }
    let (backward, grad_t) = otam_directed(&cost.transpose(), gamma)?;
    let grad_t = grad_t.transpose();
    grad = grad.zip_map(&grad_t, |a, b| 0.5 * (a + b));
    Ok((0.5 * (forward + backward), grad))
}

pub fn otam(cost: &Mat, gamma: f64) -> Result<f64> {
    otam_with_grad(cost, gamma, true).map(|(v, _)| v)
}

fn visual_rows(m: &Mat) -> Result<Mat> {
    if m.rows() < 2 {
        return Err(Error::Shape("fused features need a prompt row and at least one frame".into()));
    }
    Ok(m.slice_rows(1, m.rows() - 1))
}

pub fn view_distance(fq: &FusedFeatures, proto: &Prototype, gamma: f64, bidirectional: bool) -> Result<f64> {
    if fq.view != proto.view {
        return Err(Error::Input(format!("query view {} vs prototype view {}", fq.view, proto.view)));
    }
    let cost = frame_cost(&visual_rows(&fq.data)?, &visual_rows(&proto.data)?)?;
    otam_with_grad(&cost, gamma, bidirectional).map(|(v, _)| v)
}

/// Differentiable form of [`view_distance`] on graph nodes holding full
/// `(T+1) x D` fused features.
pub fn view_distance_graph(
    g: &mut Graph,
    query: NodeId,
    proto: NodeId,
    gamma: f64,
    bidirectional: bool,
) -> Result<NodeId> {
    let (rows, _) = g.value(query).shape();
    let (prows, _) = g.value(proto).shape();
    if rows < 2 || prows < 2 {
        return Err(Error::Shape("fused features need a prompt row and at least one frame".into()));
    }
    let a = g.slice_rows(query, 1, rows - 1);
    let b = g.slice_rows(proto, 1, prows - 1);
    for n in [a, b] {
        let v = g.value(n);
        if (0..v.rows()).any(|r| tensor::norm(v.row(r)) == 0.0) {
            return Err(Error::Degenerate("zero-norm frame in cost matrix".into()));
        }
    }
    let a = g.l2_normalize_rows(a, 0.0);
    let b = g.l2_normalize_rows(b, 0.0);
    let sim = g.matmul_nt(a, b);
    let cost = g.affine(sim, -1.0, 1.0);
    let (value, grad) = otam_with_grad(g.value(cost), gamma, bidirectional)?;
    Ok(g.scalar_fn(cost, value, grad))
}

pub fn fuse_distance(global: f64, local: f64) -> f64 {
    global + local
}

/// Class probabilities from fused distances: softmax of the negated values.
pub fn classify(dists: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = dists.iter().map(|d| -d).collect();
    tensor::softmax(&neg)
}

pub fn main_loss(probs: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    if probs.len() != truth.len() || probs.is_empty() {
        return Err(Error::Input("main loss needs one truth label per query".into()));
    }
    let total: f64 = probs.iter().zip(truth).map(|(p, &t)| -p[t].ln()).sum();
    Ok(total / probs.len() as f64)
}

/// Mean cross-entropy of `softmax(-dists)` on a `Q x N` node.
pub fn main_loss_graph(g: &mut Graph, dists: NodeId, truth: &[usize]) -> NodeId {
    let (q, n) = g.value(dists).shape();
    let logits = g.scale(dists, -1.0);
    let logp = g.log_softmax_rows(logits);
    let mut onehot = Mat::zeros(q, n);
    for (r, &t) in truth.iter().enumerate() {
        onehot.row_mut(r)[t] = 1.0;
    }
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask);
    let total = g.sum(picked);
    g.scale(total, -1.0 / q as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cost(rows: usize, cols: usize, s: u64) -> Mat {
        let mut rng = seed::rng(s);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap()
    }

    fn fused(data: Mat) -> FusedFeatures {
        FusedFeatures { data, view: ViewKind::Local, role: crate::mmfe::Role::Query }
    }

    #[test]
    fn path_count_for_two_frames() {
        // Starts (0,0),(1,0) and the column-0 descent, then one step right,
        // then optional descent in the last column.
        let c = Mat::zeros(2, 2);
        assert_eq!(oracle::path_costs(&c).len(), 5);
    }

    #[test]
    fn zero_costs_give_negative_smoothing_offset_only() {
        let c = Mat::zeros(4, 4);
        let d = otam(&c, 1e-4).unwrap();
        assert!(d.abs() < 1e-3);
        assert!(d <= 0.0);
    }

    #[test]
    fn matches_path_oracle() {
        for t in 2..=4 {
            for s in 0..20 {
                let c = random_cost(t, t, 100 * t as u64 + s);
                let (v, _) = otam_directed(&c, 0.1).unwrap();
                assert!((v - oracle::soft(&c, 0.1)).abs() < 1e-9);
                let (h, _) = otam_directed(&c, 1e-3).unwrap();
                assert!((h - oracle::hard(&c)).abs() < 1e-4 + 1e-3 * (oracle::path_costs(&c).len() as f64).ln());
            }
        }
    }

    #[test]
    fn rectangular_costs_match_oracle() {
        let c = random_cost(3, 5, 9);
        let (v, _) = otam_directed(&c, 0.2).unwrap();
        assert!((v - oracle::soft(&c, 0.2)).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for s in 0..5 {
            let c = random_cost(4, 4, 40 + s);
            let (_, grad) = otam_with_grad(&c, 0.1, true).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for j in 0..4 {
                    let mut p = c.clone();
                    p.row_mut(i)[j] += h;
                    let mut m = c.clone();
                    m.row_mut(i)[j] -= h;
                    let fd = (otam(&p, 0.1).unwrap() - otam(&m, 0.1).unwrap()) / (2.0 * h);
                    let g = grad[(i, j)];
                    assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-3), "{fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(matches!(otam(&Mat::zeros(2, 2), 0.0), Err(Error::Parameter(_))));
        assert!(matches!(otam(&Mat::zeros(2, 2), -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn frame_cost_examples() {
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = frame_cost(&a, &a).unwrap();
        assert!(c[(0, 0)].abs() < 1e-12 && c[(1, 1)].abs() < 1e-12);
        assert!((c[(0, 1)] - 1.0).abs() < 1e-12);
        let b = Mat::from_rows(&[vec![-1.0, 0.0], vec![0.0, -3.0]]).unwrap();
        let c = frame_cost(&a, &b).unwrap();
        assert!((c[(0, 0)] - 2.0).abs() < 1e-12 && (c[(1, 1)] - 2.0).abs() < 1e-12);
        let z = Mat::zeros(2, 2);
        assert!(matches!(frame_cost(&a, &z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn prototype_examples() {
        let a = fused(Mat::zeros(3, 2));
        let b = fused(Mat::filled(3, 2, 2.0));
        assert_eq!(prototype(&[&a], "x").unwrap().data, a.data);
        assert_eq!(prototype(&[&b, &b], "x").unwrap().data, b.data);
        assert_eq!(prototype(&[&a, &b], "x").unwrap().data, Mat::filled(3, 2, 1.0));
        assert!(matches!(prototype(&[], "x"), Err(Error::Input(_))));
    }

    #[test]
    fn view_distance_properties() {
        let mut rng = seed::rng(5);
        let data = Mat::from_vec(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let q = fused(data.clone());
        let u = Prototype { data: data.clone(), class: "c".into(), view: ViewKind::Local };
        let d = view_distance(&q, &u, 1e-3, true).unwrap();
        assert!(d.abs() < 1e-2, "{d}");

        let other = Mat::from_vec(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let u2 = Prototype { data: other.clone(), class: "c".into(), view: ViewKind::Local };
        let ab = view_distance(&q, &u2, 0.1, true).unwrap();
        let ba = view_distance(&fused(other), &Prototype { data, class: "c".into(), view: ViewKind::Local }, 0.1, true)
            .unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn prompt_row_is_ignored() {
        let mut rng = seed::rng(6);
        let a = Mat::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Mat::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let u = Prototype { data: b, class: "c".into(), view: ViewKind::Local };
        let d1 = view_distance(&fused(a.clone()), &u, 0.1, true).unwrap();
        let mut a2 = a;
        a2.row_mut(0).copy_from_slice(&[9.0, -3.0, 0.5, 7.0]);
        let d2 = view_distance(&fused(a2), &u, 0.1, true).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn graph_distance_agrees_with_value_path() {
        let mut rng = seed::rng(7);
        let a = Mat::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Mat::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let expected =
            view_distance(&fused(a.clone()), &Prototype { data: b.clone(), class: "c".into(), view: ViewKind::Local }, 0.1, true)
                .unwrap();
        let mut g = Graph::new();
        let qa = g.input(a.clone());
        let pb = g.constant(b.clone());
        let d = view_distance_graph(&mut g, qa, pb, 0.1, true).unwrap();
        assert!((g.value(d).item() - expected).abs() < 1e-12);

        let grads = g.backward(d);
        let ga = grads.wrt(qa).unwrap().clone();
        let h = 1e-6;
        for (r, c) in [(0, 0), (1, 2), (4, 3)] {
            let mut p = a.clone();
            p.row_mut(r)[c] += h;
            let mut m = a.clone();
            m.row_mut(r)[c] -= h;
            let proto = Prototype { data: b.clone(), class: "c".into(), view: ViewKind::Local };
            let fd = (view_distance(&fused(p), &proto, 0.1, true).unwrap()
                - view_distance(&fused(m), &proto, 0.1, true).unwrap())
                / (2.0 * h);
            assert!((fd - ga[(r, c)]).abs() < 1e-6, "{fd} vs {}", ga[(r, c)]);
        }
    }

    #[test]
    fn classify_and_loss_examples() {
        let p = classify(&[3.0; 5]);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-12));
        let p = classify(&[0.0, 10.0, 10.0, 10.0, 10.0]);
        assert_eq!(tensor::argmax(&p), 0);
        assert!(p[0] > 0.99);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(fuse_distance(1.5, 2.5), 4.0);
        assert_eq!(fuse_distance(0.0, 0.0), 0.0);

        let uniform = vec![vec![0.2; 5]];
        assert!((main_loss(&uniform, &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let onehot = vec![vec![0.0, 1.0, 0.0]];
        assert_eq!(main_loss(&onehot, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let d = Mat::from_rows(&[vec![0.3, 1.2, 0.7], vec![2.0, 0.1, 0.4]]).unwrap();
        let truth = [0, 2];
        let probs: Vec<Vec<f64>> = (0..2).map(|r| classify(d.row(r))).collect();
        let mut g = Graph::new();
        let n = g.input(d);
        let l = main_loss_graph(&mut g, n, &truth);
        assert!((g.value(l).item() - main_loss(&probs, &truth).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn classify_is_shift_invariant_and_monotone(
            d in proptest::collection::vec(0.0f64..20.0, 2..8),
            shift in -50.0f64..50.0,
        ) {
            let p = classify(&d);
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            let q = classify(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let neg: Vec<f64> = d.iter().map(|x| -x).collect();
            prop_assert_eq!(tensor::argmax(&p), tensor::argmax(&neg));
        }

        #[test]
        fn soft_dp_matches_enumeration(t in 2usize..5, s in 0u64..1000, gamma in 0.05f64..1.0) {
            let c = random_cost(t, t, s);
            let (v, _) = otam_directed(&c, gamma).unwrap();
            prop_assert!((v - oracle::soft(&c, gamma)).abs() < 1e-9);
        }
    }
}
