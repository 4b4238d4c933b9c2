//! Acceptance suite: one PASS/FAIL line per numbered criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines reach stdout in
//! order. Exits non-zero when any criterion fails.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use mdmf::autograd::Graph;
use mdmf::config::{DataSource, RunConfig};
use mdmf::episodes::{sample_episode, synth_generate, Part, SynthConfig};
use mdmf::harness::{ablate, parse_grid, AblationRow, MetricsRecord, Session};
use mdmf::matching::{classify, fuse_distance, main_loss, otam_directed, otam_with_grad, prototype, Prototype};
use mdmf::mmfe::{fuse_graph, FusedFeatures, MmfeConfig, MmfeParams, Role};
use mdmf::model::{forward_episode, Model};
use mdmf::mvmd::{
    discriminants, distill_losses, partition, posterior_text, posterior_visual, total_loss, Conditions,
    DistillLosses, ReliabilityPartition, ViewPosteriors,
};
use mdmf::params::ParamStore;
use mdmf::pps::{prompt_distribution, select_prompt, similarity, SelectMode};
use mdmf::encoders::{PromptEmbedding, PromptOrigin};
use mdmf::seed;
use mdmf::temporal_views::{gtce_graph, ltce, ltce_graph, tcn_graph, GtceParams, LtceParams, NormMode, ViewKind};
use mdmf::tensor::Mat;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want} (tol {tol:e})"))
}

fn random_mat(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let n = Normal::new(0.0, std).unwrap();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Path enumeration oracle for the alignment DP.

fn path_costs(c: &Mat) -> Vec<f64> {
    fn walk(c: &Mat, l: usize, m: usize, acc: f64, out: &mut Vec<f64>) {
        let (rows, cols) = c.shape();
        let acc = acc + c[(l, m)];
        if m + 1 == cols {
            out.push(acc);
        }
        if (m == 0 || m + 1 == cols) && l + 1 < rows {
            walk(c, l + 1, m, acc, out);
        }
        if m + 1 < cols {
            walk(c, l, m + 1, acc, out);
            if l + 1 < rows {
                walk(c, l + 1, m + 1, acc, out);
            }
        }
    }
    let mut out = Vec::new();
    for l in 0..c.rows() {
        walk(c, l, 0, 0.0, &mut out);
    }
    out
}

fn soft_oracle(c: &Mat, gamma: f64) -> f64 {
    let p = path_costs(c);
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    min - gamma * p.iter().map(|x| (-(x - min) / gamma).exp()).sum::<f64>().ln()
}

fn hard_oracle(c: &Mat) -> f64 {
    path_costs(c).into_iter().fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Norm-wise relative error between an analytic gradient and central
/// differences of `f` around `x`.
fn fd_rel_error(f: &dyn Fn(&Mat) -> f64, x: &Mat, grad: &Mat) -> f64 {
    let h = 1e-6;
    let mut fd = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        fd.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    let diff: f64 = fd.data().iter().zip(grad.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = mdmf::tensor::norm(fd.data()).max(mdmf::tensor::norm(grad.data())).max(1e-12);
    diff / scale
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let tol = 1e-6;
    let e = std::f64::consts::E;
    let sigmoid1 = e / (e + 1.0);

    // Prompt similarity and temperature softmax.
    close("cos((1,0),(1,1))", similarity(&[1.0, 0.0], &[1.0, 1.0]).map_err(|e| e.to_string())?, 0.5f64.sqrt(), tol)?;
    close("cos 5-digit", (similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() * 1e5).round() / 1e5, 0.70711, tol)?;
    let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
    let d = prompt_distribution(&[1.0, 0.0], 1.0, &names[..2]).map_err(|e| e.to_string())?;
    close("softmax(1,0)[0]", d.probs[0], sigmoid1, tol)?;
    close("softmax(1,0)[1]", d.probs[1], 1.0 - sigmoid1, tol)?;
    close("0.73106", d.probs[0], 0.73106, 5e-6)?;
    let d = prompt_distribution(&[0.4; 5], 0.1, &names).map_err(|e| e.to_string())?;
    for p in &d.probs {
        close("uniform", *p, 0.2, tol)?;
    }

    // Prototypes and alignment distances.
    let ff = |data: Mat| FusedFeatures { data, view: ViewKind::Local, role: Role::Support };
    let a = ff(Mat::zeros(3, 2));
    let b = ff(Mat::filled(3, 2, 2.0));
    let u = prototype(&[&a, &b], "c").map_err(|e| e.to_string())?;
    ensure(u.data.max_abs_diff(&Mat::filled(3, 2, 1.0)) <= tol, || "prototype mean".into())?;
    let mut rng = seed::rng(0xC1);
    let c = Mat::from_vec(3, 3, (0..9).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
    let (soft, _) = otam_directed(&c, 0.1).map_err(|e| e.to_string())?;
    close("otam vs path log-sum-exp, T=3", soft, soft_oracle(&c, 0.1), tol)?;
    let (hard, _) = otam_directed(&c, 1e-3).map_err(|e| e.to_string())?;
    close("otam vs hard-min, T=3", hard, hard_oracle(&c), 1e-4)?;
    let x = random_mat(5, 6, 1.0, &mut rng);
    let y = random_mat(5, 6, 1.0, &mut rng);
    let dxy = mdmf::matching::view_distance(
        &ff(x.clone()),
        &Prototype { data: y.clone(), class: "c".into(), view: ViewKind::Local },
        0.1,
        true,
    )
    .map_err(|e| e.to_string())?;
    let dyx = mdmf::matching::view_distance(&ff(y), &Prototype { data: x, class: "c".into(), view: ViewKind::Local }, 0.1, true)
        .map_err(|e| e.to_string())?;
    close("view distance symmetry", dxy, dyx, tol)?;
    close("fused distance", fuse_distance(1.5, 2.5), 4.0, tol)?;

    // Visual and text posteriors, discriminants.
    let p = posterior_visual(&[0.0, 1.0]);
    close("posterior (0,1)", p[0], sigmoid1, tol)?;
    close("posterior (0,1) second", p[1], 0.26894, 5e-6)?;
    let t = posterior_text(&[1.0, 0.0, 0.0], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).map_err(|e| e.to_string())?;
    close("text posterior", t[0], sigmoid1, tol)?;
    close("text posterior second", t[1], 1.0 / (e + 1.0), tol)?;
    let s = discriminants(&ViewPosteriors { visual: vec![0.7633, 0.1, 0.05, 0.05, 0.0367], text: vec![0.2; 5] });
    close("c_hat", s.c_hat, 0.7633, tol)?;
    close("c_tilde uniform", s.c_tilde, 0.2, tol)?;

    // Distillation and total loss.
    let part = ReliabilityPartition { omega_g: vec![0], omega_l: vec![] };
    let sc = [mdmf::mvmd::DiscriminantScores { c_hat: 0.5, c_tilde: 0.5 }];
    let l = distill_losses(&part, &[vec![0.8, 0.2]], &[vec![0.5, 0.5]], &sc, &sc);
    close("KL", l.global_to_local, 0.8 * (1.6f64).ln() + 0.2 * (0.4f64).ln(), tol)?;
    close("KL 5-digit", l.global_to_local, 0.19274, 5e-6)?;
    close("total loss", total_loss(1.0, DistillLosses { global_to_local: 0.2, local_to_global: 0.3 }, 1.0), 1.5, tol)?;

    // Classification and cross-entropy.
    let p = classify(&[0.0, 10.0, 10.0, 10.0, 10.0]);
    ensure(mdmf::tensor::argmax(&p) == 0 && p[0] > 0.99, || format!("classify {p:?}"))?;
    close("classify sums to 1", p.iter().sum(), 1.0, tol)?;
    close("uniform CE", main_loss(&[vec![0.2; 5]], &[2]).map_err(|e| e.to_string())?, 5f64.ln(), tol)?;
    close("ln 5", 5f64.ln(), 1.60944, 5e-6)?;
    Ok("prompt softmax, prototypes, OTAM oracles, posteriors, KL, losses".into())
}

fn criterion_2() -> Outcome {
    let gamma_hard = 1e-3;
    let mut worst_soft: f64 = 0.0;
    let mut worst_bi: f64 = 0.0;
    let mut worst_hard: f64 = 0.0;
    let mut over = 0;
    let mut bound_violations = 0;
    for t in 2..=4usize {
        let mut rng = seed::rng(0xC2 + t as u64);
        for _ in 0..100 {
            let c = Mat::from_vec(t, t, (0..t * t).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
            let (s, _) = otam_directed(&c, 0.1).map_err(|e| e.to_string())?;
            worst_soft = worst_soft.max((s - soft_oracle(&c, 0.1)).abs());
            let (b, _) = otam_with_grad(&c, 0.1, true).map_err(|e| e.to_string())?;
            let want = 0.5 * (soft_oracle(&c, 0.1) + soft_oracle(&c.transpose(), 0.1));
            worst_bi = worst_bi.max((b - want).abs());

            let (h, _) = otam_directed(&c, gamma_hard).map_err(|e| e.to_string())?;
            let gap = hard_oracle(&c) - h;
            worst_hard = worst_hard.max(gap.abs());
            if gap.abs() > 1e-4 {
                over += 1;
            }
            // Softmin sits in [min - gamma ln k, min] for k paths.
            let k = path_costs(&c).len() as f64;
            if gap < -1e-12 || gap > gamma_hard * k.ln() + 1e-12 {
                bound_violations += 1;
            }
        }
    }
    ensure(worst_soft <= 1e-6 && worst_bi <= 1e-6, || format!("soft DP off by {worst_soft:e} / {worst_bi:e}"))?;
    ensure(bound_violations == 0, || format!("{bound_violations} matrices outside the softmin bound"))?;
    ensure(over == 0, || {
        format!(
            "{over}/300 matrices exceed 1e-4 from the hard min at gamma=1e-3 (max gap {worst_hard:.2e}); \
             near-tied paths put softmin up to gamma*ln(#paths) below the min, so this is inherent \
             to smoothing; log-sum-exp agreement {:.1e}, softmin bound holds on all 300",
            worst_soft.max(worst_bi)
        )
    })?;
    Ok(format!("300 matrices; max |soft-oracle| {worst_soft:.1e}, max |hard-min gap| {worst_hard:.1e}"))
}

fn criterion_3() -> Outcome {
    let tol = 1e-3;
    let mut worst = [0.0f64; 4];

    // Alignment distance w.r.t. the cost matrix.
    for i in 0..5 {
        let mut rng = seed::rng(0xC30 + i);
        let t = 4 + i as usize;
        let c = Mat::from_vec(t, t, (0..t * t).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
        let (_, g) = otam_with_grad(&c, 0.1, true).map_err(|e| e.to_string())?;
        let f = |m: &Mat| otam_with_grad(m, 0.1, true).unwrap().0;
        worst[0] = worst[0].max(fd_rel_error(&f, &c, &g));
    }

    // Fusion encoder w.r.t. both input streams and the positional table.
    for i in 0..5 {
        let mut rng = seed::rng(0xC31 + i);
        let (t, d) = (8, 16);
        let mut store = ParamStore::new();
        let p = MmfeParams::new(&mut store, "m", t + 1, d, &MmfeConfig::default(), &mut rng).unwrap();
        let q = random_mat(t + 1, d, 1.0, &mut rng);
        let kv = random_mat(t + 1, d, 1.0, &mut rng);
        let w = random_mat(t + 1, d, 1.0, &mut rng);
        let run = |store: &ParamStore, q: &Mat, kv: &Mat| {
            let mut g = Graph::new();
            let qn = g.input(q.clone());
            let kn = g.input(kv.clone());
            let out = fuse_graph(&mut g, store, &p, qn, kn);
            let wn = g.constant(w.clone());
            let prod = g.mul(out, wn);
            let loss = g.sum(prod);
            (g, qn, kn, loss)
        };
        let (g, qn, kn, loss) = run(&store, &q, &kv);
        let grads = g.backward(loss);
        let gq = grads.wrt(qn).unwrap().clone();
        let gk = grads.wrt(kn).unwrap().clone();
        let mut acc = store.clone();
        grads.accumulate_into(&g, &mut acc);
        let gpos = acc.get(p.pos).grad.clone();
        let val = |s: &ParamStore, q: &Mat, kv: &Mat| {
            let (g, _, _, l) = run(s, q, kv);
            g.value(l).item()
        };
        worst[1] = worst[1].max(fd_rel_error(&|m| val(&store, m, &kv), &q, &gq));
        worst[1] = worst[1].max(fd_rel_error(&|m| val(&store, &q, m), &kv, &gk));
        let pos0 = store.value(p.pos).clone();
        worst[1] = worst[1].max(fd_rel_error(
            &|m| {
                let mut s = store.clone();
                s.set_value(p.pos, m.clone());
                val(&s, &q, &kv)
            },
            &pos0,
            &gpos,
        ));
    }

    // Local extractor in training mode (batch statistics over two clips).
    for i in 0..5 {
        let mut rng = seed::rng(0xC32 + i);
        let (t, d) = (8, 6);
        let mut store = ParamStore::new();
        let p = LtceParams::new(&mut store, "l", d, 3, &mut rng).unwrap();
        let x = random_mat(2 * t, d, 1.0, &mut rng);
        let w = random_mat(2 * t, d, 1.0, &mut rng);
        let run = |store: &ParamStore, x: &Mat| {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let out = ltce_graph(&mut g, store, &p, xn, t, NormMode::Train, &mut Vec::new()).unwrap();
            let wn = g.constant(w.clone());
            let prod = g.mul(out, wn);
            let loss = g.sum(prod);
            (g, xn, loss)
        };
        let (g, xn, loss) = run(&store, &x);
        let grads = g.backward(loss);
        let gx = grads.wrt(xn).unwrap().clone();
        let mut acc = store.clone();
        grads.accumulate_into(&g, &mut acc);
        let gw = acc.get(p.conv_weight[0]).grad.clone();
        worst[2] = worst[2].max(fd_rel_error(&|m| { let (g, _, l) = run(&store, m); g.value(l).item() }, &x, &gx));
        let w0 = store.value(p.conv_weight[0]).clone();
        worst[2] = worst[2].max(fd_rel_error(
            &|m| {
                let mut s = store.clone();
                s.set_value(p.conv_weight[0], m.clone());
                let (g, _, l) = run(&s, &x);
                g.value(l).item()
            },
            &w0,
            &gw,
        ));
    }

    // Global extractor.
    for i in 0..5 {
        let mut rng = seed::rng(0xC33 + i);
        let (t, d) = (8, 6);
        let mut store = ParamStore::new();
        let p = GtceParams::new(&mut store, "g", d, &[1, 2, 4], &mut rng).unwrap();
        let x = random_mat(t, d, 1.0, &mut rng);
        let w = random_mat(t, d, 1.0, &mut rng);
        let run = |store: &ParamStore, x: &Mat| {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let out = gtce_graph(&mut g, store, &p, xn, t);
            let wn = g.constant(w.clone());
            let prod = g.mul(out, wn);
            let loss = g.sum(prod);
            (g, xn, loss)
        };
        let (g, xn, loss) = run(&store, &x);
        let grads = g.backward(loss);
        let gx = grads.wrt(xn).unwrap().clone();
        let mut acc = store.clone();
        grads.accumulate_into(&g, &mut acc);
        let gw = acc.get(p.weights[0]).grad.clone();
        worst[3] = worst[3].max(fd_rel_error(&|m| { let (g, _, l) = run(&store, m); g.value(l).item() }, &x, &gx));
        let w0 = store.value(p.weights[0]).clone();
        worst[3] = worst[3].max(fd_rel_error(
            &|m| {
                let mut s = store.clone();
                s.set_value(p.weights[0], m.clone());
                let (g, _, l) = run(&s, &x);
                g.value(l).item()
            },
            &w0,
            &gw,
        ));
    }
    let names = ["otam", "mmfe", "ltce", "gtce"];
    for (n, w) in names.iter().zip(worst) {
        ensure(w <= tol, || format!("{n} relative error {w:e}"))?;
    }
    Ok(format!(
        "max rel err otam {:.1e}, mmfe {:.1e}, ltce {:.1e}, gtce {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn criterion_4() -> Outcome {
    let (t, d) = (8, 8);
    for draw in 0..10u64 {
        let mut rng = seed::rng(0xC4 + draw);
        let mut store = ParamStore::new();
        let lp = LtceParams::new(&mut store, "l", d, 3, &mut rng).unwrap();
        for bn in &lp.norm {
            store.set_value(bn.gamma, random_mat(1, d, 1.0, &mut rng));
            store.set_value(bn.beta, random_mat(1, d, 1.0, &mut rng));
            store.set_value(bn.running_mean, random_mat(1, d, 0.5, &mut rng));
            store.set_value(bn.running_var, random_mat(1, d, 0.3, &mut rng).map(|v| 0.5 + v.abs()));
        }
        let gp = GtceParams::new(&mut store, "g", d, &[1, 2, 4], &mut rng).unwrap();
        let x = random_mat(t, d, 1.0, &mut rng);

        let base = ltce(&x, &store, &lp, NormMode::Eval).map_err(|e| e.to_string())?.data;
        for s in 0..t {
            let mut xp = x.clone();
            xp.row_mut(s).iter_mut().for_each(|v| *v += 0.37);
            let out = ltce(&xp, &store, &lp, NormMode::Eval).map_err(|e| e.to_string())?.data;
            for r in 0..t {
                let changed = out.row(r) != base.row(r);
                if (r as isize - s as isize).abs() > 2 {
                    ensure(!changed, || format!("draw {draw}: frame {s} reached output {r}"))?;
                }
            }
            ensure(out.row(s) != base.row(s), || format!("draw {draw}: frame {s} has no local effect"))?;
        }

        let tcn_last = |x: &Mat| {
            let mut g = Graph::new();
            let xn = g.input(x.clone());
            let y = tcn_graph(&mut g, &store, &gp, xn, t);
            let last = g.slice_rows(y, t - 1, 1);
            let s = g.sum(last);
            let grads = g.backward(s);
            grads.wrt(xn).unwrap().clone()
        };
        let grad = tcn_last(&x);
        for s in 0..t {
            let m = grad.row(s).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            ensure(m > 1e-8, || format!("draw {draw}: frame {s} does not reach the broadcast row ({m:e})"))?;
        }
    }
    Ok("10 draws: local reach <= 2 frames, broadcast row sees all 8 frames".into())
}

fn criterion_5() -> Outcome {
    let names: Vec<String> = (0..5).map(|i| format!("class-{i}")).collect();
    let sims = [0.31, 0.25, 0.12, 0.28, 0.05];
    let dist = prompt_distribution(&sims, 0.1, &names).map_err(|e| e.to_string())?;
    let tokens: Vec<PromptEmbedding> = names
        .iter()
        .enumerate()
        .map(|(i, n)| PromptEmbedding {
            data: (0..4).map(|j| (i * 4 + j) as f64).collect(),
            source_class: n.clone(),
            origin: PromptOrigin::TextEncoder,
        })
        .collect();
    let mut rng = seed::rng(0xC5);
    let draws = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        let p = select_prompt(&dist, &tokens, SelectMode::Sample, &mut rng).map_err(|e| e.to_string())?;
        let idx = names.iter().position(|n| *n == p.source_class).ok_or("sampled class outside C")?;
        ensure(p.data == tokens[idx].data && p.origin == PromptOrigin::PpsSampled, || "token mismatch".into())?;
        counts[idx] += 1;
    }
    let tv: f64 =
        0.5 * counts.iter().zip(&dist.probs).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>();
    ensure(tv <= 0.01, || format!("total variation {tv}"))?;
    Ok(format!("10^5 draws, TV = {tv:.4}"))
}

fn posterior_with_max(top: f64, n: usize) -> Vec<f64> {
    let mut p = vec![(1.0 - top) / (n - 1) as f64; n];
    p[0] = top;
    p
}

fn criterion_6() -> Outcome {
    let local = ViewPosteriors { visual: posterior_with_max(0.7633, 5), text: posterior_with_max(0.24, 5) };
    let global = ViewPosteriors { visual: posterior_with_max(0.6299, 5), text: posterior_with_max(0.2254, 5) };
    let (ls, gs) = (discriminants(&local), discriminants(&global));
    ensure(ls.c_hat == 0.7633 && ls.c_tilde == 0.24, || "local maxima".into())?;
    ensure(gs.c_hat == 0.6299 && gs.c_tilde == 0.2254, || "global maxima".into())?;
    let part = partition(&[ls], &[gs], Conditions::default(), 0.0);
    ensure(part.omega_l == vec![0] && part.omega_g.is_empty(), || format!("partition {part:?}"))?;
    let l = distill_losses(&part, &[global.visual.clone()], &[local.visual.clone()], &[gs], &[ls]);
    ensure(l.global_to_local == 0.0 && l.local_to_global > 0.0, || format!("losses {l:?}"))?;
    Ok(format!("query in local-reliable set; local->global loss {:.5}, global->local 0", l.local_to_global))
}

fn synthetic(per_class: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataSource::Synthetic(SynthConfig { num_classes: 10, per_class, noise_sigma: 0.05, ..Default::default() });
    cfg.eval.part = Part::Train;
    cfg
}

fn criterion_7() -> Outcome {
    // Identical posteriors give zero loss in both directions.
    let p = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]];
    let sc = vec![mdmf::mvmd::DiscriminantScores { c_hat: 0.6, c_tilde: 0.4 }; 2];
    let part = ReliabilityPartition { omega_g: vec![0], omega_l: vec![1] };
    let l = distill_losses(&part, &p, &p, &sc, &sc);
    ensure(l == DistillLosses::default(), || format!("identical posteriors gave {l:?}"))?;

    // Disjoint reliability sets over 1000 real episodes.
    let cfg = synthetic(20);
    let DataSource::Synthetic(sc) = &cfg.data else { unreachable!() };
    let data = synth_generate(sc).map_err(|e| e.to_string())?;
    let model = Model::new(&cfg, sc.d_raw).map_err(|e| e.to_string())?;
    let mut sizes = (0, 0);
    for i in 0..1000u64 {
        let ep = sample_episode(&data, Part::Train, 5, 1, 5, seed::derive(0xC7, 0, i)).map_err(|e| e.to_string())?;
        let out = forward_episode(&model, &ep, &cfg, NormMode::Eval).map_err(|e| e.to_string())?;
        let part = out.partition.ok_or("distillation inactive")?;
        ensure(part.omega_g.iter().all(|q| !part.omega_l.contains(q)), || format!("episode {i}: overlap"))?;
        sizes.0 += part.omega_g.len();
        sizes.1 += part.omega_l.len();
    }

    // lambda = 0 against distillation switched off, 32 episodes.
    let mut zero = synthetic(20);
    zero.mvmd.lambda = 0.0;
    let mut off = synthetic(20);
    off.mvmd.enabled = false;
    let mut a = Session::new(zero).map_err(|e| e.to_string())?;
    let mut b = Session::new(off).map_err(|e| e.to_string())?;
    for ep in 0..32 {
        a.train_step().map_err(|e| e.to_string())?;
        b.train_step().map_err(|e| e.to_string())?;
        let same = a.model.store.iter().zip(b.model.store.iter()).all(|((_, p), (_, q))| {
            p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                && p.grad.data().iter().zip(q.grad.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        ensure(same, || format!("trajectories diverge at episode {ep}"))?;
    }
    ensure(a.optimizer.step == 2, || format!("expected 2 optimizer steps, saw {}", a.optimizer.step))?;
    Ok(format!(
        "1000 episodes disjoint (|Og| total {}, |Ol| total {}); 32-episode trajectories bitwise equal",
        sizes.0, sizes.1
    ))
}

fn criterion_8() -> Outcome {
    let mut cfg = synthetic(20);
    cfg.seed = 1;
    cfg.optim.lr = 1e-3;
    cfg.train.accumulation_steps = 1;
    cfg.train.episodes = 2000;
    cfg.mvmd.lambda = 1.0;
    let untrained = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
    let chance = untrained.evaluate(2000).map_err(|e| e.to_string())?;
    let mut s = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
    s.train(cfg.train.episodes, |_| Ok(())).map_err(|e| e.to_string())?;
    let trained = s.evaluate(500).map_err(|e| e.to_string())?;
    let detail = format!(
        "untrained {:.4} +/- {:.4} (2000 eps), trained {:.4} +/- {:.4} (500 eps after {} train eps)",
        chance.accuracy, chance.ci95, trained.accuracy, trained.ci95, cfg.train.episodes
    );
    ensure((chance.accuracy - 0.2).abs() <= 0.05, || format!("chance check failed: {detail}"))?;
    ensure(trained.accuracy >= 0.95, || format!("accuracy below 0.95: {detail}"))?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let grid = "\
train.episodes = 40
train.accumulation_steps = 1
optim.lr = 0.001
eval.episodes = 40
eval.part = train
[t4-1 distill, no pps]
mvmd.enabled = true
pps.enabled = false
[t4-2 distill, pps]
mvmd.enabled = true
pps.enabled = true
[t4-3 plain]
mvmd.enabled = false
pps.enabled = false
[t4-4 pps]
mvmd.enabled = false
pps.enabled = true
";
    let rows = parse_grid(grid, synthetic(20)).map_err(|e| e.to_string())?;
    let table = ablate(&rows).map_err(|e| e.to_string())?;
    ensure(table.len() == 4, || format!("{} rows", table.len()))?;
    let flags = [(true, false), (true, true), (false, false), (false, true)];
    let keys = |r: &AblationRow| -> Vec<String> {
        let v = serde_json::to_value(r).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    let schema = keys(&table[0]);
    for (r, (mvmd, pps)) in table.iter().zip(flags) {
        ensure(r.mvmd == mvmd && r.pps == pps, || format!("row {} flags", r.name))?;
        ensure((0.0..=1.0).contains(&r.accuracy), || format!("row {} accuracy", r.name))?;
        ensure(keys(r) == schema, || "schema differs between rows".into())?;
        ensure(r.views == "local,global", || "views".into())?;
    }
    let acc: Vec<String> = table.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
    Ok(format!("4 rows, accuracies [{}]", acc.join(", ")))
}

fn stripped(r: &MetricsRecord) -> MetricsRecord {
    MetricsRecord { wall_ms: 0.0, ..r.clone() }
}

fn criterion_10() -> Outcome {
    let mut cfg = synthetic(20);
    cfg.seed = 11;
    cfg.optim.lr = 1e-3;
    cfg.train.accumulation_steps = 4;
    let run = |n: usize| -> Result<Vec<String>, String> {
        let mut s = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        s.train(n, |r| {
            out.push(serde_json::to_string(&stripped(r))?);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        Ok(out)
    };
    let first = run(48)?;
    let second = run(48)?;
    ensure(first == second, || "metrics streams differ".into())?;

    // Save half-way, reload, compare forward outputs and the continued stream.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    let mut s = Session::new(cfg.clone()).map_err(|e| e.to_string())?;
    s.train(26, |_| Ok(())).map_err(|e| e.to_string())?;
    s.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let mut r = Session::load(&path).map_err(|e| e.to_string())?;
    for i in 0..5 {
        let (_, a) = s.eval_episode(Part::Train, i).map_err(|e| e.to_string())?;
        let (_, b) = r.eval_episode(Part::Train, i).map_err(|e| e.to_string())?;
        ensure(a.distances == b.distances && a.probs == b.probs, || format!("eval forward {i} differs"))?;
        for (va, vb) in a.views.iter().zip(&b.views) {
            ensure(va.features == vb.features, || "fused features differ".into())?;
        }
    }
    let mut tail_s = Vec::new();
    let mut tail_r = Vec::new();
    s.train(22, |m| {
        tail_s.push(serde_json::to_string(&stripped(m))?);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    r.train(22, |m| {
        tail_r.push(serde_json::to_string(&stripped(m))?);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ensure(tail_s == tail_r, || "resumed stream differs".into())?;
    ensure(tail_s[..] == first[26..], || "resumed stream differs from the uninterrupted run".into())?;
    Ok("48-episode streams bitwise equal; checkpoint reload exact; resumed run matches".into())
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("equation unit suite", Duration::from_secs(5), criterion_1),
        ("alignment DP vs path oracle", Duration::from_secs(30), criterion_2),
        ("gradient checks", Duration::from_secs(60), criterion_3),
        ("receptive fields", Duration::from_secs(600), criterion_4),
        ("prompt sampling fidelity", Duration::from_secs(600), criterion_5),
        ("gating worked example", Duration::from_secs(600), criterion_6),
        ("distillation sanity", Duration::from_secs(600), criterion_7),
        ("end-to-end overfit", Duration::from_secs(15 * 60), criterion_8),
        ("ablation grid smoke test", Duration::from_secs(600), criterion_9),
        ("determinism and checkpoint round-trip", Duration::from_secs(600), criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > *budget => Err(format!("{d}; over time budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  criterion {:>2}  {name}: {detail} [{:.2}s]", i + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {:>2}  {name}: {why} [{:.2}s]", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
