//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion in order and exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use vdrive::autodiff::{Graph, Var};
use vdrive::cvqvae::{self, nearest_codes, quantize, Codebook, CvqVae, CvqVaeConfig};
use vdrive::eval::{collision_rate, l2_metric, trajectory_collides, Footprint};
use vdrive::nn::{Bound, ParamStore};
use vdrive::policy::{
    actor_loss_with, corridor_transitions, evaluate_policy, train_policy, Actor, NoiseSchedule, PolicyConfig,
    PolicyState, PolicyTrainer, TaskConfig, Transition,
};
use vdrive::refine::{refine_examples, train_refinement, trajectory_mse, ActionPair, RefineConfig, RefineExample, RefinementHead};
use vdrive::reward::{rule_reward, RewardConfig};
use vdrive::scene::{generate_episode, generate_scene, ActionTriplet, NavCommand, Rect, SceneParams};
use vdrive::tensor::{read_vdtn, write_vdtn, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---- 1 ------------------------------------------------------------------

fn reward_oracle() -> Outcome {
    let mut r = rng(101);
    let (mut worst_center, mut worst_h, mut p_off_mismatch) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..=24), r.random_range(1..=24));
        let mask = random_mask(&mut r, h, w);
        let n = r.random_range(1..=12);
        let traj = random_trajectory(&mut r, &mask, n);
        let cfg = RewardConfig {
            alpha: r.random_range(0.1..5.0),
            beta: r.random_range(0.5..20.0),
            ..Default::default()
        };
        let got = rule_reward(&mask, &traj, &cfg).unwrap();
        let want = naive_rule_reward(&mask_rows(&mask), &traj, cfg.alpha, cfg.beta);
        p_off_mismatch += usize::from(got.p_off != want.p_off);
        worst_center = worst_center.max(rel(got.r_center, want.r_center, 1e-300));
        worst_h = worst_h.max(rel(got.r_h, want.r_h, 1e-300));
    }
    outcome(
        p_off_mismatch == 0 && worst_center <= 1e-9 && worst_h <= 1e-9,
        format!("1000 cases, P_off mismatches {p_off_mismatch}, max rel err R_center {worst_center:.1e}, R_h {worst_h:.1e}"),
    )
}

// ---- 2 ------------------------------------------------------------------

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

fn weighted(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

fn dim(r: &mut impl Rng) -> usize {
    r.random_range(1..=4)
}

/// One randomized instance of a primitive: inputs and the scalar function.
fn primitive_case(op: &str, r: &mut impl Rng) -> (Vec<Tensor<f64>>, Build) {
    let (m, n) = (dim(r), dim(r));
    let w = uniform(r, &[m, n], -2.0, 2.0);
    let unary = |f: fn(&mut Graph<f64>, Var) -> Var, x: Tensor<f64>, w: Tensor<f64>| -> (Vec<Tensor<f64>>, Build) {
        (vec![x], Box::new(move |g, v| {
            let y = f(g, v[0]);
            weighted(g, y, &w)
        }))
    };
    match op {
        "matmul" => {
            let k = dim(r);
            let a = uniform(r, &[m, k], -2.0, 2.0);
            let b = uniform(r, &[k, n], -2.0, 2.0);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            }))
        }
        "add" | "sub" | "mul" => {
            let a = uniform(r, &[m, n], -2.0, 2.0);
            let b = uniform(r, &[m, n], -2.0, 2.0);
            let op = op.to_string();
            (vec![a, b], Box::new(move |g, v| {
                let y = match op.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }
                .unwrap();
                weighted(g, y, &w)
            }))
        }
        "add_bias" => {
            let a = uniform(r, &[m, n], -2.0, 2.0);
            let b = uniform(r, &[n], -2.0, 2.0);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            }))
        }
        "minimum" => {
            let a = uniform(r, &[m, n], -2.0, 2.0);
            let gap = uniform_away_from_zero(r, &[m, n], 1.0, 0.05);
            let b = Tensor::new(vec![m, n], a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect()).unwrap();
            (vec![a, b], Box::new(move |g, v| {
                let y = g.minimum(v[0], v[1]).unwrap();
                weighted(g, y, &w)
            }))
        }
        "scale" | "offset" => {
            let c = r.random_range(-2.0..2.0);
            let x = uniform(r, &[m, n], -2.0, 2.0);
            let scale = op == "scale";
            (vec![x], Box::new(move |g, v| {
                let y = if scale { g.scale(v[0], c) } else { g.offset(v[0], c) };
                weighted(g, y, &w)
            }))
        }
        "relu" => unary(|g, x| g.relu(x), uniform_away_from_zero(r, &[m, n], 2.0, 0.05), w),
        "exp" => unary(|g, x| g.exp(x), uniform(r, &[m, n], -2.0, 2.0), w),
        "log" => unary(|g, x| g.log(x), uniform(r, &[m, n], 0.2, 2.0), w),
        "tanh" => unary(|g, x| g.tanh(x), uniform(r, &[m, n], -2.0, 2.0), w),
        "sigmoid" => unary(|g, x| g.sigmoid(x), uniform(r, &[m, n], -2.0, 2.0), w),
        "softmax" => unary(|g, x| g.softmax(x), uniform(r, &[m, n], -2.0, 2.0), w),
        "log_softmax" => unary(|g, x| g.log_softmax(x), uniform(r, &[m, n], -2.0, 2.0), w),
        "layer_norm" => {
            let n = r.random_range(2..=6);
            let w = uniform(r, &[m, n], -2.0, 2.0);
            unary(|g, x| g.layer_norm(x), uniform(r, &[m, n], -2.0, 2.0), w)
        }
        "concat0" | "concat1" => {
            let axis = usize::from(op == "concat1");
            let (m2, n2) = if axis == 0 { (dim(r), n) } else { (m, dim(r)) };
            let a = uniform(r, &[m, n], -2.0, 2.0);
            let b = uniform(r, &[m2, n2], -2.0, 2.0);
            let out = if axis == 0 { [m + m2, n] } else { [m, n + n2] };
            let w = uniform(r, &out, -2.0, 2.0);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.concat(&[v[0], v[1]], axis).unwrap();
                weighted(g, y, &w)
            }))
        }
        "slice" => {
            let axis = r.random_range(0..2);
            let len = if axis == 0 { m } else { n };
            let start = r.random_range(0..len);
            let end = r.random_range(start + 1..=len);
            let out = if axis == 0 { [end - start, n] } else { [m, end - start] };
            let w = uniform(r, &out, -2.0, 2.0);
            (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(move |g, v| {
                let y = g.slice(v[0], axis, start, end).unwrap();
                weighted(g, y, &w)
            }))
        }
        "reshape" => {
            let w = uniform(r, &[n * m], -2.0, 2.0);
            (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(move |g, v| {
                let y = g.reshape(v[0], &[n * m]).unwrap();
                weighted(g, y, &w)
            }))
        }
        "transpose" => {
            let w = uniform(r, &[n, m], -2.0, 2.0);
            (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(move |g, v| {
                let y = g.transpose(v[0]).unwrap();
                weighted(g, y, &w)
            }))
        }
        "sum" => (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(|g, v| g.sum(v[0]))),
        "mean" => (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(|g, v| g.mean(v[0]))),
        "mse" => (
            vec![uniform(r, &[m, n], -2.0, 2.0), uniform(r, &[m, n], -2.0, 2.0)],
            Box::new(|g, v| g.mse(v[0], v[1]).unwrap()),
        ),
        "bce" => {
            let target = Tensor::new(vec![m, n], (0..m * n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect()).unwrap();
            (vec![uniform(r, &[m, n], 0.05, 0.95)], Box::new(move |g, v| {
                let t = g.constant(target.clone());
                g.bce(v[0], t).unwrap()
            }))
        }
        "gather_rows" => {
            let k = r.random_range(1..=6);
            let idx: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
            (vec![uniform(r, &[k, n], -2.0, 2.0)], Box::new(move |g, v| {
                let y = g.gather_rows(v[0], &idx).unwrap();
                weighted(g, y, &w)
            }))
        }
        "pick" => {
            let idx: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            let w = uniform(r, &[m], -2.0, 2.0);
            (vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(move |g, v| {
                let y = g.pick(v[0], &idx).unwrap();
                weighted(g, y, &w)
            }))
        }
        "tile" => (vec![uniform(r, &[n], -2.0, 2.0)], Box::new(move |g, v| {
            let y = g.tile(v[0], m).unwrap();
            weighted(g, y, &w)
        })),
        "clamp_cols" => {
            let lo: Vec<f64> = (0..n).map(|_| r.random_range(-1.5..0.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + r.random_range(0.5..2.0)).collect();
            let mut x = Vec::with_capacity(m * n);
            for _ in 0..m {
                for j in 0..n {
                    let gap = r.random_range(0.05..0.5);
                    x.push(match r.random_range(0..3) {
                        0 => lo[j] - gap,
                        1 => hi[j] + gap,
                        _ => r.random_range(lo[j] + 0.05..hi[j] - 0.05),
                    });
                }
            }
            (vec![Tensor::new(vec![m, n], x).unwrap()], Box::new(move |g, v| {
                let y = g.clamp_cols(v[0], &lo, &hi).unwrap();
                weighted(g, y, &w)
            }))
        }
        other => panic!("unknown op {other}"),
    }
}

const PRIMITIVES: [&str; 30] = [
    "matmul", "add", "add_bias", "sub", "mul", "minimum", "scale", "offset", "relu", "exp", "log", "tanh", "sigmoid",
    "softmax", "log_softmax", "layer_norm", "concat0", "concat1", "slice", "reshape", "transpose", "sum", "mean",
    "mse", "bce", "gather_rows", "pick", "tile", "clamp_cols", "stop_gradient",
];

/// `stop_gradient` and `straight_through` have adjoints that differ from the
/// derivative of their forward value by definition; each is checked against
/// the derivative of an explicitly frozen surrogate.
fn surrogate_case(op: &str, r: &mut impl Rng) -> f64 {
    let (m, n) = (dim(r), dim(r));
    let w = uniform(r, &[m, n], -2.0, 2.0);
    let x0 = uniform(r, &[m, n], -2.0, 2.0);
    let (real, frozen): (Build, Build) = match op {
        "stop_gradient" => {
            // x * sg(x) versus x * x0
            let (w1, w2, x0c) = (w.clone(), w.clone(), x0.clone());
            (
                Box::new(move |g, v| {
                    let s = g.stop_gradient(v[0]);
                    let y = g.mul(v[0], s).unwrap();
                    weighted(g, y, &w1)
                }),
                Box::new(move |g, v| {
                    let c = g.constant(x0c.clone());
                    let y = g.mul(v[0], c).unwrap();
                    weighted(g, y, &w2)
                }),
            )
        }
        _ => {
            // straight_through(x, q) versus x + (q - x0)
            let q = uniform(r, &[m, n], -2.0, 2.0);
            let shift = Tensor::new(vec![m, n], q.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect()).unwrap();
            let (w1, w2) = (w.clone(), w.clone());
            (
                Box::new(move |g, v| {
                    let qc = g.constant(q.clone());
                    let y = g.straight_through(v[0], qc).unwrap();
                    weighted(g, y, &w1)
                }),
                Box::new(move |g, v| {
                    let c = g.constant(shift.clone());
                    let y = g.add(v[0], c).unwrap();
                    weighted(g, y, &w2)
                }),
            )
        }
    };
    let a = reverse_grad(std::slice::from_ref(&x0), &real).concat();
    let b = numeric_grad(&[x0], 1e-5, &frozen).concat();
    rel_vec(&a, &b)
}

/// Reverse gradient of `f` at `store` against central differences of
/// `reference` on a random subset of coordinates. Coordinates whose one-sided
/// slopes disagree straddle a ReLU or clamp kink within `h`; they have no
/// central-difference reference and are dropped and counted.
fn store_gradcheck(
    store: &ParamStore<f64>,
    coords: usize,
    r: &mut impl Rng,
    f: &dyn Fn(&mut Graph<f64>, &Bound) -> Var,
    reference: &dyn Fn(&mut Graph<f64>, &Bound) -> Var,
) -> (f64, usize) {
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g);
    let out = f(&mut g, &p);
    let grads = g.backward(out).unwrap();
    let mut all: Vec<(usize, usize)> = store
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    all.shuffle(r);
    all.truncate(coords);
    let h = 1e-6;
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::<f64>::new();
        let p = s.bind_frozen(&mut g);
        let out = reference(&mut g, &p);
        g.value(out).item()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut kinks = 0;
    let mut s = store.clone();
    let f0 = eval(&s);
    for &(i, j) in &all {
        let x0 = s.tensors()[i].data()[j];
        s.tensors_mut()[i].data_mut()[j] = x0 + h;
        let up = eval(&s);
        s.tensors_mut()[i].data_mut()[j] = x0 - h;
        let down = eval(&s);
        s.tensors_mut()[i].data_mut()[j] = x0;
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) + 1e-5 {
            kinks += 1;
            continue;
        }
        a.push(grads.wrt(p.vars()[i]).data()[j]);
        b.push((up - down) / (2.0 * h));
    }
    (rel_vec(&a, &b), kinks)
}

fn cvq_case(trial: u64, r: &mut impl Rng) -> (f64, usize) {
    let config = CvqVaeConfig {
        codes: 6,
        code_dim: 4,
        enc_hidden: 8,
        dec_hidden: 8,
        ..Default::default()
    };
    let model = CvqVae::new(config, 16, 16, 1, 1000 + trial).unwrap();
    let inputs: Vec<_> = (0..2)
        .map(|_| {
            let image = Tensor::new(vec![16, 16, 1], (0..256).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
            let traj: Vec<[f64; 2]> = (0..4).map(|_| [r.random_range(0.0..16.0), r.random_range(0.0..16.0)]).collect();
            let target = Tensor::new(vec![16, 16], (0..256).map(|_| f32::from(u8::from(r.random_bool(0.5)))).collect()).unwrap();
            model.cell_inputs(&image, &traj, Some(&target)).unwrap()
        })
        .collect();
    let batch: Vec<_> = inputs.iter().collect();
    let store = model.params.cast::<f64>();
    let code_slot = store.names().iter().position(|n| n == "codebook").unwrap();

    // base-point assignment and latents
    let mut g = Graph::<f64>::new();
    let p = store.bind_frozen(&mut g);
    let z_e0 = model.encode_graph(&mut g, &p, &batch).unwrap();
    let z_e0 = g.value(z_e0).clone();
    let (idx, _) = nearest_codes(&z_e0, &store.tensors()[code_slot]).unwrap();
    let z_q0: Vec<f64> = idx.iter().flat_map(|&i| store.tensors()[code_slot].row(i).to_vec()).collect();
    let z_q0 = Tensor::new(z_e0.dims().to_vec(), z_q0).unwrap();
    let shift = Tensor::new(z_e0.dims().to_vec(), z_q0.data().iter().zip(z_e0.data()).map(|(q, e)| q - e).collect()).unwrap();
    let target: Vec<f32> = batch.iter().flat_map(|b| b.target.clone()).collect();
    let target = Tensor::new(vec![z_e0.dims()[0], target.len() / z_e0.dims()[0]], target).unwrap().cast::<f64>();
    let beta = model.config.commitment_beta;
    let bsz = batch.len() as f64;

    let real = |g: &mut Graph<f64>, p: &Bound| model.forward_batch(g, p, &batch).unwrap().loss.total;
    // The same loss written without stop-gradient or straight-through:
    // decoder fed z_e + (z_q0 - z_e0), codebook term with z_e0 frozen,
    // commitment term with z_q0 frozen.
    let surrogate = |g: &mut Graph<f64>, p: &Bound| {
        let z_e = model.encode_graph(g, p, &batch).unwrap();
        let s = g.constant(shift.clone());
        let z_in = g.add(z_e, s).unwrap();
        let probs = model.decode_graph(g, p, z_in, &batch).unwrap();
        let t = g.constant(target.clone());
        let recon = g.bce(probs, t).unwrap();
        let z_q = g.gather_rows(p.vars()[code_slot], &idx).unwrap();
        let e0 = g.constant(z_e0.clone());
        let d1 = g.sub(z_q, e0).unwrap();
        let d1 = g.mul(d1, d1).unwrap();
        let cb = g.sum(d1);
        let q0 = g.constant(z_q0.clone());
        let d2 = g.sub(z_e, q0).unwrap();
        let d2 = g.mul(d2, d2).unwrap();
        let cm = g.sum(d2);
        let cm = g.scale(cm, beta);
        let t1 = g.add(recon, cb).unwrap();
        let t2 = g.add(t1, cm).unwrap();
        g.scale(t2, 1.0 / bsz)
    };
    store_gradcheck(&store, 48, r, &real, &surrogate)
}

fn actor_case(trial: u64, r: &mut impl Rng) -> (f64, usize) {
    let config = PolicyConfig {
        diffusion_steps: 4,
        hidden: 8,
        state_dim: 8,
        ..Default::default()
    };
    let (codes, grid_len) = (4, 4);
    let actor = Actor::new(config, codes, grid_len, 2000 + trial).unwrap();
    let state = |r: &mut dyn rand::RngCore| PolicyState {
        current: (0..grid_len).map(|_| r.random_range(4..4 + codes as u32)).collect(),
        predicted: (0..grid_len).map(|_| r.random_range(4..4 + codes as u32)).collect(),
        u0: ActionTriplet::new(r.random_range(-1.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)),
        nav: NavCommand::from_index(r.random_range(0..3)).unwrap(),
    };
    let transitions: Vec<Transition> = (0..2)
        .map(|_| Transition {
            s: state(r),
            a: ActionTriplet::new(r.random_range(-1.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)),
            r: r.random_range(-1.0..1.0),
            s_next: state(r),
        })
        .collect();
    let batch: Vec<&Transition> = transitions.iter().collect();
    let noise: Vec<(usize, [f64; 3])> = (0..2)
        .map(|_| (r.random_range(0..4), [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]))
        .collect();
    let schedule = NoiseSchedule::cosine(4).unwrap();
    let store = actor.params.cast::<f64>();
    let loss = |g: &mut Graph<f64>, p: &Bound| {
        let states: Vec<&PolicyState> = batch.iter().map(|t| &t.s).collect();
        let emb = actor.encode(g, p, &states).unwrap();
        actor_loss_with(g, &batch, &noise, &schedule, |g, a_t, ts| actor.denoise(g, p, a_t, ts, emb)).unwrap()
    };
    store_gradcheck(&store, 48, r, &loss, &loss)
}

fn refine_case(trial: u64, r: &mut impl Rng) -> (f64, usize) {
    let config = RefineConfig {
        width: 8,
        depth: 1,
        heads: 2,
        ..Default::default()
    };
    let mut head = RefinementHead::new(config, 4, 3000 + trial).unwrap();
    // the decode layer starts at zero; give it weights so every path carries gradient
    for (name, t) in head.params.names().to_vec().iter().zip(head.params.tensors_mut()) {
        if name.starts_with("decode") {
            for v in t.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    let pt = |r: &mut dyn rand::RngCore| [r.random_range(0.0..64.0), r.random_range(0.0..64.0)];
    let act = |r: &mut dyn rand::RngCore| ActionTriplet::new(r.random_range(-1.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0));
    let examples: Vec<RefineExample> = (0..2)
        .map(|_| RefineExample {
            coarse: (0..4).map(|_| pt(r)).collect(),
            actions: ActionPair { prev: act(r), curr: act(r) },
            target: (0..4).map(|_| pt(r)).collect(),
        })
        .collect();
    let batch: Vec<&RefineExample> = examples.iter().collect();
    let store = head.params.cast::<f64>();
    let loss = |g: &mut Graph<f64>, p: &Bound| head.loss(g, p, &batch).unwrap();
    store_gradcheck(&store, 48, r, &loss, &loss)
}

fn gradient_audit() -> Outcome {
    let mut r = rng(202);
    let mut worst_prim = (0.0f64, "");
    for op in PRIMITIVES.iter().chain(["straight_through"].iter()) {
        for _ in 0..50 {
            let err = if *op == "stop_gradient" || *op == "straight_through" {
                surrogate_case(op, &mut r)
            } else {
                let (inputs, f) = primitive_case(op, &mut r);
                gradcheck(&inputs, 1e-5, &*f)
            };
            if err > worst_prim.0 {
                worst_prim = (err, op);
            }
        }
    }
    let mut worst = [0.0f64; 3];
    let mut kinks = 0;
    for t in 0..50 {
        let cases = [cvq_case(t, &mut r), actor_case(t, &mut r), refine_case(t, &mut r)];
        for (k, (err, n)) in cases.into_iter().enumerate() {
            worst[k] = worst[k].max(err);
            kinks += n;
        }
    }
    let pass = worst_prim.0 <= 1e-4 && worst.iter().all(|&e| e <= 1e-3);
    outcome(
        pass,
        format!(
            "{} primitives x 50, max rel err {:.1e} ({}); composites x 50: VQ total {:.1e}, actor {:.1e}, refinement {:.1e} ({} of {} coordinates on a kink skipped)",
            PRIMITIVES.len() + 1,
            worst_prim.0,
            worst_prim.1,
            worst[0],
            worst[1],
            worst[2],
            kinks,
            3 * 50 * 48
        ),
    )
}

// ---- 3 ------------------------------------------------------------------

fn quantization() -> Outcome {
    let mut r = rng(303);
    let (k, d, cells) = (32, 16, 10_000);
    let mut codes: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| f64::from(r.random_range(-1.0f32..1.0))).collect())
        .collect();
    // duplicate codes force exact ties
    for (dst, src) in [(20, 3), (31, 3), (17, 9)] {
        codes[dst] = codes[src].clone();
    }
    let mut z = Vec::with_capacity(cells * d);
    for i in 0..cells {
        if i % 10 == 0 {
            z.extend(codes[r.random_range(0..k)].iter().map(|&v| v as f32));
        } else {
            z.extend((0..d).map(|_| r.random_range(-1.2f32..1.2)));
        }
    }
    let flat: Vec<f32> = codes.iter().flatten().map(|&v| v as f32).collect();
    let book = Codebook::new(Tensor::new(vec![k, d], flat).unwrap()).unwrap();
    let z_e = Tensor::new(vec![cells, d], z).unwrap();
    let grid = quantize(&z_e, &book).unwrap();
    let mismatches = (0..cells)
        .filter(|&i| {
            let cell: Vec<f64> = z_e.row(i).iter().map(|&v| f64::from(v)).collect();
            grid.indices[i] != brute_nearest(&cell, &codes)
        })
        .count();
    let again = quantize(&grid.z_q, &book).unwrap();
    let projection = again.indices == grid.indices && again.z_q.data() == grid.z_q.data();
    outcome(
        mismatches == 0 && projection,
        format!("{cells} cells K={k}: {mismatches} index mismatches vs exhaustive scan, projection holds: {projection}"),
    )
}

// ---- 4 ------------------------------------------------------------------

fn cvqvae_toy() -> Outcome {
    let params = SceneParams::default();
    let scenes: Vec<_> = (0..64).map(|i| generate_scene(5000 + i, &params).unwrap()).collect();
    let config = CvqVaeConfig::default();
    let (model, _) = cvqvae::train(&scenes, &config, 4, |_| {}).unwrap();
    let (bce, perplexity) = model.evaluate(&scenes).unwrap();
    outcome(
        bce < 0.1 && perplexity >= 4.0,
        format!("64 scenes, K={}, {} steps: BCE {bce:.4}/pixel (< 0.1), perplexity {perplexity:.2} (>= 4)", config.codes, config.steps),
    )
}

// ---- 5 ------------------------------------------------------------------

fn policy_objective() -> Outcome {
    let params = SceneParams::default();
    let scenes: Vec<_> = (0..64).map(|i| generate_scene(6000 + i, &params).unwrap()).collect();
    let (cvq, _) = cvqvae::train(&scenes, &CvqVaeConfig { steps: 300, ..Default::default() }, 5, |_| {}).unwrap();
    let task = corridor_transitions(&cvq, &params, &TaskConfig::default(), 55).unwrap();
    let steps = 500;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let mut res = [0.0; 2];
        for (slot, omega_q) in [0.0, 1.0].into_iter().enumerate() {
            let cfg = PolicyConfig { omega_q, ..Default::default() };
            let run = train_policy(&task.transitions, task.codes, task.grid_len, &cfg, steps, seed).unwrap();
            res[slot] = evaluate_policy(&run.trainer.actor, &task.eval, &task.kinematics, &task.reward, 900 + seed)
                .unwrap()
                .mean_reward;
        }
        let gain = (res[1] - res[0]) / res[0].abs();
        wins += usize::from(res[1] > res[0] && gain >= 0.05);
        rows.push(format!("seed {seed}: {:.3} vs {:.3} ({:+.1}%)", res[1], res[0], 100.0 * gain));
    }
    outcome(
        wins == 3,
        format!("{} transitions, {steps} steps, omega_Q=1 vs 0: {}", task.transitions.len(), rows.join("; ")),
    )
}

// ---- 6 ------------------------------------------------------------------

fn critic_fixed_point() -> Outcome {
    let (codes, grid_len) = (4, 4);
    let state = PolicyState {
        current: vec![4, 5, 6, 7],
        predicted: vec![5, 5, 6, 6],
        u0: ActionTriplet::new(0.0, 0.5, 0.0),
        nav: NavCommand::Straight,
    };
    let (reward, gamma) = (1.0f32, 0.9);
    let mut r = rng(606);
    let transitions: Vec<Transition> = (0..256)
        .map(|_| Transition {
            s: state.clone(),
            a: ActionTriplet::new(r.random_range(-1.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)),
            r: reward,
            s_next: state.clone(),
        })
        .collect();
    let cfg = PolicyConfig {
        gamma,
        tau: 0.05,
        ..Default::default()
    };
    let mut trainer = PolicyTrainer::new(cfg.clone(), codes, grid_len, 66).unwrap();
    let updates = 5000;
    for _ in 0..updates {
        let batch: Vec<&Transition> = (0..cfg.batch).map(|_| &transitions[r.random_range(0..transitions.len())]).collect();
        trainer.critic_update(&batch, &mut r).unwrap();
    }
    let target = f64::from(reward) / (1.0 - gamma);
    let probe: Vec<ActionTriplet> = transitions.iter().take(64).map(|t| t.a).collect();
    let states: Vec<&PolicyState> = probe.iter().map(|_| &state).collect();
    let q = trainer.critic.evaluate(&states, &probe).unwrap();
    let mean = q.iter().map(|v| v.2).sum::<f64>() / q.len() as f64;
    let worst = q.iter().map(|v| (v.2 - target).abs() / target).fold(0.0, f64::max);
    outcome(
        worst <= 0.05,
        format!("gamma={gamma}, R={reward}, {updates} updates: mean min-Q {mean:.3} vs {target:.3}, worst rel err {:.2}%", 100.0 * worst),
    )
}

// ---- 7 ------------------------------------------------------------------

fn refinement() -> Outcome {
    let mut r = rng(707);
    let mut identical = 0;
    for i in 0..100 {
        let head = RefinementHead::new(RefineConfig::default(), 8, 7000 + i).unwrap();
        let c: Vec<[f64; 2]> = (0..8).map(|_| [r.random_range(-10.0..74.0), r.random_range(-10.0..74.0)]).collect();
        let act = |r: &mut dyn rand::RngCore| ActionTriplet::new(r.random_range(-1.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let u = ActionPair { prev: act(&mut r), curr: act(&mut r) };
        let out = head.refine(&c, &u).unwrap();
        let same = out.iter().flatten().zip(c.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
        identical += usize::from(same);
    }
    let params = SceneParams::default();
    let mut frames = Vec::new();
    for e in 0..150u64 {
        let ep = generate_episode(7100 + e, &params, 8).unwrap();
        for w in ep.windows(2) {
            frames.push((w[0].clone(), w[1].clone()));
        }
    }
    let (train, test) = frames.split_at(1000);
    let config = RefineConfig::default();
    let results: Vec<(f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                let config = config.clone();
                s.spawn(move || {
                    let tr = refine_examples(train, config.jitter, seed);
                    let te = refine_examples(test, config.jitter, 100 + seed);
                    let (head, _) = train_refinement(&tr, &config, seed).unwrap();
                    let refined: Vec<_> = te.iter().map(|e| head.refine(&e.coarse, &e.actions).unwrap()).collect();
                    let coarse: Vec<_> = te.iter().map(|e| e.coarse.clone()).collect();
                    let gt: Vec<_> = te.iter().map(|e| e.target.clone()).collect();
                    (trajectory_mse(&refined, &gt), trajectory_mse(&coarse, &gt))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let not_worse = results.iter().all(|(a, b)| a <= b);
    let halved = results.iter().filter(|(a, b)| *a <= 0.5 * b).count();
    let ratios: Vec<String> = results.iter().map(|(a, b)| format!("{:.3}", a / b)).collect();
    outcome(
        identical == 100 && not_worse && halved >= 2,
        format!(
            "bitwise identity at init {identical}/100; {} train / {} held-out pairs, {} steps, refined/coarse MSE ratio per seed [{}]",
            train.len(),
            test.len(),
            config.steps,
            ratios.join(", ")
        ),
    )
}

// ---- 8 ------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut r = rng(808);
    let (mut worst_l2, mut collision_mismatch) = (0.0f64, 0);
    let mut trajs = Vec::new();
    let mut obstacles = Vec::new();
    let mut expected_hits = 0;
    let fp = Footprint::default();
    let params = SceneParams::default();
    for case in 0..500 {
        let n = r.random_range(1..=12);
        let pred: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(-5.0..70.0), r.random_range(-5.0..70.0)]).collect();
        let gt: Vec<[f64; 2]> = (0..n).map(|_| [r.random_range(-5.0..70.0), r.random_range(-5.0..70.0)]).collect();
        let buckets: Vec<usize> = (0..3).map(|_| r.random_range(1..=n)).collect();
        let got = l2_metric(&pred, &gt, &buckets).unwrap();
        for (&k, v) in buckets.iter().zip(got) {
            worst_l2 = worst_l2.max(rel(v, brute_l2(&pred, &gt, k), 1e-300));
        }

        // waypoints on the half-pixel lattice keep footprint edges on it too
        let snap = |v: f64| (v * 2.0).round() / 2.0;
        let (traj, rects) = if case % 5 == 0 {
            let s = generate_scene(8000 + case as u64, &params).unwrap();
            let traj: Vec<[f64; 2]> = s.trajectory.iter().map(|p| [snap(p[0]), snap(p[1])]).collect();
            (traj, s.obstacles.clone())
        } else {
            let traj: Vec<[f64; 2]> = (0..8).map(|_| [snap(r.random_range(0.0..32.0)), snap(r.random_range(0.0..32.0))]).collect();
            let rects: Vec<Rect> = (0..r.random_range(0..5))
                .map(|_| {
                    let (x0, y0) = (r.random_range(-2..30), r.random_range(-2..30));
                    Rect { x0, y0, x1: x0 + r.random_range(1..8), y1: y0 + r.random_range(1..8) }
                })
                .collect();
            (traj, rects)
        };
        let (fw, fh) = (r.random_range(1..=5) as f64, r.random_range(1..=5) as f64);
        let want = raster_collides(&traj, &rects, fw, fh, 64);
        collision_mismatch += usize::from(trajectory_collides(&traj, &rects, Footprint { width: fw, height: fh }) != want);
        expected_hits += usize::from(raster_collides(&traj, &rects, fp.width, fp.height, 64));
        trajs.push(traj);
        obstacles.push(rects);
    }
    let rate = collision_rate(&trajs, &obstacles, fp).unwrap();
    let rate_ok = rate == expected_hits as f64 / 500.0;
    outcome(
        worst_l2 <= 1e-9 && collision_mismatch == 0 && rate_ok,
        format!("500 cases: max L2 rel err {worst_l2:.1e}, collision mismatches {collision_mismatch}, rate {rate:.3} matches raster: {rate_ok}"),
    )
}

// ---- 9 ------------------------------------------------------------------

fn run_pipeline_cli(config: &Path, root: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_vdrive"))
        .arg("--config")
        .arg(config)
        .arg("--root")
        .arg(root)
        .arg("run-pipeline")
        .output()
        .unwrap();
    assert!(status.status.success(), "run-pipeline failed: {}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(root.join("eval/report.json")).unwrap()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let a = run_pipeline_cli(&config, &dir.path().join("a"));
    let b = run_pipeline_cli(&config, &dir.path().join("b"));
    outcome(a == b && !a.is_empty(), format!("two run-pipeline invocations, report.json {} bytes, identical: {}", a.len(), a == b))
}

// ---- 10 -----------------------------------------------------------------

fn vdtn_round_trip() -> Outcome {
    let mut r = rng(1010);
    let dir = tempfile::tempdir().unwrap();
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, f32::MIN, f32::INFINITY, f32::NEG_INFINITY, f32::NAN];
    let mut exact = 0;
    for i in 0..100 {
        let rank = if i < 10 { 1 } else { r.random_range(1..=4) };
        let dims: Vec<usize> = (0..rank).map(|_| if i % 7 == 0 { 1 } else { r.random_range(1..=5) }).collect();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                if r.random_bool(0.1) {
                    specials[r.random_range(0..specials.len())]
                } else {
                    f32::from_bits(r.random())
                }
            })
            .collect();
        let t = Tensor::new(dims.clone(), data).unwrap();
        let path = dir.path().join(format!("t{i}.vdtn"));
        write_vdtn(&path, &t).unwrap();
        let back = read_vdtn(&path).unwrap();
        let same = back.dims() == t.dims()
            && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            && back.len() == t.len();
        exact += usize::from(same);
    }
    outcome(exact == 100, format!("{exact}/100 tensors bit-exact after write/read (ranks 1-4, extents 1-5)"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // numeric arguments select a subset, e.g. `-- 2 7`
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let selected = |i: usize| only.is_empty() || only.contains(&(i + 1));
    let criteria: [Criterion; 10] = [
        ("reward oracle equivalence", reward_oracle),
        ("gradient audit", gradient_audit),
        ("quantization correctness", quantization),
        ("CVQ-VAE toy convergence", cvqvae_toy),
        ("policy objective sanity", policy_objective),
        ("critic fixed point", critic_fixed_point),
        ("refinement identity and utility", refinement),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
        ("VDTN round-trip", vdtn_round_trip),
    ];
    let results: Vec<Option<(Outcome, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .enumerate()
            .map(|(i, (_, f))| {
                selected(i).then(|| s.spawn(move || {
                    let t = Instant::now();
                    let o = std::panic::catch_unwind(f).unwrap_or_else(|e| {
                        let msg = e
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_default();
                        outcome(false, format!("panicked: {msg}"))
                    });
                    (o, t.elapsed().as_secs_f64())
                }))
            })
            .collect();
        handles.into_iter().map(|h| h.map(|h| h.join().unwrap())).collect()
    });
    let (mut passed, mut failed) = (0, 0);
    for (i, ((name, _), result)) in criteria.iter().zip(&results).enumerate() {
        let Some((o, secs)) = result else { continue };
        passed += usize::from(o.pass);
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {} {name}: {} [{secs:.1}s]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
