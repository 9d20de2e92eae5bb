//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the library routine it is used to check; the oracles
//! work on plain vectors and recompute each quantity from its definition.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vdrive::autodiff::{Graph, Var};
use vdrive::scene::{Mask, Rect};
use vdrive::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `||a - b|| / max(||a||, ||b||, 1e-6)`.
pub fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

// ---- gradients --------------------------------------------------------

/// Reverse-mode gradient of a scalar function of `inputs`.
pub fn reverse_grad(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Vec<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    vars.iter().map(|&v| grads.wrt(v).data().to_vec()).collect()
}

/// Central differences `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
pub fn numeric_grad(inputs: &[Tensor<f64>], h: f64, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let v = g.value(out);
        assert_eq!(v.len(), 1, "scalar output expected");
        v.data()[0]
    };
    let mut xs = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..xs.len() {
        let mut gi = Vec::with_capacity(xs[i].len());
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            gi.push((up - down) / (2.0 * h));
        }
        out.push(gi);
    }
    out
}

/// Relative error between reverse-mode and central-difference gradients over
/// all inputs together.
pub fn gradcheck(inputs: &[Tensor<f64>], h: f64, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let a: Vec<f64> = reverse_grad(inputs, f).concat();
    let b: Vec<f64> = numeric_grad(inputs, h, f).concat();
    rel_vec(&a, &b)
}

pub fn uniform(r: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform entries whose magnitude is at least `gap`, keeping kinks at zero
/// out of finite-difference reach.
pub fn uniform_away_from_zero(r: &mut impl Rng, dims: &[usize], hi: f64, gap: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..hi);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

// ---- reward -----------------------------------------------------------

/// Plain row-major copy of a mask.
pub fn mask_rows(m: &Mask) -> Vec<Vec<bool>> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(y, x)).collect()).collect()
}

pub fn random_mask(r: &mut impl Rng, h: usize, w: usize) -> Mask {
    match r.random_range(0..4) {
        // speckle
        0 => {
            let p = r.random_range(0.1..0.95);
            let bits: Vec<bool> = (0..h * w).map(|_| r.random_bool(p)).collect();
            Mask::from_fn(h, w, |y, x| bits[y * w + x])
        }
        // corridor with ragged edges and occasional empty or single-pixel rows
        1 | 2 => {
            let rows: Vec<(i64, i64)> = (0..h)
                .map(|_| match r.random_range(0..12) {
                    0 => (0, -1),
                    1 => {
                        let c = r.random_range(0..w as i64);
                        (c, c)
                    }
                    _ => {
                        let a = r.random_range(0..w as i64);
                        let b = r.random_range(a..w as i64);
                        (a, b)
                    }
                })
                .collect();
            Mask::from_fn(h, w, |y, x| {
                let (a, b) = rows[y];
                (x as i64) >= a && (x as i64) <= b
            })
        }
        _ => Mask::filled(h, w, r.random_bool(0.5)),
    }
}

/// Waypoints mixing in-bounds, out-of-bounds, integer-lattice and
/// row-centred points.
pub fn random_trajectory(r: &mut impl Rng, mask: &Mask, n: usize) -> Vec<[f64; 2]> {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    (0..n)
        .map(|_| match r.random_range(0..6) {
            0 => [r.random_range(-3.0..w + 3.0), r.random_range(-3.0..h + 3.0)],
            1 => [r.random_range(0..mask.width()) as f64, r.random_range(0..mask.height()) as f64],
            2 => {
                let y = r.random_range(0..mask.height());
                let cols: Vec<usize> = (0..mask.width()).filter(|&x| mask.get(y, x)).collect();
                let x = if cols.is_empty() {
                    r.random_range(0.0..w)
                } else {
                    cols.iter().sum::<usize>() as f64 / cols.len() as f64
                };
                [x, y as f64 + r.random_range(0.0..1.0)]
            }
            _ => [r.random_range(0.0..w), r.random_range(0.0..h)],
        })
        .collect()
}

pub struct NaiveRule {
    pub p_off: u32,
    pub r_center: f64,
    pub r_h: f64,
}

/// Per-point, per-pixel evaluation of the off-road count, the centring
/// reward and the rule reward.
pub fn naive_rule_reward(mask: &[Vec<bool>], traj: &[[f64; 2]], alpha: f64, beta: f64) -> NaiveRule {
    let h = mask.len() as i64;
    let w = mask[0].len() as i64;
    let mut p_off = 0u32;
    let mut acc = 0.0;
    for p in traj {
        let xi = p[0].floor() as i64;
        let yi = p[1].floor() as i64;
        let inside = xi >= 0 && yi >= 0 && xi < w && yi < h;
        if !(inside && mask[yi as usize][xi as usize]) {
            p_off += 1;
        }
        // row statistics straight from the pixels of row floor(y)
        let d = if yi < 0 || yi >= h {
            1e6
        } else {
            let mut set = Vec::new();
            for x in 0..w {
                if mask[yi as usize][x as usize] {
                    set.push(x as f64);
                }
            }
            if set.is_empty() {
                1e6
            } else {
                let lo = set.iter().cloned().fold(f64::MAX, f64::min);
                let hi = set.iter().cloned().fold(f64::MIN, f64::max);
                let mu = set.iter().sum::<f64>() / set.len() as f64;
                if hi == lo {
                    if p[0] == mu {
                        0.0
                    } else {
                        1e6
                    }
                } else {
                    (p[0] - mu).abs() / ((hi - lo) / 2.0)
                }
            }
        };
        acc += (-alpha * d * d).exp();
    }
    let r_center = acc / traj.len() as f64;
    let r_h = if p_off == 0 { r_center } else { -beta };
    NaiveRule { p_off, r_center, r_h }
}

// ---- quantization -----------------------------------------------------

/// Lowest index among the codes at minimal squared distance.
pub fn brute_nearest(cell: &[f64], codes: &[Vec<f64>]) -> usize {
    let d: Vec<f64> = codes
        .iter()
        .map(|c| c.iter().zip(cell).map(|(a, b)| (b - a) * (b - a)).sum())
        .collect();
    let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&v| v == best).unwrap()
}

// ---- metrics ----------------------------------------------------------

pub fn brute_l2(pred: &[[f64; 2]], gt: &[[f64; 2]], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..k {
        let dx = pred[i][0] - gt[i][0];
        let dy = pred[i][1] - gt[i][1];
        s += (dx * dx + dy * dy).sqrt();
    }
    s / k as f64
}

/// Rasterizes footprints and rectangles on a half-pixel lattice and reports
/// whether any lattice cell is covered by both. Exact when every box edge
/// lies on the lattice.
pub fn raster_collides(traj: &[[f64; 2]], rects: &[Rect], fw: f64, fh: f64, extent: i64) -> bool {
    let res = 2.0;
    let n = (extent as f64 * res) as i64;
    let cell = |v: f64| (v * res).round() as i64;
    let lo = -4 * res as i64;
    let size = (n - lo + 4 * res as i64) as usize;
    let mut obstacle = vec![false; size * size];
    for r in rects {
        for y in cell(r.y0 as f64)..cell(r.y1 as f64) {
            for x in cell(r.x0 as f64)..cell(r.x1 as f64) {
                if y >= lo && x >= lo && ((y - lo) as usize) < size && ((x - lo) as usize) < size {
                    obstacle[(y - lo) as usize * size + (x - lo) as usize] = true;
                }
            }
        }
    }
    for p in traj {
        for y in cell(p[1] - fh / 2.0)..cell(p[1] + fh / 2.0) {
            for x in cell(p[0] - fw / 2.0)..cell(p[0] + fw / 2.0) {
                if y >= lo && x >= lo && ((y - lo) as usize) < size && ((x - lo) as usize) < size
                    && obstacle[(y - lo) as usize * size + (x - lo) as usize]
                {
                    return true;
                }
            }
        }
    }
    false
}

// ---- pipeline ---------------------------------------------------------

/// A pipeline configuration small enough to run end to end in about a second.
pub const TINY_CONFIG: &str = r#"{
  "seed": 17,
  "data": {"train_episodes": 2, "eval_episodes": 1, "frames": 4, "preference_pairs": 4},
  "cvqvae": {"steps": 20},
  "oracle": {"steps": 10},
  "task": {"episodes": 4, "frames": 4},
  "policy": {"batch": 16},
  "policy_steps": 10,
  "refine": {"steps": 10}
}"#;

