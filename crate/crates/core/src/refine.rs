//! Residual trajectory refinement from an asynchronous action pair.
//!
//! Each waypoint is projected and offset by a learned positional embedding;
//! an MLP summary of `[u_prev, u_curr]` is tiled over all positions and
//! concatenated on the feature axis. After a ReLU and a small encoder stack,
//! a zero-initialized linear layer produces the correction added back onto
//! the coarse trajectory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Adam, AdamConfig, Block, Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::rng::{self, normal};
use crate::scene::{ActionTriplet, Point, SceneSample};
use crate::tensor::{Real, Tensor};

/// Previous and current actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPair {
    pub prev: ActionTriplet,
    pub curr: ActionTriplet,
}

impl ActionPair {
    pub fn matrix(&self) -> [[f32; 3]; 2] {
        [self.prev.to_array(), self.curr.to_array()]
    }

    pub fn swapped(&self) -> Self {
        Self {
            prev: self.curr,
            curr: self.prev,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Coordinates are divided by this on the way in and multiplied back on
    /// the way out.
    pub coord_scale: f64,
    /// Jitter applied to ground truth to make coarse training inputs.
    pub jitter: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 2,
            heads: 2,
            lr: 2e-3,
            steps: 800,
            batch: 32,
            coord_scale: 64.0,
            jitter: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineMeta {
    pub config: RefineConfig,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineExample {
    pub coarse: Vec<Point>,
    pub actions: ActionPair,
    pub target: Vec<Point>,
}

#[derive(Clone, Debug)]
pub struct RefinementHead {
    pub meta: RefineMeta,
    pub params: ParamStore<f32>,
    proj: Linear,
    pos: ParamId,
    action_mlp: Mlp,
    blocks: Vec<Block>,
    decode: Linear,
}

impl RefinementHead {
    pub const KIND: &'static str = "refine";

    pub fn new(config: RefineConfig, horizon: usize, seed: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        let d = config.width;
        if !(2 * d).is_multiple_of(config.heads) {
            return Err(Error::invalid(format!("width {} not divisible by {} heads", 2 * d, config.heads)));
        }
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let proj = Linear::new(&mut params, "proj", 2, d, Init::Glorot, &mut r);
        let pos = params.add("pos", init_tensor(&[horizon, d], Init::Uniform(0.5), &mut r));
        let action_mlp = Mlp::new(&mut params, "action", &[6, d, d], &mut r);
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut params, &format!("block{i}"), 2 * d, config.heads, &mut r))
            .collect();
        let decode = Linear::new(&mut params, "decode", 2 * d, 2, Init::Zeros, &mut r);
        Ok(Self {
            meta: RefineMeta { config, horizon },
            params,
            proj,
            pos,
            action_mlp,
            blocks,
            decode,
        })
    }

    pub fn from_parts(meta: RefineMeta, params: ParamStore<f32>) -> Result<Self> {
        let mut h = Self::new(meta.config.clone(), meta.horizon, 0)?;
        h.params.load_from(&params)?;
        Ok(h)
    }

    fn check(&self, c: &[Point]) -> Result<()> {
        if c.len() != self.meta.horizon {
            return Err(Error::shape(
                "refine",
                "trajectory",
                format!("{} points, head expects {}", c.len(), self.meta.horizon),
            ));
        }
        Ok(())
    }

    /// Residual `[T, 2]` in pixels for one trajectory.
    pub fn residual<T: Real>(&self, g: &mut Graph<T>, p: &Bound, c: &[Point], u: &ActionPair) -> Result<Var> {
        self.check(c)?;
        let s = self.meta.config.coord_scale;
        let flat: Vec<f64> = c.iter().flat_map(|q| [q[0] / s, q[1] / s]).collect();
        let x = g.constant(Tensor::from_f64(&[c.len(), 2], &flat)?);
        let x = self.proj.forward(g, p, x)?;
        let x = g.add(x, p[self.pos])?;
        let m = u.matrix();
        let uf: Vec<f64> = m.iter().flatten().map(|&v| v as f64).collect();
        let uv = g.constant(Tensor::from_f64(&[1, 6], &uf)?);
        let a = self.action_mlp.forward(g, p, uv)?;
        let a = g.tile(a, c.len())?;
        let h = g.concat(&[x, a], 1)?;
        let mut h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, p, h, false)?;
        }
        let out = self.decode.forward(g, p, h)?;
        Ok(g.scale(out, s))
    }

    /// Refined trajectory node: residual plus the coarse input.
    pub fn refine_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, c: &[Point], u: &ActionPair) -> Result<Var> {
        let res = self.residual(g, p, c, u)?;
        let flat: Vec<f64> = c.iter().flat_map(|q| [q[0], q[1]]).collect();
        let cv = g.constant(Tensor::from_f64(&[c.len(), 2], &flat)?);
        g.add(res, cv)
    }

    pub fn refine(&self, c: &[Point], u: &ActionPair) -> Result<Vec<Point>> {
        let mut g = Graph::<f64>::new();
        let params = self.params.cast::<f64>();
        let p = params.bind_frozen(&mut g);
        let res = self.residual(&mut g, &p, c, u)?;
        Ok(c.iter()
            .zip(g.value(res).data().chunks(2))
            .map(|(q, d)| [q[0] + d[0], q[1] + d[1]])
            .collect())
    }

    /// Mean squared waypoint error (per coordinate, pixels²) over `batch`.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &[&RefineExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut total = None;
        for ex in batch {
            self.check(&ex.target)?;
            let out = self.refine_graph(g, p, &ex.coarse, &ex.actions)?;
            let flat: Vec<f64> = ex.target.iter().flat_map(|q| [q[0], q[1]]).collect();
            let t = g.constant(Tensor::from_f64(&[flat.len() / 2, 2], &flat)?);
            let l = g.mse(out, t)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok(g.scale(total.unwrap(), 1.0 / batch.len() as f64))
    }
}

/// Per-coordinate mean squared error between two trajectory sets.
pub fn trajectory_mse(a: &[Vec<Point>], b: &[Vec<Point>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            s += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            n += 2;
        }
    }
    s / n.max(1) as f64
}

/// Coarse input for training: ground truth plus seeded Gaussian jitter.
pub fn jitter_trajectory(c: &[Point], sigma: f64, r: &mut impl Rng) -> Vec<Point> {
    c.iter()
        .map(|q| [q[0] + sigma * normal(r), q[1] + sigma * normal(r)])
        .collect()
}

/// Refinement examples from consecutive frames: the action pair is the
/// previous and current frame's expert action.
pub fn refine_examples(frames: &[(SceneSample, SceneSample)], sigma: f64, seed: u64) -> Vec<RefineExample> {
    let mut r = rng::rng(seed);
    frames
        .iter()
        .map(|(prev, curr)| RefineExample {
            coarse: jitter_trajectory(&curr.trajectory, sigma, &mut r),
            actions: ActionPair {
                prev: prev.action,
                curr: curr.action,
            },
            target: curr.trajectory.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub step: usize,
    pub loss: f64,
}

pub fn train_refinement(
    examples: &[RefineExample],
    config: &RefineConfig,
    seed: u64,
) -> Result<(RefinementHead, Vec<RefineStep>)> {
    let first = examples.first().ok_or_else(|| Error::invalid("no refinement examples"))?;
    let mut head = RefinementHead::new(config.clone(), first.target.len(), rng::derive_seed(seed, 0))?;
    let mut r = rng::rng(rng::derive_seed(seed, 1));
    let mut opt = Adam::new(
        &head.params,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&RefineExample> = (0..config.batch.min(examples.len()))
            .map(|_| &examples[r.random_range(0..examples.len())])
            .collect();
        let mut g = Graph::<f32>::new();
        let p = head.params.bind(&mut g);
        let loss = head.loss(&mut g, &p, &batch)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { stage: "refine", step });
        }
        let grads = g.backward(loss)?;
        let frac = step as f64 / config.steps as f64;
        opt.config.lr = config.lr * (1.0 - 0.9 * ((frac - 0.6) / 0.4).max(0.0));
        opt.step(&mut head.params, &p, &grads);
        log.push(RefineStep { step, loss: value });
    }
    Ok((head, log))
}
