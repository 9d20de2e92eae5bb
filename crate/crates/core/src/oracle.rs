//! Autoregressive next-state predictor over discrete scene tokens.
//!
//! A sequence is `[previous grid tokens, COND, next grid tokens]`. The COND
//! position additionally carries a projection of the previous action and
//! navigation command. A causal transformer predicts each next-grid token;
//! continuous heads read the action, navigation logits and trajectory off the
//! hidden state of the final position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cvqvae::TOKEN_BASE;
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Adam, AdamConfig, Block, Bound, Init, Linear, ParamId, ParamStore};
use crate::rng;
use crate::scene::{ActionTriplet, NavCommand, Point};
use crate::tensor::{Real, Tensor};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const COND: u32 = 2;
pub const EOS: u32 = 3;

/// One step of the driving state: scene tokens, action, command, trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTuple {
    pub tokens: Vec<u32>,
    pub action: ActionTriplet,
    pub nav: NavCommand,
    pub trajectory: Vec<Point>,
    pub t: usize,
}

/// A previous state and the state that followed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleExample {
    pub prev: StateTuple,
    pub next: StateTuple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Coordinates are divided by this before regression.
    pub coord_scale: f64,
    pub action_weight: f64,
    pub traj_weight: f64,
    /// Scales of the Gaussian terms used when scoring tuples.
    pub action_sigma: f64,
    pub traj_sigma: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 2,
            layers: 2,
            lr: 3e-3,
            steps: 1000,
            batch: 4,
            coord_scale: 64.0,
            action_weight: 10.0,
            traj_weight: 50.0,
            action_sigma: 0.1,
            traj_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub config: OracleConfig,
    pub codes: usize,
    pub grid_len: usize,
    pub horizon: usize,
    pub trained_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleStep {
    pub step: usize,
    /// Mean next-token cross-entropy.
    pub token_ce: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
struct Layers {
    embed: ParamId,
    pos: ParamId,
    cond: Linear,
    blocks: Vec<Block>,
    token_head: Linear,
    action_head: Linear,
    nav_head: Linear,
    traj_head: Linear,
}

#[derive(Clone, Debug)]
pub struct Oracle {
    pub meta: OracleMeta,
    pub params: ParamStore<f32>,
    layers: Layers,
}

/// Graph outputs for one sequence.
struct Heads {
    /// `[positions, V]` log-probabilities of the next token.
    token_logp: Var,
    action: Var,
    nav_logp: Var,
    traj: Var,
}

impl Oracle {
    pub const KIND: &'static str = "oracle";

    pub fn new(config: OracleConfig, codes: usize, grid_len: usize, horizon: usize, seed: u64) -> Result<Self> {
        if !config.width.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!("width {} not divisible by {} heads", config.width, config.heads)));
        }
        if codes == 0 || grid_len == 0 || horizon == 0 {
            return Err(Error::invalid("codes, grid length and horizon must be positive"));
        }
        let d = config.width;
        let vocab = TOKEN_BASE as usize + codes;
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let embed = params.add("embed", init_tensor(&[vocab, d], Init::Uniform(0.5), &mut r));
        let pos = params.add("pos", init_tensor(&[2 * grid_len + 1, d], Init::Uniform(0.5), &mut r));
        let cond = Linear::new(&mut params, "cond", 6, d, Init::Glorot, &mut r);
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut params, &format!("block{i}"), d, config.heads, &mut r))
            .collect();
        // Near-zero logits so the initial prediction is close to uniform.
        let token_head = Linear::new(&mut params, "token_head", d, vocab, Init::Uniform(1e-3), &mut r);
        let action_head = Linear::new(&mut params, "action_head", d, 3, Init::Glorot, &mut r);
        let nav_head = Linear::new(&mut params, "nav_head", d, 3, Init::Glorot, &mut r);
        let traj_head = Linear::new(&mut params, "traj_head", d, 2 * horizon, Init::Glorot, &mut r);
        Ok(Self {
            meta: OracleMeta {
                config,
                codes,
                grid_len,
                horizon,
                trained_steps: 0,
            },
            params,
            layers: Layers {
                embed,
                pos,
                cond,
                blocks,
                token_head,
                action_head,
                nav_head,
                traj_head,
            },
        })
    }

    pub fn from_parts(meta: OracleMeta, params: ParamStore<f32>) -> Result<Self> {
        let mut o = Self::new(meta.config.clone(), meta.codes, meta.grid_len, meta.horizon, 0)?;
        o.params.load_from(&params)?;
        o.meta = meta;
        Ok(o)
    }

    pub fn vocab(&self) -> usize {
        TOKEN_BASE as usize + self.meta.codes
    }

    fn check_tokens(&self, tokens: &[u32], what: &str) -> Result<()> {
        if tokens.len() != self.meta.grid_len {
            return Err(Error::shape(
                "oracle",
                what,
                format!("{} tokens, expected {}", tokens.len(), self.meta.grid_len),
            ));
        }
        let v = self.vocab() as u32;
        if let Some(t) = tokens.iter().find(|&&t| t < TOKEN_BASE || t >= v) {
            return Err(Error::invalid(format!("{what} token {t} outside vocabulary [{TOKEN_BASE}, {v})")));
        }
        Ok(())
    }

    fn check_tuple(&self, s: &StateTuple, what: &str) -> Result<()> {
        self.check_tokens(&s.tokens, what)?;
        if s.trajectory.len() != self.meta.horizon {
            return Err(Error::shape(
                "oracle",
                what,
                format!("trajectory has {} points, expected {}", s.trajectory.len(), self.meta.horizon),
            ));
        }
        if !s.action.is_valid() {
            return Err(Error::invalid(format!("{what} action out of range")));
        }
        Ok(())
    }

    /// Hidden states `[L, d]` for `prev` followed by COND and `next` (which
    /// may be a prefix of the next grid).
    fn hidden<T: Real>(&self, g: &mut Graph<T>, p: &Bound, prev: &StateTuple, next: &[u32]) -> Result<Var> {
        let gl = self.meta.grid_len;
        let d = self.meta.config.width;
        let ids: Vec<usize> = prev
            .tokens
            .iter()
            .chain(std::iter::once(&COND))
            .chain(next)
            .map(|&t| t as usize)
            .collect();
        let len = ids.len();
        let emb = g.gather_rows(p[self.layers.embed], &ids)?;
        let pos = g.slice(p[self.layers.pos], 0, 0, len)?;
        let mut x = g.add(emb, pos)?;

        let a = prev.action.to_array();
        let n = prev.nav.one_hot_f64();
        let feats = [a[0] as f64, a[1] as f64, a[2] as f64, n[0], n[1], n[2]];
        let feats = g.constant(Tensor::from_f64(&[1, 6], &feats)?);
        let c = self.layers.cond.forward(g, p, feats)?;
        let mut parts = vec![g.constant(Tensor::zeros(&[gl, d])), c];
        if len > gl + 1 {
            parts.push(g.constant(Tensor::zeros(&[len - gl - 1, d])));
        }
        let c = g.concat(&parts, 0)?;
        x = g.add(x, c)?;

        for b in &self.layers.blocks {
            x = b.forward(g, p, x, true)?;
        }
        Ok(x)
    }

    /// Log-probabilities of the token following each of the positions
    /// `gl..len` (COND onwards).
    fn token_logp<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var, from: usize, to: usize) -> Result<Var> {
        let rows = g.slice(h, 0, from, to)?;
        let logits = self.layers.token_head.forward(g, p, rows)?;
        Ok(g.log_softmax(logits))
    }

    fn heads<T: Real>(&self, g: &mut Graph<T>, p: &Bound, prev: &StateTuple, next: &[u32]) -> Result<Heads> {
        let gl = self.meta.grid_len;
        let h = self.hidden(g, p, prev, next)?;
        let len = g.dims(h)[0];
        let token_logp = self.token_logp(g, p, h, gl, len - 1)?;
        let last = g.slice(h, 0, len - 1, len)?;
        let raw = self.layers.action_head.forward(g, p, last)?;
        let steer = g.slice(raw, 1, 0, 1)?;
        let steer = g.tanh(steer);
        let tb = g.slice(raw, 1, 1, 3)?;
        let tb = g.sigmoid(tb);
        let action = g.concat(&[steer, tb], 1)?;
        let nav = self.layers.nav_head.forward(g, p, last)?;
        let nav_logp = g.log_softmax(nav);
        let traj = self.layers.traj_head.forward(g, p, last)?;
        Ok(Heads {
            token_logp,
            action,
            nav_logp,
            traj,
        })
    }

    fn traj_target<T: Real>(&self, traj: &[Point]) -> Tensor<T> {
        let s = self.meta.config.coord_scale;
        let flat: Vec<f64> = traj.iter().flat_map(|q| [q[0] / s, q[1] / s]).collect();
        Tensor::from_f64(&[1, flat.len()], &flat).unwrap()
    }

    /// Teacher-forced training loss of one example; returns `(total, token CE sum)`.
    pub fn example_loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ex: &OracleExample) -> Result<(Var, Var)> {
        self.check_tuple(&ex.prev, "prev")?;
        self.check_tuple(&ex.next, "next")?;
        let cfg = &self.meta.config;
        let h = self.heads(g, p, &ex.prev, &ex.next.tokens)?;
        let targets: Vec<usize> = ex.next.tokens.iter().map(|&t| t as usize).collect();
        let lp = g.pick(h.token_logp, &targets)?;
        let lp = g.sum(lp);
        let ce = g.scale(lp, -1.0);

        let a = ex.next.action.to_array();
        let at = g.constant(Tensor::from_f64(&[1, 3], &[a[0] as f64, a[1] as f64, a[2] as f64])?);
        let da = g.sub(h.action, at)?;
        let da = g.mul(da, da)?;
        let la = g.sum(da);
        let la = g.scale(la, cfg.action_weight);

        let nl = g.pick(h.nav_logp, &[ex.next.nav.index()])?;
        let nl = g.sum(nl);
        let ln = g.scale(nl, -1.0);

        let tt = self.traj_target(&ex.next.trajectory);
        let tt = g.constant(tt);
        let dt = g.sub(h.traj, tt)?;
        let dt = g.mul(dt, dt)?;
        let lt = g.sum(dt);
        let lt = g.scale(lt, cfg.traj_weight);

        let mut total = g.scale(ce, 1.0 / self.meta.grid_len as f64);
        for v in [la, ln, lt] {
            total = g.add(total, v)?;
        }
        Ok((total, ce))
    }

    /// Greedy next-state prediction.
    pub fn predict_next(&self, prev: &StateTuple) -> Result<StateTuple> {
        if self.meta.trained_steps == 0 {
            return Err(Error::invalid("oracle parameters are untrained"));
        }
        self.check_tuple(prev, "prev")?;
        let gl = self.meta.grid_len;
        let base = TOKEN_BASE as usize;
        let mut next: Vec<u32> = Vec::with_capacity(gl);
        for _ in 0..gl {
            let mut g = Graph::<f32>::new();
            let p = self.params.bind_frozen(&mut g);
            let h = self.hidden(&mut g, &p, prev, &next)?;
            let len = g.dims(h)[0];
            let lp = self.token_logp(&mut g, &p, h, len - 1, len)?;
            let row = g.value(lp).row(0);
            next.push((argmax(&row[base..]) + base) as u32);
        }
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let h = self.heads(&mut g, &p, prev, &next)?;
        let a = g.value(h.action).data();
        let action = ActionTriplet::new(a[0], a[1], a[2]).clamped();
        let nav = NavCommand::from_index(argmax(g.value(h.nav_logp).data())).unwrap();
        let s = self.meta.config.coord_scale;
        let trajectory = g
            .value(h.traj)
            .data()
            .chunks(2)
            .map(|q| [q[0] as f64 * s, q[1] as f64 * s])
            .collect();
        Ok(StateTuple {
            tokens: next,
            action,
            nav,
            trajectory,
            t: prev.t + 1,
        })
    }

    /// Teacher-forced log-likelihood of `next` given `prev`: token and
    /// navigation log-probabilities plus unnormalized Gaussian terms for the
    /// action and trajectory. Always `<= 0`.
    pub fn log_likelihood(&self, prev: &StateTuple, next: &StateTuple) -> Result<f64> {
        self.check_tuple(prev, "prev")?;
        self.check_tuple(next, "next")?;
        let cfg = &self.meta.config;
        let mut g = Graph::<f64>::new();
        let params = self.params.cast::<f64>();
        let p = params.bind_frozen(&mut g);
        let h = self.heads(&mut g, &p, prev, &next.tokens)?;
        let lp = g.value(h.token_logp);
        let mut ll: f64 = next
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| lp.row(i)[t as usize])
            .sum();
        ll += g.value(h.nav_logp).data()[next.nav.index()];
        let a = next.action.to_array();
        let ea: f64 = g
            .value(h.action)
            .data()
            .iter()
            .zip(a)
            .map(|(&x, y)| (x - y as f64).powi(2))
            .sum();
        ll -= ea / (2.0 * cfg.action_sigma * cfg.action_sigma);
        let s = cfg.coord_scale;
        let et: f64 = g
            .value(h.traj)
            .data()
            .chunks(2)
            .zip(&next.trajectory)
            .map(|(q, t)| (q[0] * s - t[0]).powi(2) + (q[1] * s - t[1]).powi(2))
            .sum();
        ll -= et / (2.0 * cfg.traj_sigma * cfg.traj_sigma);
        Ok(ll.min(0.0))
    }

    /// `(log p(chosen | prev), log p(rejected | prev))`.
    pub fn score_preference(&self, prev: &StateTuple, chosen: &StateTuple, rejected: &StateTuple) -> Result<(f64, f64)> {
        Ok((self.log_likelihood(prev, chosen)?, self.log_likelihood(prev, rejected)?))
    }

    /// Fraction of next-grid tokens predicted correctly under teacher forcing.
    pub fn token_accuracy(&self, examples: &[OracleExample]) -> Result<f64> {
        let base = TOKEN_BASE as usize;
        let mut hit = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let mut g = Graph::<f32>::new();
            let p = self.params.bind_frozen(&mut g);
            let h = self.heads(&mut g, &p, &ex.prev, &ex.next.tokens)?;
            let lp = g.value(h.token_logp);
            for (i, &t) in ex.next.tokens.iter().enumerate() {
                hit += usize::from(argmax(&lp.row(i)[base..]) + base == t as usize);
                total += 1;
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }
}

/// First index of the maximum.
fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Pretrains an oracle on `examples`.
pub fn pretrain_tokens(
    examples: &[OracleExample],
    codes: usize,
    config: &OracleConfig,
    seed: u64,
    mut on_step: impl FnMut(&OracleStep),
) -> Result<(Oracle, Vec<OracleStep>)> {
    let first = examples.first().ok_or_else(|| Error::invalid("no oracle examples"))?;
    let grid_len = first.prev.tokens.len();
    let horizon = first.next.trajectory.len();
    let mut oracle = Oracle::new(config.clone(), codes, grid_len, horizon, rng::derive_seed(seed, 0))?;
    for ex in examples {
        oracle.check_tuple(&ex.prev, "prev")?;
        oracle.check_tuple(&ex.next, "next")?;
    }
    let mut r = rng::rng(rng::derive_seed(seed, 1));
    let mut opt = Adam::new(
        &oracle.params,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let batch = config.batch.min(examples.len()).max(1);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut g = Graph::<f32>::new();
        let p = oracle.params.bind(&mut g);
        let mut total = None;
        let mut ce_sum = 0.0;
        for _ in 0..batch {
            let ex = &examples[r.random_range(0..examples.len())];
            let (l, ce) = oracle.example_loss(&mut g, &p, ex)?;
            ce_sum += g.value(ce).item() as f64;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = g.scale(total.unwrap(), 1.0 / batch as f64);
        let value = g.value(total).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { stage: "oracle", step });
        }
        let grads = g.backward(total)?;
        // Constant rate, then a linear decay to a tenth over the last 40%.
        let frac = step as f64 / config.steps as f64;
        opt.config.lr = config.lr * (1.0 - 0.9 * ((frac - 0.6) / 0.4).max(0.0));
        opt.step(&mut oracle.params, &p, &grads);
        let rec = OracleStep {
            step,
            token_ce: ce_sum / (batch * grid_len) as f64,
            total: value,
        };
        on_step(&rec);
        log.push(rec);
    }
    oracle.meta.trained_steps = config.steps;
    Ok((oracle, log))
}
