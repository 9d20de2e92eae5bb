//! Diffusion action head with a twin critic.
//!
//! The denoiser predicts the clean action from a noisy one, the diffusion
//! step and a state embedding. Sampling runs the ancestral reverse chain.
//! Q-guided training subtracts the normalized critic value of freshly sampled
//! actions, differentiated through the whole chain, from the reconstruction
//! loss.

mod task;

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cvqvae::TOKEN_BASE;
use crate::error::{Error, Result};
use crate::nn::{init_tensor, polyak_update, Adam, AdamConfig, Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::rng::{self, normal};
use crate::scene::{ActionTriplet, NavCommand};
use crate::tensor::{Real, Tensor};

pub use task::{
    corridor_transitions, episode_states, evaluate_policy, rollout_reward, train_policy, CorridorTask, PolicyEval,
    PolicyRun, TaskConfig, TrainLogRow,
};

const ACTION_LO: [f64; 3] = [-1.0, 0.0, 0.0];
const ACTION_HI: [f64; 3] = [1.0, 1.0, 1.0];
const TIME_FREQS: usize = 4;

/// Variance-preserving schedule: `alpha_t = cos(pi/2 * t/T)`, `sigma_t = sin(..)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("diffusion needs at least one step"));
        }
        let (alphas, sigmas) = (0..steps)
            .map(|t| {
                let a = FRAC_PI_2 * t as f64 / steps as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Ok(Self { alphas, sigmas })
    }

    /// Explicit schedule; must satisfy the variance-preserving invariants.
    pub fn from_parts(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        let ok = !alphas.is_empty()
            && alphas.len() == sigmas.len()
            && alphas[0] == 1.0
            && sigmas[0] == 0.0
            && alphas.windows(2).all(|w| w[1] <= w[0])
            && sigmas.windows(2).all(|w| w[1] >= w[0])
            && alphas.iter().zip(&sigmas).all(|(a, s)| (a * a + s * s - 1.0).abs() <= 1e-6);
        if !ok {
            return Err(Error::invalid("schedule violates the variance-preserving invariants"));
        }
        Ok(Self { alphas, sigmas })
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    /// Coefficients `(c_x, c_0, std)` of `q(x_{t-1} | x_t, x_0)` for `t >= 1`.
    fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (a_t, s_t) = (self.alphas[t], self.sigmas[t]);
        let (a_p, s_p) = (self.alphas[t - 1], self.sigmas[t - 1]);
        let a_ts = a_t / a_p;
        let var_ts = (s_t * s_t - a_ts * a_ts * s_p * s_p).max(0.0);
        let c_x = a_ts * s_p * s_p / (s_t * s_t);
        let c_0 = a_p * var_ts / (s_t * s_t);
        let std = (var_ts * s_p * s_p / (s_t * s_t)).sqrt();
        (c_x, c_0, std)
    }
}

/// `alpha_t a_0 + sigma_t eps`.
pub fn corrupt(a0: [f64; 3], t: usize, eps: [f64; 3], schedule: &NoiseSchedule) -> [f64; 3] {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    [a * a0[0] + s * eps[0], a * a0[1] + s * eps[1], a * a0[2] + s * eps[2]]
}

/// Conditioning of the action head: current tokens, the oracle's predicted
/// tokens, an initial action and the navigation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub current: Vec<u32>,
    pub predicted: Vec<u32>,
    pub u0: ActionTriplet,
    pub nav: NavCommand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: PolicyState,
    pub a: ActionTriplet,
    pub r: f32,
    pub s_next: PolicyState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub diffusion_steps: usize,
    pub gamma: f64,
    pub omega_q: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub state_dim: usize,
    /// Per-cell token embedding width.
    pub embed_dim: usize,
    pub batch: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 16,
            gamma: 0.9,
            omega_q: 1.0,
            tau: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            hidden: 64,
            state_dim: 32,
            embed_dim: 2,
            batch: 64,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.omega_q >= 0.0) {
            return Err(Error::invalid(format!("omega_q {} is negative", self.omega_q)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.diffusion_steps == 0 || self.batch == 0 {
            return Err(Error::invalid("diffusion_steps and batch must be positive"));
        }
        Ok(())
    }
}

/// Token embedding followed by a one-layer projection, shared shape between
/// the actor and each critic.
#[derive(Clone, Debug)]
struct StateEncoder {
    embed: ParamId,
    proj: Linear,
    grid_len: usize,
    vocab: usize,
}

impl StateEncoder {
    fn new(store: &mut ParamStore<f32>, name: &str, vocab: usize, grid_len: usize, cfg: &PolicyConfig, r: &mut impl Rng) -> Self {
        let embed = store.add(format!("{name}.embed"), init_tensor(&[vocab, cfg.embed_dim], Init::Uniform(0.5), r));
        let width = 2 * grid_len * cfg.embed_dim + 6;
        let proj = Linear::new(store, &format!("{name}.proj"), width, cfg.state_dim, Init::Glorot, r);
        Self {
            embed,
            proj,
            grid_len,
            vocab,
        }
    }

    fn check(&self, s: &PolicyState) -> Result<()> {
        for grid in [&s.current, &s.predicted] {
            if grid.len() != self.grid_len {
                return Err(Error::shape(
                    "policy state",
                    "tokens",
                    format!("{} tokens, expected {}", grid.len(), self.grid_len),
                ));
            }
            if let Some(t) = grid.iter().find(|&&t| t < TOKEN_BASE || t as usize >= self.vocab) {
                return Err(Error::invalid(format!("state token {t} outside vocabulary")));
            }
        }
        if !s.u0.is_valid() {
            return Err(Error::invalid("initial action out of range"));
        }
        Ok(())
    }

    /// `[B, state_dim]` embeddings.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, states: &[&PolicyState]) -> Result<Var> {
        let b = states.len();
        let mut idx = Vec::with_capacity(b * 2 * self.grid_len);
        let mut extra = Vec::with_capacity(b * 6);
        for s in states {
            self.check(s)?;
            idx.extend(s.current.iter().chain(&s.predicted).map(|&t| t as usize));
            extra.extend(s.u0.to_array().iter().map(|&v| v as f64));
            extra.extend(s.nav.one_hot_f64());
        }
        let e = g.gather_rows(p[self.embed], &idx)?;
        let width = 2 * self.grid_len * g.dims(e)[1];
        let e = g.reshape(e, &[b, width])?;
        let extra = g.constant(Tensor::from_f64(&[b, 6], &extra)?);
        let x = g.concat(&[e, extra], 1)?;
        let h = self.proj.forward(g, p, x)?;
        Ok(g.relu(h))
    }
}

fn time_features(t: usize, steps: usize) -> Vec<f64> {
    let u = t as f64 / steps as f64;
    let mut f = vec![u];
    for k in 1..=TIME_FREQS {
        let w = std::f64::consts::PI * k as f64 * u;
        f.push(w.sin());
        f.push(w.cos());
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub config: PolicyConfig,
    pub codes: usize,
    pub grid_len: usize,
}

/// Denoiser and its state encoder.
#[derive(Clone, Debug)]
pub struct Actor {
    pub meta: PolicyMeta,
    pub params: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    encoder: StateEncoder,
    denoiser: Mlp,
}

impl Actor {
    pub const KIND: &'static str = "policy";

    pub fn new(config: PolicyConfig, codes: usize, grid_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let vocab = TOKEN_BASE as usize + codes;
        let encoder = StateEncoder::new(&mut params, "actor.state", vocab, grid_len, &config, &mut r);
        let input = 3 + 1 + 2 * TIME_FREQS + config.state_dim;
        let denoiser = Mlp::new(&mut params, "actor.denoise", &[input, config.hidden, config.hidden, 3], &mut r);
        Ok(Self {
            schedule: NoiseSchedule::cosine(config.diffusion_steps)?,
            meta: PolicyMeta { config, codes, grid_len },
            params,
            encoder,
            denoiser,
        })
    }

    pub fn from_parts(meta: PolicyMeta, params: ParamStore<f32>) -> Result<Self> {
        let mut a = Self::new(meta.config.clone(), meta.codes, meta.grid_len, 0)?;
        a.params.load_from(&params)?;
        Ok(a)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, states: &[&PolicyState]) -> Result<Var> {
        self.encoder.forward(g, p, states)
    }

    /// Clean-action prediction `mu(a_t, t | s)` for a batch with per-row steps.
    pub fn denoise<T: Real>(&self, g: &mut Graph<T>, p: &Bound, a_t: Var, ts: &[usize], emb: Var) -> Result<Var> {
        let steps = self.schedule.len();
        let tf: Vec<f64> = ts.iter().flat_map(|&t| time_features(t, steps)).collect();
        let tf = g.constant(Tensor::from_f64(&[ts.len(), 1 + 2 * TIME_FREQS], &tf)?);
        let x = g.concat(&[a_t, tf, emb], 1)?;
        self.denoiser.forward(g, p, x)
    }

    /// Reconstruction loss with per-element `(t, eps)` drawn from `r`.
    pub fn actor_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &[&Transition],
        r: &mut impl Rng,
    ) -> Result<Var> {
        let steps = self.schedule.len();
        let noise: Vec<(usize, [f64; 3])> = batch
            .iter()
            .map(|_| (r.random_range(0..steps), [normal(r), normal(r), normal(r)]))
            .collect();
        let states: Vec<&PolicyState> = batch.iter().map(|t| &t.s).collect();
        let emb = self.encode(g, p, &states)?;
        actor_loss_with(g, batch, &noise, &self.schedule, |g, a_t, ts| self.denoise(g, p, a_t, ts, emb))
    }

    /// Ancestral sampling on a graph; `noise` supplies `3 * B * T` standard
    /// normals in the order they are consumed.
    pub fn sample_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, emb: Var, noise: &[f64]) -> Result<Var> {
        let b = g.dims(emb)[0];
        let steps = self.schedule.len();
        if noise.len() != 3 * b * steps {
            return Err(Error::shape("sample", "noise", format!("{} values for {b} rows", noise.len())));
        }
        let mut chunks = noise.chunks(3 * b);
        let mut x = g.constant(Tensor::from_f64(&[b, 3], chunks.next().unwrap())?);
        for t in (0..steps).rev() {
            let x0 = self.denoise(g, p, x, &vec![t; b], emb)?;
            if t == 0 {
                x = x0;
                break;
            }
            let (c_x, c_0, std) = self.schedule.posterior(t);
            let a = g.scale(x, c_x);
            let m = g.scale(x0, c_0);
            let mean = g.add(a, m)?;
            let z: Vec<f64> = chunks.next().unwrap().iter().map(|v| v * std).collect();
            let z = g.constant(Tensor::from_f64(&[b, 3], &z)?);
            x = g.add(mean, z)?;
        }
        g.clamp_cols(x, &ACTION_LO, &ACTION_HI)
    }

    fn draw_noise(&self, b: usize, r: &mut impl Rng) -> Vec<f64> {
        (0..3 * b * self.schedule.len()).map(|_| normal(r)).collect()
    }

    /// Samples one action per state.
    pub fn sample_actions(&self, states: &[&PolicyState], r: &mut impl Rng) -> Result<Vec<ActionTriplet>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let noise = self.draw_noise(states.len(), r);
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let emb = self.encode(&mut g, &p, states)?;
        let a = self.sample_graph(&mut g, &p, emb, &noise)?;
        Ok(g.value(a)
            .data()
            .chunks(3)
            .map(|v| ActionTriplet::new(v[0], v[1], v[2]))
            .collect())
    }

    pub fn sample_action(&self, s: &PolicyState, r: &mut impl Rng) -> Result<ActionTriplet> {
        Ok(self.sample_actions(&[s], r)?[0])
    }
}

/// Mean over the batch of `||mu(a_t, t) - a_0||^2`, for any denoiser.
pub fn actor_loss_with<T: Real>(
    g: &mut Graph<T>,
    batch: &[&Transition],
    noise: &[(usize, [f64; 3])],
    schedule: &NoiseSchedule,
    denoise: impl FnOnce(&mut Graph<T>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len();
    let mut a0 = Vec::with_capacity(3 * b);
    let mut at = Vec::with_capacity(3 * b);
    for (tr, (t, eps)) in batch.iter().zip(noise) {
        let a = tr.a.to_array().map(|v| v as f64);
        a0.extend(a);
        at.extend(corrupt(a, *t, *eps, schedule));
    }
    let ts: Vec<usize> = noise.iter().map(|n| n.0).collect();
    let at = g.constant(Tensor::from_f64(&[b, 3], &at)?);
    let a0 = g.constant(Tensor::from_f64(&[b, 3], &a0)?);
    let pred = denoise(g, at, &ts)?;
    let mse = g.mse(pred, a0)?;
    Ok(g.scale(mse, 3.0))
}

/// One Q network: its own state encoder and an MLP over `[state, action]`.
#[derive(Clone, Debug)]
struct QNet {
    encoder: StateEncoder,
    mlp: Mlp,
}

impl QNet {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, states: &[&PolicyState], a: Var) -> Result<Var> {
        let e = self.encoder.forward(g, p, states)?;
        let x = g.concat(&[e, a], 1)?;
        self.mlp.forward(g, p, x)
    }
}

/// Twin critics with Polyak-averaged target copies.
#[derive(Clone, Debug)]
pub struct Critic {
    pub params: ParamStore<f32>,
    pub target: ParamStore<f32>,
    q: [QNet; 2],
}

impl Critic {
    pub fn new(config: &PolicyConfig, codes: usize, grid_len: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let vocab = TOKEN_BASE as usize + codes;
        let mut net = |i: usize, params: &mut ParamStore<f32>| QNet {
            encoder: StateEncoder::new(params, &format!("q{i}.state"), vocab, grid_len, config, &mut r),
            mlp: Mlp::new(params, &format!("q{i}.mlp"), &[config.state_dim + 3, config.hidden, config.hidden, 1], &mut r),
        };
        let q = [net(0, &mut params), net(1, &mut params)];
        Self {
            target: params.clone(),
            params,
            q,
        }
    }

    /// Both critics' values `[B, 1]` on a graph bound to either parameter set.
    pub fn values<T: Real>(&self, g: &mut Graph<T>, p: &Bound, states: &[&PolicyState], a: Var) -> Result<[Var; 2]> {
        Ok([self.q[0].forward(g, p, states, a)?, self.q[1].forward(g, p, states, a)?])
    }

    /// Elementwise twin minimum.
    pub fn min_value<T: Real>(&self, g: &mut Graph<T>, p: &Bound, states: &[&PolicyState], a: Var) -> Result<Var> {
        let [q1, q2] = self.values(g, p, states, a)?;
        g.minimum(q1, q2)
    }

    /// `(Q1, Q2, min)` for concrete actions, from the online parameters.
    pub fn evaluate(&self, states: &[&PolicyState], actions: &[ActionTriplet]) -> Result<Vec<(f64, f64, f64)>> {
        let mut g = Graph::<f64>::new();
        let params = self.params.cast::<f64>();
        let p = params.bind_frozen(&mut g);
        let a = actions_tensor(&mut g, actions)?;
        let [q1, q2] = self.values(&mut g, &p, states, a)?;
        let m = g.minimum(q1, q2)?;
        let (v1, v2, vm) = (g.value(q1).data(), g.value(q2).data(), g.value(m).data());
        Ok((0..actions.len()).map(|i| (v1[i], v2[i], vm[i])).collect())
    }
}

fn actions_tensor<T: Real>(g: &mut Graph<T>, actions: &[ActionTriplet]) -> Result<Var> {
    let flat: Vec<f64> = actions.iter().flat_map(|a| a.to_array().map(|v| v as f64)).collect();
    Ok(g.constant(Tensor::from_f64(&[actions.len(), 3], &flat)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLosses {
    pub total: f64,
    pub diffusion: f64,
    pub q: f64,
}

/// Actor, critic and their optimizers.
#[derive(Clone, Debug)]
pub struct PolicyTrainer {
    pub actor: Actor,
    pub critic: Critic,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl PolicyTrainer {
    pub fn new(config: PolicyConfig, codes: usize, grid_len: usize, seed: u64) -> Result<Self> {
        let actor = Actor::new(config.clone(), codes, grid_len, rng::derive_seed(seed, 0))?;
        let critic = Critic::new(&config, codes, grid_len, rng::derive_seed(seed, 1));
        let actor_opt = Adam::new(
            &actor.params,
            AdamConfig {
                lr: config.actor_lr,
                ..Default::default()
            },
        );
        let critic_opt = Adam::new(
            &critic.params,
            AdamConfig {
                lr: config.critic_lr,
                ..Default::default()
            },
        );
        Ok(Self {
            actor,
            critic,
            actor_opt,
            critic_opt,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.actor.meta.config
    }

    /// One TD(0) step on both critics toward `R + gamma * min Q_target(s', a')`,
    /// followed by the Polyak update of the targets. Returns the summed MSE.
    pub fn critic_update(&mut self, batch: &[&Transition], r: &mut impl Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cfg = self.actor.meta.config.clone();
        let next: Vec<&PolicyState> = batch.iter().map(|t| &t.s_next).collect();
        let y: Vec<f64> = if cfg.gamma == 0.0 {
            batch.iter().map(|t| t.r as f64).collect()
        } else {
            let a_next = self.actor.sample_actions(&next, r)?;
            let mut g = Graph::<f32>::new();
            let p = self.critic.target.bind_frozen(&mut g);
            let a = actions_tensor(&mut g, &a_next)?;
            let q = self.critic.min_value(&mut g, &p, &next, a)?;
            batch
                .iter()
                .zip(g.value(q).data())
                .map(|(t, &q)| t.r as f64 + cfg.gamma * q as f64)
                .collect()
        };

        let states: Vec<&PolicyState> = batch.iter().map(|t| &t.s).collect();
        let actions: Vec<ActionTriplet> = batch.iter().map(|t| t.a).collect();
        let mut g = Graph::<f32>::new();
        let p = self.critic.params.bind(&mut g);
        let a = actions_tensor(&mut g, &actions)?;
        let [q1, q2] = self.critic.values(&mut g, &p, &states, a)?;
        let yv = g.constant(Tensor::from_f64(&[batch.len(), 1], &y)?);
        let l1 = g.mse(q1, yv)?;
        let l2 = g.mse(q2, yv)?;
        let loss = g.add(l1, l2)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::invalid("critic loss is not finite"));
        }
        let grads = g.backward(loss)?;
        self.critic_opt.step(&mut self.critic.params, &p, &grads);
        polyak_update(&mut self.critic.target, &self.critic.params, cfg.tau);
        Ok(value)
    }

    /// Builds `L_total = L_diffusion - omega_Q * mean(Q(s, a0)) / sg(mean |Q|)`
    /// on a graph; `a0` comes from the differentiable reverse chain.
    pub fn policy_objective<T: Real>(
        &self,
        g: &mut Graph<T>,
        actor_p: &Bound,
        critic_p: &Bound,
        batch: &[&Transition],
        r: &mut impl Rng,
    ) -> Result<(Var, Var, Var)> {
        let omega = self.actor.meta.config.omega_q;
        let diffusion = self.actor.actor_loss(g, actor_p, batch, r)?;
        let states: Vec<&PolicyState> = batch.iter().map(|t| &t.s).collect();
        let noise = self.actor.draw_noise(batch.len(), r);
        if omega == 0.0 {
            let zero = g.constant(Tensor::scalar(T::zero()));
            return Ok((diffusion, diffusion, zero));
        }
        let emb = self.actor.encode(g, actor_p, &states)?;
        let a0 = self.actor.sample_graph(g, actor_p, emb, &noise)?;
        let q = self.critic.min_value(g, critic_p, &states, a0)?;
        let scale = g.value(q).data().iter().map(|v| v.f64().abs()).sum::<f64>() / batch.len() as f64;
        let q_mean = g.mean(q);
        let lq = g.scale(q_mean, -1.0 / scale.max(1e-8));
        let weighted = g.scale(lq, omega);
        let total = g.add(diffusion, weighted)?;
        Ok((total, diffusion, lq))
    }

    /// One actor update; the critic stays frozen.
    pub fn policy_step(&mut self, batch: &[&Transition], r: &mut impl Rng) -> Result<PolicyLosses> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut g = Graph::<f32>::new();
        let ap = self.actor.params.bind(&mut g);
        let cp = self.critic.params.bind_frozen(&mut g);
        let (total, diffusion, lq) = self.policy_objective(&mut g, &ap, &cp, batch, r)?;
        let losses = PolicyLosses {
            total: g.value(total).item() as f64,
            diffusion: g.value(diffusion).item() as f64,
            q: g.value(lq).item() as f64,
        };
        if !losses.total.is_finite() {
            return Err(Error::invalid("policy loss is not finite"));
        }
        let grads = g.backward(total)?;
        self.actor_opt.step(&mut self.actor.params, &ap, &grads);
        Ok(losses)
    }
}
