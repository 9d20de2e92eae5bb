//! Offline corridor task: states are consecutive scene frames, actions are
//! noisy expert controls and the reward is the hybrid reward of the
//! kinematic rollout an action produces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyState, PolicyTrainer, Transition};
use crate::cvqvae::CvqVae;
use crate::error::{Error, Result};
use crate::reward::{score, RewardConfig};
use crate::rng::{self, normal};
use crate::scene::{generate_episode, ActionTriplet, Kinematics, SceneParams, SceneSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Training episodes; each yields `frames - 2` transitions.
    pub episodes: usize,
    pub eval_episodes: usize,
    pub frames: usize,
    /// Per-component standard deviation of the behavior-action noise.
    pub behavior_noise: [f64; 3],
    /// Standard deviation of the noise on the initial action `u0`.
    pub u0_noise: f64,
    pub reward: RewardConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            episodes: 250,
            eval_episodes: 40,
            frames: 10,
            behavior_noise: [0.5, 0.25, 0.2],
            u0_noise: 0.05,
            reward: RewardConfig::default(),
        }
    }
}

/// Hybrid reward of rolling `action` out from the scene's ego start.
pub fn rollout_reward(scene: &SceneSample, action: ActionTriplet, kin: &Kinematics, cfg: &RewardConfig) -> Result<f64> {
    let traj = kin.rollout(scene.ego_start(), action, scene.trajectory.len());
    Ok(score(scene, &traj, cfg)?.r)
}

fn jitter(a: ActionTriplet, sd: [f64; 3], r: &mut impl Rng) -> ActionTriplet {
    let v = a.to_array();
    ActionTriplet::new(
        v[0] + (sd[0] * normal(r)) as f32,
        v[1] + (sd[1] * normal(r)) as f32,
        v[2] + (sd[2] * normal(r)).abs() as f32,
    )
    .clamped()
}

/// Transitions and held-out evaluation states of the corridor task.
#[derive(Clone, Debug)]
pub struct CorridorTask {
    pub transitions: Vec<Transition>,
    /// Evaluation states with the scene their reward is measured on.
    pub eval: Vec<(PolicyState, SceneSample)>,
    pub codes: usize,
    pub grid_len: usize,
    pub kinematics: Kinematics,
    pub reward: RewardConfig,
}

/// Policy states for frames `1..` of an episode: tokens of frame `k - 1`
/// as the current grid, tokens of frame `k` standing in for the predicted
/// grid, and a slightly perturbed expert action as `u0`.
pub fn episode_states(
    cvq: &CvqVae,
    scenes: Vec<SceneSample>,
    u0_noise: f64,
    r: &mut impl Rng,
) -> Result<Vec<(PolicyState, SceneSample)>> {
    let tokens = scenes.iter().map(|s| cvq.tokens_for_scene(s)).collect::<Result<Vec<_>>>()?;
    Ok(scenes
        .into_iter()
        .enumerate()
        .skip(1)
        .map(|(k, scene)| {
            let state = PolicyState {
                current: tokens[k - 1].clone(),
                predicted: tokens[k].clone(),
                u0: jitter(scene.action, [u0_noise, u0_noise, 0.0], r),
                nav: scene.nav,
            };
            (state, scene)
        })
        .collect())
}

/// Builds the offline dataset. Frame `k`'s state pairs the tokens of frame
/// `k - 1` with those of frame `k`, which stand in for the oracle's
/// prediction.
pub fn corridor_transitions(cvq: &CvqVae, params: &SceneParams, cfg: &TaskConfig, seed: u64) -> Result<CorridorTask> {
    if cfg.frames < 3 {
        return Err(Error::invalid("corridor episodes need at least 3 frames"));
    }
    let params = SceneParams {
        episode_frames: params.episode_frames.max(cfg.frames),
        ..params.clone()
    };
    let kin = params.kinematics;
    let mut r = rng::rng(rng::derive_seed(seed, 0));
    let mut transitions = Vec::with_capacity(cfg.episodes * (cfg.frames - 2));
    for e in 0..cfg.episodes {
        let scenes = generate_episode(rng::derive_seed(seed, 1 + e as u64), &params, cfg.frames)?;
        let frames = episode_states(cvq, scenes, cfg.u0_noise, &mut r)?;
        for w in frames.windows(2) {
            let a = jitter(w[0].1.action, cfg.behavior_noise, &mut r);
            let reward = rollout_reward(&w[0].1, a, &kin, &cfg.reward)?;
            transitions.push(Transition {
                s: w[0].0.clone(),
                a,
                r: reward as f32,
                s_next: w[1].0.clone(),
            });
        }
    }
    let mut eval = Vec::new();
    for e in 0..cfg.eval_episodes {
        let seed = rng::derive_seed(seed ^ 0x5eed_e7a1, e as u64);
        let scenes = generate_episode(seed, &params, cfg.frames)?;
        eval.extend(episode_states(cvq, scenes, cfg.u0_noise, &mut r)?);
    }
    let (h, w) = cvq.grid();
    Ok(CorridorTask {
        transitions,
        eval,
        codes: cvq.config.codes,
        grid_len: h * w,
        kinematics: kin,
        reward: cfg.reward,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub critic: f64,
    pub total: f64,
    pub diffusion: f64,
    pub q: f64,
}

pub struct PolicyRun {
    pub trainer: PolicyTrainer,
    pub log: Vec<TrainLogRow>,
}

/// Alternating critic and actor updates over uniformly drawn batches.
pub fn train_policy(
    transitions: &[Transition],
    codes: usize,
    grid_len: usize,
    config: &PolicyConfig,
    steps: usize,
    seed: u64,
) -> Result<PolicyRun> {
    if transitions.is_empty() {
        return Err(Error::invalid("no transitions"));
    }
    let mut trainer = PolicyTrainer::new(config.clone(), codes, grid_len, rng::derive_seed(seed, 0))?;
    let mut r = rng::rng(rng::derive_seed(seed, 1));
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&Transition> = (0..config.batch)
            .map(|_| &transitions[r.random_range(0..transitions.len())])
            .collect();
        let critic = trainer
            .critic_update(&batch, &mut r)
            .map_err(|_| Error::Divergence { stage: "policy", step })?;
        let l = trainer
            .policy_step(&batch, &mut r)
            .map_err(|_| Error::Divergence { stage: "policy", step })?;
        log.push(TrainLogRow {
            step,
            critic,
            total: l.total,
            diffusion: l.diffusion,
            q: l.q,
        });
    }
    Ok(PolicyRun { trainer, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_reward: f64,
    pub off_road_rate: f64,
    pub samples: usize,
}

/// Mean hybrid reward of sampled actions over evaluation states.
pub fn evaluate_policy(
    actor: &super::Actor,
    eval: &[(PolicyState, SceneSample)],
    kin: &Kinematics,
    reward: &RewardConfig,
    seed: u64,
) -> Result<PolicyEval> {
    if eval.is_empty() {
        return Err(Error::invalid("no evaluation states"));
    }
    let mut r = rng::rng(seed);
    let states: Vec<&PolicyState> = eval.iter().map(|(s, _)| s).collect();
    let actions = actor.sample_actions(&states, &mut r)?;
    let mut total = 0.0;
    let mut off = 0usize;
    for ((_, scene), a) in eval.iter().zip(actions) {
        let traj = kin.rollout(scene.ego_start(), a, scene.trajectory.len());
        let rec = score(scene, &traj, reward)?;
        total += rec.r;
        off += usize::from(rec.p_off > 0);
    }
    Ok(PolicyEval {
        mean_reward: total / eval.len() as f64,
        off_road_rate: off as f64 / eval.len() as f64,
        samples: eval.len(),
    })
}

impl CorridorTask {
    pub fn evaluate(&self, actor: &super::Actor, seed: u64) -> Result<PolicyEval> {
        evaluate_policy(actor, &self.eval, &self.kinematics, &self.reward, seed)
    }
}
