//! End-to-end orchestration over an artifact directory.
//!
//! Every stage reads its inputs from, and writes its outputs to, the artifact
//! root, so stages can run one at a time from the CLI or back to back through
//! [`Pipeline::run`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::cvqvae::{self, CvqVae, CvqVaeConfig, CvqVaeMeta};
use crate::error::{Error, Result};
use crate::eval::{collision_rate, l2_metric, svg_histogram, svg_line_chart, EvalReport, Footprint, HorizonL2};
use crate::oracle::{pretrain_tokens, Oracle, OracleConfig, OracleExample, OracleMeta, StateTuple};
use crate::policy::{self, Actor, PolicyConfig, PolicyMeta, PolicyState, TaskConfig, Transition};
use crate::refine::{refine_examples, train_refinement, ActionPair, RefineConfig, RefineMeta, RefinementHead};
use crate::reward::{score, RewardConfig, RewardRecord};
use crate::rng::{self, stage_seed};
use crate::scene::{
    build_preference_dataset, build_scene_dataset, generate_risky_variant, load_preference_dataset,
    load_scene_dataset, read_jsonl, Point, SceneParams, SceneSample,
};

/// Environment variable naming the artifact root.
pub const DATA_DIR_ENV: &str = "VDRIVE_DATA_DIR";

/// Stage names in execution order.
pub const STAGES: [&str; 8] = ["gen-data", "cvqvae", "oracle", "rewards", "transitions", "policy", "refine", "eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub frames: usize,
    pub preference_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_episodes: 12,
            eval_episodes: 3,
            frames: 8,
            preference_pairs: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub buckets: Vec<usize>,
    pub footprint: Footprint,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            buckets: vec![3, 5, 8],
            footprint: Footprint::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Train models; when false, stages load existing checkpoints instead.
    pub train: bool,
    pub scene: SceneParams,
    pub data: DataConfig,
    pub reward: RewardConfig,
    pub cvqvae: CvqVaeConfig,
    pub oracle: OracleConfig,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub policy_steps: usize,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: true,
            scene: SceneParams::default(),
            data: DataConfig::default(),
            reward: RewardConfig::default(),
            cvqvae: CvqVaeConfig {
                steps: 400,
                ..Default::default()
            },
            oracle: OracleConfig {
                steps: 200,
                ..Default::default()
            },
            task: TaskConfig {
                episodes: 40,
                eval_episodes: 0,
                ..Default::default()
            },
            policy: PolicyConfig::default(),
            policy_steps: 300,
            refine: RefineConfig {
                steps: 300,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.reward.validate()?;
        self.cvqvae.validate()?;
        self.policy.validate()?;
        if self.data.frames < 2 || self.data.frames > self.scene.episode_frames {
            return Err(Error::invalid(format!(
                "data.frames must be in 2..={}",
                self.scene.episode_frames
            )));
        }
        if self.data.train_episodes == 0 || self.data.eval_episodes == 0 {
            return Err(Error::invalid("train and eval episode counts must be positive"));
        }
        if self.eval.buckets.iter().any(|&k| k == 0 || k > self.scene.horizon) {
            return Err(Error::invalid(format!("horizon buckets must lie in 1..={}", self.scene.horizon)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Reads a JSON config file and applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let partial: Value = serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))?;
                let mut base = serde_json::to_value(Self::default()).unwrap();
                merge(&mut base, partial);
                base
            }
            None => serde_json::to_value(Self::default()).unwrap(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::json("pipeline config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets the field at a dotted path. The value is parsed as JSON, falling
/// back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not key=value")))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| Error::invalid(format!("unknown config key `{key}`")))?,
            Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::invalid(format!("`{part}` in `{key}` is not an index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| Error::invalid(format!("index {i} out of {len} in `{key}`")))?
            }
            _ => return Err(Error::invalid(format!("`{key}` descends into a scalar"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for r in rows {
        out += &serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?;
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReward {
    pub id: String,
    pub chosen: RewardRecord,
    pub rejected: RewardRecord,
}

/// One evaluated frame, as written to `eval/trajectories.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub action: crate::scene::ActionTriplet,
    pub coarse: Vec<Point>,
    pub refined: Vec<Point>,
    pub ground_truth: Vec<Point>,
    pub reward: f64,
    pub collided: bool,
}

/// Handle on an artifact root and the resolved configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub root: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            root: root.into(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn seed(&self, stage: &str) -> u64 {
        stage_seed(self.config.seed, stage)
    }

    fn summary_path(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("summary.json")
    }

    fn require(&self, stage: &'static str, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.join(checkpoint::INDEX_FILE).is_file() || p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingCheckpoint { stage, path: p })
        }
    }

    /// Runs every stage in order and returns the report.
    pub fn run(&self) -> Result<EvalReport> {
        self.gen_data()?;
        self.train_cvqvae()?;
        self.pretrain_oracle()?;
        self.build_rewards()?;
        self.build_transitions()?;
        self.train_policy()?;
        self.train_refine()?;
        self.eval()
    }

    pub fn run_stage(&self, stage: &str) -> Result<Value> {
        let v = match stage {
            "gen-data" => self.gen_data()?,
            "cvqvae" => self.train_cvqvae()?,
            "oracle" => self.pretrain_oracle()?,
            "rewards" => self.build_rewards()?,
            "transitions" => self.build_transitions()?,
            "policy" => self.train_policy()?,
            "refine" => self.train_refine()?,
            "eval" => serde_json::to_value(self.eval()?).unwrap(),
            other => return Err(Error::invalid(format!("unknown stage `{other}`"))),
        };
        Ok(v)
    }

    // ---- data ---------------------------------------------------------

    pub fn gen_data(&self) -> Result<Value> {
        let c = &self.config;
        let seed = self.seed("gen-data");
        let train = build_scene_dataset(c.data.train_episodes, c.data.frames, rng::derive_seed(seed, 0), &c.scene, &self.path("data/train"))?;
        let eval = build_scene_dataset(c.data.eval_episodes, c.data.frames, rng::derive_seed(seed, 1), &c.scene, &self.path("data/eval"))?;
        let (_, pairs) = build_preference_dataset(c.data.preference_pairs, rng::derive_seed(seed, 2), &c.scene, &self.path("data/pairs"))?;
        let summary = serde_json::json!({
            "train_manifest": "data/train/scenes.jsonl",
            "eval_manifest": "data/eval/scenes.jsonl",
            "pairs_manifest": "data/pairs/pairs.jsonl",
            "train_frames": c.data.train_episodes * c.data.frames,
            "eval_frames": c.data.eval_episodes * c.data.frames,
            "pairs": c.data.preference_pairs,
        });
        debug_assert!(train.is_file() && eval.is_file() && pairs.is_file());
        write_json(&self.summary_path("data"), &summary)?;
        Ok(summary)
    }

    pub fn train_episodes(&self) -> Result<Vec<Vec<SceneSample>>> {
        let m = self.require("gen-data", "data/train/scenes.jsonl")?;
        Ok(load_scene_dataset(&m)?.into_iter().map(|e| e.into_iter().map(|(_, s)| s).collect()).collect())
    }

    pub fn eval_episodes(&self) -> Result<Vec<Vec<SceneSample>>> {
        let m = self.require("gen-data", "data/eval/scenes.jsonl")?;
        Ok(load_scene_dataset(&m)?.into_iter().map(|e| e.into_iter().map(|(_, s)| s).collect()).collect())
    }

    // ---- cvqvae -------------------------------------------------------

    pub fn train_cvqvae(&self) -> Result<Value> {
        if !self.config.train {
            self.load_cvqvae()?;
            return read_json(&self.summary_path("cvqvae"));
        }
        let scenes: Vec<SceneSample> = self.train_episodes()?.into_iter().flatten().collect();
        self.train_cvqvae_on(&scenes)
    }

    pub fn train_cvqvae_on(&self, scenes: &[SceneSample]) -> Result<Value> {
        let (model, log) = cvqvae::train(scenes, &self.config.cvqvae, self.seed("cvqvae"), |_| {})?;
        checkpoint::save(&self.path("cvqvae/model"), CvqVae::KIND, &model.meta(), &model.params)?;
        write_jsonl(&self.path("cvqvae/metrics.jsonl"), &log)?;
        let recon: Vec<f64> = log.iter().map(|m| m.recon).collect();
        write_text(&self.path("plots/cvqvae_recon.svg"), &svg_line_chart("CVQ-VAE reconstruction BCE / pixel", &[("recon", &recon)]))?;
        let (bce, perplexity) = model.evaluate(scenes)?;
        let summary = serde_json::json!({ "recon_bce_per_pixel": bce, "perplexity": perplexity, "steps": log.len() });
        write_json(&self.summary_path("cvqvae"), &summary)?;
        Ok(summary)
    }

    pub fn load_cvqvae(&self) -> Result<CvqVae> {
        let dir = self.require("cvqvae", "cvqvae/model")?;
        let (meta, params): (CvqVaeMeta, _) = checkpoint::load(&dir, CvqVae::KIND)?;
        CvqVae::from_parts(meta, params)
    }

    // ---- oracle -------------------------------------------------------

    fn tuple(cvq: &CvqVae, s: &SceneSample, t: usize) -> Result<StateTuple> {
        Ok(StateTuple {
            tokens: cvq.tokens_for_scene(s)?,
            action: s.action,
            nav: s.nav,
            trajectory: s.trajectory.clone(),
            t,
        })
    }

    pub fn oracle_examples(cvq: &CvqVae, episodes: &[Vec<SceneSample>]) -> Result<Vec<OracleExample>> {
        let mut out = Vec::new();
        for ep in episodes {
            let tuples = ep.iter().enumerate().map(|(k, s)| Self::tuple(cvq, s, k)).collect::<Result<Vec<_>>>()?;
            for w in tuples.windows(2) {
                out.push(OracleExample {
                    prev: w[0].clone(),
                    next: w[1].clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn pretrain_oracle(&self) -> Result<Value> {
        if !self.config.train {
            self.load_oracle()?;
            return read_json(&self.summary_path("oracle"));
        }
        self.pretrain_oracle_on(&self.train_episodes()?)
    }

    pub fn pretrain_oracle_on(&self, episodes: &[Vec<SceneSample>]) -> Result<Value> {
        let cvq = self.load_cvqvae()?;
        let examples = Self::oracle_examples(&cvq, episodes)?;
        let (oracle, log) = pretrain_tokens(&examples, cvq.config.codes, &self.config.oracle, self.seed("oracle"), |_| {})?;
        checkpoint::save(&self.path("oracle/model"), Oracle::KIND, &oracle.meta, &oracle.params)?;
        write_jsonl(&self.path("oracle/loss.jsonl"), &log)?;
        let ce: Vec<f64> = log.iter().map(|s| s.token_ce).collect();
        write_text(&self.path("plots/oracle_token_ce.svg"), &svg_line_chart("Oracle next-token cross-entropy", &[("token CE", &ce)]))?;
        let summary = serde_json::json!({
            "examples": examples.len(),
            "final_token_ce": ce.last().copied().unwrap_or(f64::NAN),
            "token_accuracy": oracle.token_accuracy(&examples)?,
        });
        write_json(&self.summary_path("oracle"), &summary)?;
        Ok(summary)
    }

    pub fn load_oracle(&self) -> Result<Oracle> {
        let dir = self.require("oracle", "oracle/model")?;
        let (meta, params): (OracleMeta, _) = checkpoint::load(&dir, Oracle::KIND)?;
        Oracle::from_parts(meta, params)
    }

    // ---- rewards ------------------------------------------------------

    pub fn build_rewards(&self) -> Result<Value> {
        let m = self.require("gen-data", "data/pairs/pairs.jsonl")?;
        let mut rows = Vec::new();
        for (entry, chosen, rejected) in load_preference_dataset(&m)? {
            rows.push(PairReward {
                id: entry.id,
                chosen: score(&chosen, &chosen.trajectory, &self.config.reward)?,
                rejected: score(&rejected, &rejected.trajectory, &self.config.reward)?,
            });
        }
        write_jsonl(&self.path("rewards/rewards.jsonl"), &rows)?;
        let n = rows.len().max(1) as f64;
        let summary = serde_json::json!({
            "pairs": rows.len(),
            "chosen_mean": rows.iter().map(|r| r.chosen.r).sum::<f64>() / n,
            "rejected_mean": rows.iter().map(|r| r.rejected.r).sum::<f64>() / n,
            "chosen_preferred": rows.iter().filter(|r| r.chosen.r > r.rejected.r).count(),
        });
        write_json(&self.summary_path("rewards"), &summary)?;
        Ok(summary)
    }

    // ---- transitions and policy ---------------------------------------

    pub fn build_transitions(&self) -> Result<Value> {
        let cvq = self.load_cvqvae()?;
        let task = TaskConfig {
            reward: self.config.reward,
            ..self.config.task.clone()
        };
        let t = policy::corridor_transitions(&cvq, &self.config.scene, &task, self.seed("transitions"))?;
        write_jsonl(&self.path("transitions/transitions.jsonl"), &t.transitions)?;
        let rewards: Vec<f64> = t.transitions.iter().map(|t| t.r as f64).collect();
        write_text(&self.path("plots/transition_rewards.svg"), &svg_histogram("Behavior transition rewards", &rewards, 20))?;
        let summary = serde_json::json!({
            "manifest": "transitions/transitions.jsonl",
            "transitions": rewards.len(),
            "mean_reward": rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
        });
        write_json(&self.summary_path("transitions"), &summary)?;
        Ok(summary)
    }

    pub fn transitions(&self) -> Result<Vec<Transition>> {
        read_jsonl(&self.require("transitions", "transitions/transitions.jsonl")?)
    }

    /// Evaluation states: ground-truth tokens of frames `k - 1` and `k`.
    pub fn policy_eval_states(&self, cvq: &CvqVae) -> Result<Vec<(PolicyState, SceneSample)>> {
        let mut r = rng::rng(self.seed("policy-eval"));
        let mut out = Vec::new();
        for ep in self.eval_episodes()? {
            out.extend(policy::episode_states(cvq, ep, self.config.task.u0_noise, &mut r)?);
        }
        Ok(out)
    }

    pub fn train_policy(&self) -> Result<Value> {
        if !self.config.train {
            self.load_actor()?;
            return read_json(&self.summary_path("policy"));
        }
        self.train_policy_on(&self.transitions()?)
    }

    pub fn train_policy_on(&self, transitions: &[Transition]) -> Result<Value> {
        let cvq = self.load_cvqvae()?;
        let (h, w) = cvq.grid();
        let run = policy::train_policy(
            transitions,
            cvq.config.codes,
            h * w,
            &self.config.policy,
            self.config.policy_steps,
            self.seed("policy"),
        )?;
        let actor = &run.trainer.actor;
        checkpoint::save(&self.path("policy/actor"), Actor::KIND, &actor.meta, &actor.params)?;
        checkpoint::save(&self.path("policy/critic"), "critic", &actor.meta, &run.trainer.critic.params)?;
        write_jsonl(&self.path("policy/loss.jsonl"), &run.log)?;
        let diff: Vec<f64> = run.log.iter().map(|r| r.diffusion).collect();
        let critic: Vec<f64> = run.log.iter().map(|r| r.critic).collect();
        write_text(
            &self.path("plots/policy_losses.svg"),
            &svg_line_chart("Policy losses", &[("diffusion", &diff), ("critic TD", &critic)]),
        )?;
        let eval = policy::evaluate_policy(
            actor,
            &self.policy_eval_states(&cvq)?,
            &self.config.scene.kinematics,
            &self.config.reward,
            self.seed("policy-sample"),
        )?;
        let summary = serde_json::json!({
            "steps": run.log.len(),
            "omega_q": self.config.policy.omega_q,
            "eval_mean_reward": eval.mean_reward,
            "eval_off_road_rate": eval.off_road_rate,
        });
        write_json(&self.summary_path("policy"), &summary)?;
        Ok(summary)
    }

    pub fn load_actor(&self) -> Result<Actor> {
        let dir = self.require("policy", "policy/actor")?;
        let (meta, params): (PolicyMeta, _) = checkpoint::load(&dir, Actor::KIND)?;
        Actor::from_parts(meta, params)
    }

    // ---- refinement ---------------------------------------------------

    pub fn train_refine(&self) -> Result<Value> {
        if !self.config.train {
            self.load_refine()?;
            return read_json(&self.summary_path("refine"));
        }
        self.train_refine_on(&self.train_episodes()?)
    }

    pub fn train_refine_on(&self, episodes: &[Vec<SceneSample>]) -> Result<Value> {
        let mut frames = Vec::new();
        for ep in episodes {
            for w in ep.windows(2) {
                frames.push((w[0].clone(), w[1].clone()));
            }
        }
        let seed = self.seed("refine");
        let examples = refine_examples(&frames, self.config.refine.jitter, rng::derive_seed(seed, 0));
        let (head, log) = train_refinement(&examples, &self.config.refine, rng::derive_seed(seed, 1))?;
        checkpoint::save(&self.path("refine/model"), RefinementHead::KIND, &head.meta, &head.params)?;
        write_jsonl(&self.path("refine/loss.jsonl"), &log)?;
        let loss: Vec<f64> = log.iter().map(|s| s.loss).collect();
        write_text(&self.path("plots/refine_loss.svg"), &svg_line_chart("Refinement MSE", &[("mse", &loss)]))?;
        let summary = serde_json::json!({
            "examples": examples.len(),
            "final_loss": loss.last().copied().unwrap_or(f64::NAN),
        });
        write_json(&self.summary_path("refine"), &summary)?;
        Ok(summary)
    }

    pub fn load_refine(&self) -> Result<RefinementHead> {
        let dir = self.require("refine", "refine/model")?;
        let (meta, params): (RefineMeta, _) = checkpoint::load(&dir, RefinementHead::KIND)?;
        RefinementHead::from_parts(meta, params)
    }

    // ---- evaluation ---------------------------------------------------

    /// Oracle prediction, policy action, kinematic rollout and refinement on
    /// every held-out frame after the first of each episode.
    pub fn eval(&self) -> Result<EvalReport> {
        let c = &self.config;
        let cvq = self.load_cvqvae()?;
        let oracle = self.load_oracle()?;
        let actor = self.load_actor()?;
        let head = self.load_refine()?;
        let kin = c.scene.kinematics;
        let mut r = rng::rng(self.seed("eval"));
        let mut rows = Vec::new();
        let mut obstacles = Vec::new();
        let mut l2_sums = vec![0.0; c.eval.buckets.len()];
        let mut coarse_l2 = vec![0.0; c.eval.buckets.len()];
        let mut coarse_reward = 0.0;
        for (e, ep) in self.eval_episodes()?.iter().enumerate() {
            let mut prev_action = ep[0].action;
            for k in 1..ep.len() {
                let prev = Self::tuple(&cvq, &ep[k - 1], k - 1)?;
                let pred = oracle.predict_next(&prev)?;
                let state = PolicyState {
                    current: prev.tokens.clone(),
                    predicted: pred.tokens,
                    u0: pred.action,
                    nav: pred.nav,
                };
                let a = actor.sample_action(&state, &mut r)?;
                let scene = &ep[k];
                let coarse = kin.rollout(scene.ego_start(), a, scene.trajectory.len());
                let refined = head.refine(
                    &coarse,
                    &ActionPair {
                        prev: prev_action,
                        curr: a,
                    },
                )?;
                prev_action = a;
                for (s, v) in coarse_l2.iter_mut().zip(l2_metric(&coarse, &scene.trajectory, &c.eval.buckets)?) {
                    *s += v;
                }
                coarse_reward += score(scene, &coarse, &c.reward)?.r;
                for (s, v) in l2_sums.iter_mut().zip(l2_metric(&refined, &scene.trajectory, &c.eval.buckets)?) {
                    *s += v;
                }
                let reward = score(scene, &refined, &c.reward)?.r;
                let collided = crate::eval::trajectory_collides(&refined, &scene.obstacles, c.eval.footprint);
                obstacles.push(scene.obstacles.clone());
                rows.push(EvalRow {
                    id: format!("ep{e:05}_f{k:02}"),
                    action: a,
                    coarse,
                    refined,
                    ground_truth: scene.trajectory.clone(),
                    reward,
                    collided,
                });
            }
        }
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("evaluation produced no samples"));
        }
        write_jsonl(&self.path("eval/trajectories.jsonl"), &rows)?;
        let trajs: Vec<Vec<Point>> = rows.iter().map(|r| r.refined.clone()).collect();
        let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
        write_text(&self.path("plots/eval_rewards.svg"), &svg_histogram("Evaluation hybrid reward", &rewards, 20))?;

        let mut stages = serde_json::Map::new();
        for s in ["data", "cvqvae", "oracle", "rewards", "transitions", "policy", "refine"] {
            let p = self.summary_path(s);
            if p.is_file() {
                stages.insert(s.to_string(), read_json(&p)?);
            }
        }
        stages.insert(
            "eval".into(),
            serde_json::json!({
                "coarse_mean_hybrid_reward": coarse_reward / n as f64,
                "coarse_l2": coarse_l2.iter().map(|s| s / n as f64).collect::<Vec<_>>(),
            }),
        );
        let report = EvalReport {
            l2: c
                .eval
                .buckets
                .iter()
                .zip(&l2_sums)
                .map(|(&k, s)| HorizonL2 {
                    waypoints: k,
                    mean: s / n as f64,
                })
                .collect(),
            collision_rate: collision_rate(&trajs, &obstacles, c.eval.footprint)?,
            mean_hybrid_reward: rewards.iter().sum::<f64>() / n as f64,
            samples: n,
            config_hash: c.hash(),
            seed: c.seed,
            stages: Value::Object(stages),
            config: serde_json::to_value(c).unwrap(),
        };
        report.validate()?;
        write_json(&self.path("eval/report.json"), &report)?;
        Ok(report)
    }

    /// Teacher-forced oracle scores of frame `k` of eval episode `e` against
    /// its risky variant, conditioned on frame `k - 1`.
    pub fn score_frame(&self, e: usize, k: usize) -> Result<(f64, f64)> {
        let cvq = self.load_cvqvae()?;
        let oracle = self.load_oracle()?;
        let episodes = self.eval_episodes()?;
        let ep = episodes
            .get(e)
            .ok_or_else(|| Error::invalid(format!("episode {e} out of {}", episodes.len())))?;
        if k == 0 || k >= ep.len() {
            return Err(Error::invalid(format!("frame {k} outside 1..{}", ep.len())));
        }
        let prev = Self::tuple(&cvq, &ep[k - 1], k - 1)?;
        let chosen = Self::tuple(&cvq, &ep[k], k)?;
        let risky = generate_risky_variant(&ep[k], self.seed("score") ^ (e * 1000 + k) as u64, &self.config.scene.kinematics);
        let rejected = Self::tuple(&cvq, &risky, k)?;
        oracle.score_preference(&prev, &chosen, &rejected)
    }
}

/// Runs the whole pipeline under `root`.
pub fn run_pipeline(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<EvalReport> {
    Pipeline::new(config, root)?.run()
}

/// One row of a multi-report comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub report: String,
    pub omega_q: f64,
    pub mean_hybrid_reward: f64,
    pub collision_rate: f64,
    pub l2_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `increasing`, `decreasing`, `constant` or `non-monotone` reward trend in omega_Q.
    pub reward_trend: String,
}

/// Compares reports by their policy omega_Q.
pub fn compare_reports(paths: &[PathBuf]) -> Result<Comparison> {
    if paths.is_empty() {
        return Err(Error::invalid("no reports to compare"));
    }
    let mut rows = Vec::new();
    for p in paths {
        let r: EvalReport = read_json(p)?;
        let omega_q = r
            .config
            .pointer("/policy/omega_q")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::invalid(format!("{} has no policy.omega_q", p.display())))?;
        rows.push(ComparisonRow {
            report: p.display().to_string(),
            omega_q,
            mean_hybrid_reward: r.mean_hybrid_reward,
            collision_rate: r.collision_rate,
            l2_mean: r.l2.iter().map(|h| h.mean).sum::<f64>() / r.l2.len().max(1) as f64,
        });
    }
    rows.sort_by(|a, b| a.omega_q.total_cmp(&b.omega_q));
    let diffs: Vec<f64> = rows.windows(2).map(|w| w[1].mean_hybrid_reward - w[0].mean_hybrid_reward).collect();
    let reward_trend = if diffs.iter().all(|&d| d == 0.0) {
        "constant"
    } else if diffs.iter().all(|&d| d >= 0.0) {
        "increasing"
    } else if diffs.iter().all(|&d| d <= 0.0) {
        "decreasing"
    } else {
        "non-monotone"
    };
    Ok(Comparison {
        rows,
        reward_trend: reward_trend.into(),
    })
}

impl Comparison {
    pub fn markdown(&self) -> String {
        let mut s = String::from("| omega_Q | mean hybrid reward | collision rate | mean L2 | report |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s += &format!(
                "| {} | {:.4} | {:.4} | {:.4} | {} |\n",
                r.omega_q, r.mean_hybrid_reward, r.collision_rate, r.l2_mean, r.report
            );
        }
        s += &format!("\nreward trend in omega_Q: {}\n", self.reward_trend);
        s
    }
}
