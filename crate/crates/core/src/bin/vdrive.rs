use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use vdrive::pipeline::{compare_reports, Pipeline, PipelineConfig, DATA_DIR_ENV};
use vdrive::policy::{self, Transition};
use vdrive::refine::ActionPair;
use vdrive::reward::{score, RewardConfig};
use vdrive::scene::{load_scene_dataset, read_jsonl, SampleEntry, SceneSample};
use vdrive::tensor::write_vdtn;
use vdrive::{Error, Result};

#[derive(Parser)]
#[command(name = "vdrive", version, about = "Train and evaluate the desk-scale driving stack")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// JSON config; unspecified fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set policy.omega_q=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root. Defaults to $VDRIVE_DATA_DIR, then ./artifacts.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/eval scene episodes and preference pairs.
    GenData,
    TrainCvqvae,
    PretrainOracle,
    /// Score every preference pair with the hybrid reward.
    BuildRewards,
    /// Build the offline transition dataset for the policy.
    BuildTransitions,
    TrainPolicy,
    TrainRefine,
    /// Run the evaluation stage and write `eval/report.json`.
    Eval,
    /// Run every stage in order.
    RunPipeline,
    /// Compare reports across an omega_Q sweep.
    Report {
        reports: Vec<PathBuf>,
        /// Write the comparison table here as Markdown.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved config.
    Config,
    #[command(subcommand)]
    Reward(RewardCmd),
    #[command(subcommand)]
    Cvqvae(CvqCmd),
    #[command(subcommand)]
    Oracle(OracleCmd),
    #[command(subcommand)]
    Policy(PolicyCmd),
    #[command(subcommand)]
    Refine(RefineCmd),
}

#[derive(Subcommand)]
enum RewardCmd {
    /// Score each scene's ground-truth trajectory.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long = "omega-h")]
        omega_h: Option<f64>,
        #[arg(long = "omega-a")]
        omega_a: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CvqCmd {
    Train {
        /// Scene manifest; defaults to the generated training split.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the continuous latent grid of each scene as a VDTN file.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the token grid of each scene as JSONL.
    Tokens {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    Pretrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Predict frame k from frame k-1 for every consecutive pair.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-likelihood of an eval frame against its risky variant.
    Score {
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 1)]
        frame: usize,
    },
}

#[derive(Args)]
struct PolicyOpts {
    /// Transition JSONL; defaults to the built transition set.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long = "omega-q")]
    omega_q: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum PolicyCmd {
    Train(PolicyOpts),
    /// Sample one action per transition state.
    Sample {
        #[command(flatten)]
        opts: PolicyOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean hybrid reward of sampled actions on the eval split.
    Eval(PolicyOpts),
}

#[derive(Subcommand)]
enum RefineCmd {
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Refine each scene's kinematic rollout of its expert action.
    Apply {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pipeline(g: &Global, extra: &[String]) -> Result<Pipeline> {
    let mut sets = g.set.clone();
    if let Some(s) = g.seed {
        sets.push(format!("seed={s}"));
    }
    sets.extend_from_slice(extra);
    let config = PipelineConfig::load(g.config.as_deref(), &sets)?;
    let root = g
        .root
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("artifacts"));
    Pipeline::new(config, root)
}

fn episodes(manifest: &Path) -> Result<Vec<Vec<(SampleEntry, SceneSample)>>> {
    load_scene_dataset(manifest)
}

fn scenes_only(manifest: &Path) -> Result<Vec<Vec<SceneSample>>> {
    Ok(episodes(manifest)?
        .into_iter()
        .map(|e| e.into_iter().map(|(_, s)| s).collect())
        .collect())
}

fn write_rows<T: Serialize>(out: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text += &serde_json::to_string(r).map_err(|e| json_err(out, e))?;
        text.push('\n');
    }
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::Io { path: d.into(), source: e })?;
    }
    fs::write(out, text).map_err(|e| Error::Io { path: out.into(), source: e })
}

fn json_err(p: &Path, e: serde_json::Error) -> Error {
    Error::Json {
        context: p.display().to_string(),
        source: e,
    }
}

fn policy_overrides(o: &PolicyOpts) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(w) = o.omega_q {
        v.push(format!("policy.omega_q={w}"));
    }
    if let Some(g) = o.gamma {
        v.push(format!("policy.gamma={g}"));
    }
    v
}

fn run(cli: Cli) -> Result<Value> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::GenData => pipeline(g, &[])?.gen_data(),
        Cmd::TrainCvqvae => pipeline(g, &[])?.train_cvqvae(),
        Cmd::PretrainOracle => pipeline(g, &[])?.pretrain_oracle(),
        Cmd::BuildRewards => pipeline(g, &[])?.build_rewards(),
        Cmd::BuildTransitions => pipeline(g, &[])?.build_transitions(),
        Cmd::TrainPolicy => pipeline(g, &[])?.train_policy(),
        Cmd::TrainRefine => pipeline(g, &[])?.train_refine(),
        Cmd::Eval => Ok(serde_json::to_value(pipeline(g, &[])?.eval()?).unwrap()),
        Cmd::RunPipeline => Ok(serde_json::to_value(pipeline(g, &[])?.run()?).unwrap()),
        Cmd::Config => Ok(serde_json::to_value(&pipeline(g, &[])?.config).unwrap()),
        Cmd::Report { reports, out } => {
            let cmp = compare_reports(&reports)?;
            if let Some(out) = out {
                fs::write(&out, cmp.markdown()).map_err(|e| Error::Io { path: out, source: e })?;
            } else {
                print!("{}", cmp.markdown());
            }
            Ok(serde_json::to_value(&cmp).unwrap())
        }
        Cmd::Reward(RewardCmd::Score {
            manifest,
            alpha,
            beta,
            omega_h,
            omega_a,
            out,
        }) => {
            let base = pipeline(g, &[])?.config.reward;
            let cfg = RewardConfig {
                alpha: alpha.unwrap_or(base.alpha),
                beta: beta.unwrap_or(base.beta),
                omega_h: omega_h.unwrap_or(base.omega_h),
                omega_a: omega_a.unwrap_or(base.omega_a),
                ..base
            };
            cfg.validate()?;
            let mut rows = Vec::new();
            for (entry, s) in episodes(&manifest)?.into_iter().flatten() {
                let rec = score(&s, &s.trajectory, &cfg)?;
                let mut v = serde_json::to_value(rec).unwrap();
                v["id"] = json!(entry.id);
                rows.push(v);
            }
            write_rows(&out, &rows)?;
            Ok(json!({ "scored": rows.len(), "out": out }))
        }
        Cmd::Cvqvae(c) => {
            let p = pipeline(g, &[])?;
            match c {
                CvqCmd::Train { manifest: None } => p.train_cvqvae(),
                CvqCmd::Train { manifest: Some(m) } => {
                    let scenes: Vec<SceneSample> = scenes_only(&m)?.into_iter().flatten().collect();
                    p.train_cvqvae_on(&scenes)
                }
                CvqCmd::Encode { manifest, out } => {
                    let cvq = p.load_cvqvae()?;
                    let mut n = 0;
                    for (entry, s) in episodes(&manifest)?.into_iter().flatten() {
                        write_vdtn(out.join(format!("{}.vdtn", entry.id)), &cvq.encode_scene(&s)?)?;
                        n += 1;
                    }
                    Ok(json!({ "encoded": n, "out": out }))
                }
                CvqCmd::Tokens { manifest, out } => {
                    let cvq = p.load_cvqvae()?;
                    let mut rows = Vec::new();
                    for (entry, s) in episodes(&manifest)?.into_iter().flatten() {
                        rows.push(json!({ "id": entry.id, "tokens": cvq.tokens_for_scene(&s)? }));
                    }
                    write_rows(&out, &rows)?;
                    Ok(json!({ "scenes": rows.len(), "out": out }))
                }
            }
        }
        Cmd::Oracle(c) => {
            let p = pipeline(g, &[])?;
            match c {
                OracleCmd::Pretrain { manifest: None } => p.pretrain_oracle(),
                OracleCmd::Pretrain { manifest: Some(m) } => p.pretrain_oracle_on(&scenes_only(&m)?),
                OracleCmd::Predict { manifest, out } => {
                    let cvq = p.load_cvqvae()?;
                    let oracle = p.load_oracle()?;
                    let examples = Pipeline::oracle_examples(&cvq, &scenes_only(&manifest)?)?;
                    let mut rows = Vec::new();
                    for ex in &examples {
                        let pred = oracle.predict_next(&ex.prev)?;
                        let matched = pred.tokens.iter().zip(&ex.next.tokens).filter(|(a, b)| a == b).count();
                        rows.push(json!({
                            "t": ex.next.t,
                            "prediction": pred,
                            "token_accuracy": matched as f64 / pred.tokens.len() as f64,
                        }));
                    }
                    write_rows(&out, &rows)?;
                    Ok(json!({ "predictions": rows.len(), "out": out }))
                }
                OracleCmd::Score { episode, frame } => {
                    let (chosen, rejected) = p.score_frame(episode, frame)?;
                    Ok(json!({ "chosen_logp": chosen, "rejected_logp": rejected, "prefers_chosen": chosen > rejected }))
                }
            }
        }
        Cmd::Policy(c) => {
            let opts = match &c {
                PolicyCmd::Train(o) | PolicyCmd::Eval(o) | PolicyCmd::Sample { opts: o, .. } => o,
            };
            let p = pipeline(g, &policy_overrides(opts))?;
            let transitions = |o: &PolicyOpts| -> Result<Vec<Transition>> {
                match &o.dataset {
                    Some(d) => read_jsonl(d),
                    None => p.transitions(),
                }
            };
            match &c {
                PolicyCmd::Train(o) => p.train_policy_on(&transitions(o)?),
                PolicyCmd::Sample { opts, out } => {
                    let actor = p.load_actor()?;
                    let data = transitions(opts)?;
                    let states: Vec<_> = data.iter().map(|t| &t.s).collect();
                    let mut r = vdrive::rng::rng(vdrive::rng::stage_seed(p.config.seed, "policy-sample"));
                    let actions = actor.sample_actions(&states, &mut r)?;
                    write_rows(out, &actions)?;
                    Ok(json!({ "samples": actions.len(), "out": out }))
                }
                PolicyCmd::Eval(_) => {
                    let actor = p.load_actor()?;
                    let cvq = p.load_cvqvae()?;
                    let ev = policy::evaluate_policy(
                        &actor,
                        &p.policy_eval_states(&cvq)?,
                        &p.config.scene.kinematics,
                        &p.config.reward,
                        vdrive::rng::stage_seed(p.config.seed, "policy-sample"),
                    )?;
                    Ok(serde_json::to_value(ev).unwrap())
                }
            }
        }
        Cmd::Refine(c) => {
            let p = pipeline(g, &[])?;
            match c {
                RefineCmd::Train { manifest: None } => p.train_refine(),
                RefineCmd::Train { manifest: Some(m) } => p.train_refine_on(&scenes_only(&m)?),
                RefineCmd::Apply { manifest, out } => {
                    let head = p.load_refine()?;
                    let kin = p.config.scene.kinematics;
                    let mut rows = Vec::new();
                    for ep in episodes(&manifest)? {
                        for w in ep.windows(2) {
                            let (entry, s) = &w[1];
                            let coarse = kin.rollout(s.ego_start(), s.action, s.trajectory.len());
                            let u = ActionPair {
                                prev: w[0].1.action,
                                curr: s.action,
                            };
                            let refined = head.refine(&coarse, &u)?;
                            rows.push(json!({ "id": entry.id, "coarse": coarse, "refined": refined }));
                        }
                    }
                    write_rows(&out, &rows)?;
                    Ok(json!({ "refined": rows.len(), "out": out }))
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
