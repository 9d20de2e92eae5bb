//! Synthetic driving scenes: drivable corridors, obstacle boxes, ground-truth
//! trajectories with matching actions, risky variants and preference pairs.

mod dataset;
mod generate;
mod kinematics;
mod risky;
mod types;

pub use dataset::{
    build_preference_dataset, build_scene_dataset, dataset_episode, load_preference_dataset,
    load_sample, load_scene_dataset, preference_pair, preference_pairs, read_jsonl, PairEntry,
    PreferencePair, Provenance, SampleEntry,
};
pub use generate::{expert_labels, generate_episode, generate_scene, SceneParams};
pub use kinematics::Kinematics;
pub use risky::generate_risky_variant;
pub use types::{ego_start, ActionTriplet, Mask, NavCommand, Point, Rect, SceneSample};
