//! Scene and preference-pair datasets on disk: VDTN payloads plus a JSONL
//! manifest whose paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{generate_episode, generate_scene, SceneParams};
use super::risky::generate_risky_variant;
use super::types::{ActionTriplet, Mask, NavCommand, Point, Rect, SceneSample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stage_seed};
use crate::tensor::{read_vdtn, write_vdtn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AnnotatedSafe,
    SyntheticRisky,
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub mask_path: String,
    pub obstacle_path: String,
    pub image_path: String,
    pub traj: Vec<Point>,
    pub action: ActionTriplet,
    pub nav: NavCommand,
    pub speed: f64,
    pub tag: Provenance,
    /// Obstacle boxes `[x0, y0, x1, y1]` (exclusive ends).
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub chosen: SampleEntry,
    pub rejected: SampleEntry,
}

/// A safe sample and a risky variant of the same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub index: usize,
    pub chosen: SceneSample,
    pub rejected: SceneSample,
}

impl PreferencePair {
    pub fn chosen_id(&self) -> String {
        format!("pair{:05}_chosen", self.index)
    }

    pub fn rejected_id(&self) -> String {
        format!("pair{:05}_rejected", self.index)
    }
}

/// Pair `index` of the dataset keyed by `seed`.
pub fn preference_pair(seed: u64, index: usize, params: &SceneParams) -> Result<PreferencePair> {
    let chosen = generate_scene(derive_seed(seed, index as u64), params)?;
    let rejected = generate_risky_variant(
        &chosen,
        derive_seed(stage_seed(seed, "risky"), index as u64),
        &params.kinematics,
    );
    Ok(PreferencePair {
        index,
        chosen,
        rejected,
    })
}

pub fn preference_pairs(n_pairs: usize, seed: u64, params: &SceneParams) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    (0..n_pairs).map(|i| preference_pair(seed, i, params)).collect()
}

fn write_sample(root: &Path, id: &str, scene: &SceneSample, tag: Provenance) -> Result<SampleEntry> {
    let rel = |kind: &str| format!("scenes/{id}.{kind}.vdtn");
    let entry = SampleEntry {
        id: id.to_string(),
        mask_path: rel("mask"),
        obstacle_path: rel("obstacle"),
        image_path: rel("image"),
        traj: scene.trajectory.clone(),
        action: scene.action,
        nav: scene.nav,
        speed: scene.ego_speed,
        tag,
        obstacles: scene.obstacles.clone(),
        episode: None,
        frame: None,
    };
    write_vdtn(root.join(&entry.mask_path), &scene.drivable.to_tensor())?;
    write_vdtn(root.join(&entry.obstacle_path), &scene.obstacle_mask.to_tensor())?;
    write_vdtn(root.join(&entry.image_path), &scene.image)?;
    Ok(entry)
}

/// Rebuilds the scene a manifest row describes.
pub fn load_sample(root: &Path, entry: &SampleEntry) -> Result<SceneSample> {
    let drivable = Mask::from_tensor(&read_vdtn(root.join(&entry.mask_path))?)?;
    let obstacle_mask = Mask::from_tensor(&read_vdtn(root.join(&entry.obstacle_path))?)?;
    let image = read_vdtn(root.join(&entry.image_path))?;
    let scene = SceneSample {
        drivable,
        obstacle_mask,
        obstacles: entry.obstacles.clone(),
        image,
        trajectory: entry.traj.clone(),
        action: entry.action,
        nav: entry.nav,
        ego_speed: entry.speed,
    };
    scene
        .validate()
        .map_err(|e| Error::invalid(format!("manifest row {}: {e}", entry.id)))?;
    Ok(scene)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::json("manifest row", e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Generates `n_pairs` preference pairs and writes them under `out_dir`.
/// The manifest at `out_dir/pairs.jsonl` has one row per pair.
pub fn build_preference_dataset(
    n_pairs: usize,
    seed: u64,
    params: &SceneParams,
    out_dir: &Path,
) -> Result<(Vec<PreferencePair>, PathBuf)> {
    let pairs = preference_pairs(n_pairs, seed, params)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        rows.push(PairEntry {
            id: format!("pair{:05}", pair.index),
            chosen: write_sample(out_dir, &pair.chosen_id(), &pair.chosen, Provenance::AnnotatedSafe)?,
            rejected: write_sample(out_dir, &pair.rejected_id(), &pair.rejected, Provenance::SyntheticRisky)?,
        });
    }
    let manifest = out_dir.join("pairs.jsonl");
    write_jsonl(&manifest, &rows)?;
    Ok((pairs, manifest))
}

/// Episode `e` of the scene dataset keyed by `seed`.
pub fn dataset_episode(seed: u64, e: usize, frames: usize, params: &SceneParams) -> Result<Vec<SceneSample>> {
    generate_episode(derive_seed(seed, e as u64), params, frames)
}

/// Writes `episodes x frames` consecutive frames as `out_dir/scenes.jsonl`.
pub fn build_scene_dataset(
    episodes: usize,
    frames: usize,
    seed: u64,
    params: &SceneParams,
    out_dir: &Path,
) -> Result<PathBuf> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    let mut rows = Vec::with_capacity(episodes * frames);
    for e in 0..episodes {
        for (k, scene) in dataset_episode(seed, e, frames, params)?.iter().enumerate() {
            let mut entry = write_sample(out_dir, &format!("ep{e:05}_f{k:02}"), scene, Provenance::AnnotatedSafe)?;
            entry.episode = Some(e);
            entry.frame = Some(k);
            rows.push(entry);
        }
    }
    let manifest = out_dir.join("scenes.jsonl");
    write_jsonl(&manifest, &rows)?;
    Ok(manifest)
}

/// Scenes of a scene manifest, grouped into episodes in frame order. Rows
/// without episode information form single-frame episodes.
pub fn load_scene_dataset(manifest: &Path) -> Result<Vec<Vec<(SampleEntry, SceneSample)>>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let rows: Vec<SampleEntry> = read_jsonl(manifest)?;
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} is empty", manifest.display())));
    }
    let mut episodes: Vec<(usize, Vec<(usize, SampleEntry, SceneSample)>)> = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        let scene = load_sample(root, &row)?;
        let (ep, frame) = match (row.episode, row.frame) {
            (Some(e), Some(f)) => (e, f),
            _ => (usize::MAX - i, 0),
        };
        match episodes.iter_mut().find(|(e, _)| *e == ep) {
            Some((_, v)) => v.push((frame, row, scene)),
            None => episodes.push((ep, vec![(frame, row, scene)])),
        }
    }
    Ok(episodes
        .into_iter()
        .map(|(_, mut v)| {
            v.sort_by_key(|(f, _, _)| *f);
            v.into_iter().map(|(_, r, s)| (r, s)).collect()
        })
        .collect())
}

pub fn load_preference_dataset(manifest: &Path) -> Result<Vec<(PairEntry, SceneSample, SceneSample)>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let rows: Vec<PairEntry> = read_jsonl(manifest)?;
    rows.into_iter()
        .map(|row| {
            let c = load_sample(root, &row.chosen)?;
            let r = load_sample(root, &row.rejected)?;
            Ok((row, c, r))
        })
        .collect()
}
