//! Procedural corridor scenes.
//!
//! An episode is a curved corridor laid out in a global row frame together
//! with off-road obstacle boxes. Frame `k` is the `H x W` window that the ego
//! sees after advancing `k` frame shifts, so consecutive frames share geometry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kinematics::Kinematics;
use super::types::{ActionTriplet, Mask, NavCommand, Point, Rect, SceneSample};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, normal};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Waypoints per trajectory.
    pub horizon: usize,
    /// Inclusive corridor width range in pixels.
    pub corridor_width: (usize, usize),
    /// Range of the quadratic bend coefficient of the corridor centre line.
    pub curvature: (f64, f64),
    pub obstacle_count: usize,
    /// Ego speed range, pixels per step.
    pub speed: (f64, f64),
    pub image_noise: f64,
    /// Longest episode the obstacle layout is generated for.
    pub episode_frames: usize,
    pub kinematics: Kinematics,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            horizon: 8,
            corridor_width: (10, 20),
            curvature: (-0.008, 0.008),
            obstacle_count: 3,
            speed: (2.5, 4.5),
            image_noise: 0.05,
            episode_frames: 8,
            kinematics: Kinematics::default(),
        }
    }
}

const BACKGROUND: f64 = 0.1;
const ROAD: f64 = 0.8;
const OBSTACLE: f64 = 0.35;
/// Lateral displacement (pixels) below which the command is "straight".
const STRAIGHT_BAND: f64 = 2.0;

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h < 16 || w < 16 {
            return Err(Error::invalid(format!("scene {h}x{w} is smaller than 16x16")));
        }
        let (wmin, wmax) = self.corridor_width;
        if wmin < 3 {
            return Err(Error::invalid(format!("corridor width {wmin} is below 3 pixels")));
        }
        if wmax < wmin {
            return Err(Error::invalid("corridor width range is reversed"));
        }
        if wmax >= w {
            return Err(Error::invalid(format!("corridor width {wmax} does not fit in width {w}")));
        }
        if self.curvature.1 < self.curvature.0 || self.speed.1 < self.speed.0 {
            return Err(Error::invalid("parameter range is reversed"));
        }
        if self.horizon == 0 || self.channels == 0 || self.episode_frames == 0 {
            return Err(Error::invalid("horizon, channels and episode_frames must be positive"));
        }
        if self.speed.0 <= 0.0 {
            return Err(Error::invalid("ego speed must be positive"));
        }
        if self.speed.1 * self.horizon as f64 > h as f64 - 1.0 {
            return Err(Error::invalid(format!(
                "{} steps at speed {} leave the {h}-row frame",
                self.horizon, self.speed.1
            )));
        }
        Ok(())
    }

    fn frame_shift(&self, speed: f64) -> i64 {
        (speed.round() as i64).max(1)
    }
}

/// Episode-level random draws; every frame is rendered from these.
#[derive(Clone, Debug)]
struct Layout {
    seed: u64,
    corridor: usize,
    x0: f64,
    bend: f64,
    speed: f64,
    shift: i64,
    /// Obstacles in global rows.
    obstacles: Vec<Rect>,
}

impl Layout {
    fn draw(seed: u64, p: &SceneParams) -> Self {
        let mut r = rng::rng(seed);
        let corridor = r.random_range(p.corridor_width.0..=p.corridor_width.1);
        let half = corridor as f64 / 2.0;
        let x0 = r.random_range(half..=p.width as f64 - half);
        let bend = if p.curvature.0 == p.curvature.1 {
            p.curvature.0
        } else {
            r.random_range(p.curvature.0..=p.curvature.1)
        };
        let speed = if p.speed.0 == p.speed.1 {
            p.speed.0
        } else {
            r.random_range(p.speed.0..=p.speed.1)
        };
        let shift = p.frame_shift(speed);
        let mut layout = Layout {
            seed,
            corridor,
            x0,
            bend,
            speed,
            shift,
            obstacles: Vec::new(),
        };
        let top = -(p.episode_frames as i64) * shift - 8;
        for _ in 0..p.obstacle_count {
            for _attempt in 0..30 {
                let (bw, bh) = (r.random_range(3..=8i64), r.random_range(3..=8i64));
                let x = r.random_range(0..=(p.width as i64 - bw));
                let y = r.random_range(top..p.height as i64);
                let rect = Rect {
                    x0: x,
                    y0: y,
                    x1: x + bw,
                    y1: y + bh,
                };
                let clear = (rect.y0..rect.y1).all(|gy| {
                    let (l, rgt) = layout.span(gy, p);
                    rect.x1 < l || rect.x0 > rgt + 1
                });
                if clear {
                    layout.obstacles.push(rect);
                    break;
                }
            }
        }
        layout
    }

    /// Inclusive drivable column span at global row `gy`.
    fn span(&self, gy: i64, p: &SceneParams) -> (i64, i64) {
        let ahead = p.height as f64 - gy as f64;
        let half = self.corridor as f64 / 2.0;
        let centre = (self.x0 + 0.5 * self.bend * ahead * ahead).clamp(half, p.width as f64 - half);
        let left = ((centre - half + 0.5).floor() as i64).clamp(0, (p.width - self.corridor) as i64);
        (left, left + self.corridor as i64 - 1)
    }

    fn render(&self, frame: usize, p: &SceneParams) -> SceneSample {
        let (h, w) = (p.height, p.width);
        let offset = frame as i64 * self.shift;
        let obstacles: Vec<Rect> = self
            .obstacles
            .iter()
            .map(|r| r.translated(offset).clipped(h, w))
            .filter(|r| !r.is_empty())
            .collect();
        let obstacle_mask = Mask::from_fn(h, w, |y, x| {
            obstacles
                .iter()
                .any(|r| (x as i64) >= r.x0 && (x as i64) < r.x1 && (y as i64) >= r.y0 && (y as i64) < r.y1)
        });
        let drivable = Mask::from_fn(h, w, |y, x| {
            let (l, r) = self.span(y as i64 - offset, p);
            (x as i64) >= l && (x as i64) <= r && !obstacle_mask.get(y, x)
        });

        let mut noise = rng::rng(derive_seed(self.seed, 1 + frame as u64));
        let mut pixels = Vec::with_capacity(h * w * p.channels);
        for y in 0..h {
            for x in 0..w {
                let base = if drivable.get(y, x) {
                    ROAD
                } else if obstacle_mask.get(y, x) {
                    OBSTACLE
                } else {
                    BACKGROUND
                };
                for _ in 0..p.channels {
                    pixels.push((base + p.image_noise * normal(&mut noise)) as f32);
                }
            }
        }
        let image = Tensor::new(vec![h, w, p.channels], pixels).unwrap();

        let start = super::types::ego_start(&drivable);
        let trajectory = centre_line(&drivable, start, self.speed, p.horizon);
        let (action, nav) = expert_labels(&p.kinematics, start, &trajectory, self.speed);
        SceneSample {
            drivable,
            obstacle_mask,
            obstacles,
            image,
            trajectory,
            action,
            nav,
            ego_speed: self.speed,
        }
    }
}

/// Waypoints advancing `speed` rows per step, each at its row's drivable mean.
fn centre_line(drivable: &Mask, start: Point, speed: f64, horizon: usize) -> Vec<Point> {
    (1..=horizon)
        .map(|t| {
            let y = start[1] - speed * t as f64;
            let row = y.floor() as usize;
            let cols: Vec<usize> = (0..drivable.width()).filter(|&x| drivable.get(row, x)).collect();
            let x = cols.iter().sum::<usize>() as f64 / cols.len() as f64;
            [x, y]
        })
        .collect()
}

/// Action and navigation command consistent with a trajectory.
pub fn expert_labels(kin: &Kinematics, start: Point, trajectory: &[Point], speed: f64) -> (ActionTriplet, NavCommand) {
    let throttle = (speed / kin.max_speed).clamp(0.0, 1.0) as f32;
    let steering = kin.fit_steering(start, trajectory, throttle);
    let disp = trajectory.last().map_or(0.0, |p| p[0] - start[0]);
    let nav = if disp.abs() < STRAIGHT_BAND {
        NavCommand::Straight
    } else if disp < 0.0 {
        NavCommand::Left
    } else {
        NavCommand::Right
    };
    (ActionTriplet::new(steering, throttle, 0.0), nav)
}

/// Frame 0 of the episode keyed by `seed`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneSample> {
    params.validate()?;
    Ok(Layout::draw(seed, params).render(0, params))
}

/// Consecutive frames `0..frames` of the episode keyed by `seed`.
pub fn generate_episode(seed: u64, params: &SceneParams, frames: usize) -> Result<Vec<SceneSample>> {
    params.validate()?;
    if frames == 0 || frames > params.episode_frames {
        return Err(Error::invalid(format!(
            "{frames} frames requested, episode holds 1..={}",
            params.episode_frames
        )));
    }
    let layout = Layout::draw(seed, params);
    Ok((0..frames).map(|k| layout.render(k, params)).collect())
}
