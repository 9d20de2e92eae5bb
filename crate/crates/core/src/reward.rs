//! Rule-based and expert-rated trajectory rewards.
//!
//! The rule-based part scores a trajectory against a drivable-area mask: an
//! off-road count, a Gaussian centring score per waypoint, and a flat penalty
//! whenever any waypoint leaves the road. The expert part is a deterministic
//! risk rating in `[0, 5]` (0 = safest) built from obstacle proximity and
//! motion smoothness. The hybrid reward is a weighted sum of the two after the
//! rating is remapped so that safer is larger.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Mask, Point, SceneSample};

/// Deviation assigned to waypoints whose row has no usable centre.
pub const DEVIATION_SENTINEL: f64 = 1e6;
pub const MAX_RATING: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterConfig {
    /// Weight of obstacle proximity.
    pub w_proximity: f64,
    /// Weight of motion discontinuity.
    pub w_motion: f64,
    /// Second-difference magnitude (pixels) that counts as fully discontinuous.
    pub motion_scale: f64,
}

impl Default for RaterConfig {
    fn default() -> Self {
        Self {
            w_proximity: 0.5,
            w_motion: 0.5,
            motion_scale: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Centring kernel scale.
    pub alpha: f64,
    /// Off-road penalty magnitude; applied as `-beta`.
    pub beta: f64,
    pub omega_h: f64,
    pub omega_a: f64,
    pub rater: RaterConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 10.0,
            omega_h: 1.0,
            omega_a: 0.5,
            rater: RaterConfig::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.omega_h >= 0.0 && self.omega_a >= 0.0) || !(self.omega_h + self.omega_a > 0.0) {
            return Err(Error::invalid("omega_h, omega_a must be >= 0 with a positive sum"));
        }
        if !(self.rater.motion_scale > 0.0) {
            return Err(Error::invalid("rater motion_scale must be > 0"));
        }
        Ok(())
    }
}

/// Drivable-column statistics of one mask row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowStats {
    pub row: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub count: usize,
}

impl RowStats {
    /// True when the row has no drivable column.
    pub fn is_undefined(&self) -> bool {
        self.count == 0
    }
}

/// Rule-based components for one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleReward {
    pub p_off: u32,
    pub r_center: f64,
    pub r_h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub p_off: u32,
    pub r_center: f64,
    pub r_h: f64,
    pub r_a: f64,
    pub r: f64,
    pub config: RewardConfig,
}

/// 0 when the floor-indexed pixel is in bounds and drivable, else 1.
pub fn off_road_indicator(mask: &Mask, p: Point) -> u8 {
    let (x, y) = (p[0].floor(), p[1].floor());
    if !(x.is_finite() && y.is_finite()) {
        return 1;
    }
    u8::from(!mask.get_signed(y as i64, x as i64))
}

pub fn off_road_penalty(mask: &Mask, trajectory: &[Point]) -> Result<u32> {
    if trajectory.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    Ok(trajectory.iter().map(|&p| off_road_indicator(mask, p) as u32).sum())
}

pub fn row_stats(mask: &Mask, y: usize) -> RowStats {
    let (mut min, mut max, mut sum, mut count) = (usize::MAX, 0, 0usize, 0);
    for (x, &on) in mask.row(y).iter().enumerate() {
        if on {
            min = min.min(x);
            max = max.max(x);
            sum += x;
            count += 1;
        }
    }
    if count == 0 {
        return RowStats {
            row: y,
            min: 0,
            max: 0,
            mean: f64::NAN,
            count: 0,
        };
    }
    RowStats {
        row: y,
        min,
        max,
        mean: sum as f64 / count as f64,
        count,
    }
}

/// `|x - mean| / ((max - min) / 2)`. A single-column row yields 0 when `x`
/// sits exactly on it and the sentinel otherwise; an empty row always yields
/// the sentinel.
pub fn lateral_deviation(stats: &RowStats, x: f64) -> f64 {
    if stats.is_undefined() {
        return DEVIATION_SENTINEL;
    }
    if stats.max == stats.min {
        return if x == stats.mean { 0.0 } else { DEVIATION_SENTINEL };
    }
    (x - stats.mean).abs() / ((stats.max - stats.min) as f64 / 2.0)
}

fn point_deviation(mask: &Mask, p: Point) -> f64 {
    let y = p[1].floor();
    if !(y >= 0.0 && y < mask.height() as f64) {
        return DEVIATION_SENTINEL;
    }
    lateral_deviation(&row_stats(mask, y as usize), p[0])
}

/// Mean of `exp(-alpha d_t^2)` over the waypoints.
pub fn centering_reward(mask: &Mask, trajectory: &[Point], alpha: f64) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let total: f64 = trajectory
        .iter()
        .map(|&p| {
            let d = point_deviation(mask, p);
            (-alpha * d * d).exp()
        })
        .sum();
    Ok(total / trajectory.len() as f64)
}

pub fn rule_reward(mask: &Mask, trajectory: &[Point], config: &RewardConfig) -> Result<RuleReward> {
    let p_off = off_road_penalty(mask, trajectory)?;
    let r_center = centering_reward(mask, trajectory, config.alpha)?;
    let r_h = if p_off == 0 { r_center } else { -config.beta };
    Ok(RuleReward { p_off, r_center, r_h })
}

/// Largest `|p[t+1] - 2 p[t] + p[t-1]|` along the trajectory.
pub fn max_second_difference(trajectory: &[Point]) -> f64 {
    trajectory
        .windows(3)
        .map(|w| {
            let dx = w[2][0] - 2.0 * w[1][0] + w[0][0];
            let dy = w[2][1] - 2.0 * w[1][1] + w[0][1];
            dx.hypot(dy)
        })
        .fold(0.0, f64::max)
}

/// Risk rating in `[0, 5]`; 0 is safest.
pub fn mock_expert_rating(scene: &SceneSample, trajectory: &[Point], rater: &RaterConfig) -> f64 {
    let diag = (scene.height() as f64).hypot(scene.width() as f64);
    let proximity = if scene.obstacles.is_empty() || trajectory.is_empty() {
        0.0
    } else {
        let d = trajectory
            .iter()
            .flat_map(|&p| scene.obstacles.iter().map(move |r| r.distance(p)))
            .fold(f64::INFINITY, f64::min);
        (1.0 - d / diag).clamp(0.0, 1.0)
    };
    let motion = (max_second_difference(trajectory) / rater.motion_scale).min(1.0);
    MAX_RATING * (rater.w_proximity * proximity + rater.w_motion * motion).clamp(0.0, 1.0)
}

/// Maps a risk rating onto `[-1, 1]` with the safest rating at `+1`.
pub fn signed_rating(r_a: f64) -> f64 {
    (MAX_RATING - 2.0 * r_a) / MAX_RATING
}

pub fn hybrid_reward(r_h: f64, r_a: f64, config: &RewardConfig) -> f64 {
    config.omega_h * r_h + config.omega_a * signed_rating(r_a)
}

/// Full reward record of `trajectory` evaluated in `scene`.
pub fn score(scene: &SceneSample, trajectory: &[Point], config: &RewardConfig) -> Result<RewardRecord> {
    let rule = rule_reward(&scene.drivable, trajectory, config)?;
    let r_a = mock_expert_rating(scene, trajectory, &config.rater);
    Ok(RewardRecord {
        p_off: rule.p_off,
        r_center: rule.r_center,
        r_h: rule.r_h,
        r_a,
        r: hybrid_reward(rule.r_h, r_a, config),
        config: *config,
    })
}
