use rand::Rng;

use super::generate::expert_labels;
use super::kinematics::Kinematics;
use super::types::{Point, SceneSample};
use crate::reward::off_road_indicator;
use crate::rng;

const MAX_ATTEMPTS: usize = 10;
const GROWTH: f64 = 1.6;

fn violates(scene: &SceneSample, traj: &[Point]) -> bool {
    traj.iter().any(|&p| {
        off_road_indicator(&scene.drivable, p) == 1
            || scene.obstacle_mask.get_signed(p[1].floor() as i64, p[0].floor() as i64)
    })
}

/// Shears the trajectory of `base` sideways until at least one waypoint is
/// off-road or inside an obstacle. Masks and image are left untouched; the
/// action and command are re-derived from the sheared path.
pub fn generate_risky_variant(base: &SceneSample, seed: u64, kin: &Kinematics) -> SceneSample {
    let mut r = rng::rng(seed);
    let dir = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut shear = r.random_range(1.0..3.0);
    let x_max = base.width() as f64 - 1e-6;

    let shear_by = |s: f64| -> Vec<Point> {
        base.trajectory
            .iter()
            .enumerate()
            .map(|(t, p)| [(p[0] + dir * s * (t + 1) as f64).clamp(0.0, x_max), p[1]])
            .collect()
    };

    let mut traj = shear_by(shear);
    let mut attempts = 1;
    while !violates(base, &traj) && attempts < MAX_ATTEMPTS {
        shear *= GROWTH;
        traj = shear_by(shear);
        attempts += 1;
    }
    if !violates(base, &traj) {
        force_off_road(base, &mut traj, dir);
    }

    let start = base.ego_start();
    let (action, nav) = expert_labels(kin, start, &traj, base.ego_speed);
    SceneSample {
        trajectory: traj,
        action,
        nav,
        ..base.clone()
    }
}

/// Moves the last waypoint onto the nearest non-drivable pixel of its row,
/// searching in `dir` first.
fn force_off_road(scene: &SceneSample, traj: &mut [Point], dir: f64) {
    let last = traj.last_mut().expect("non-empty trajectory");
    let row = last[1].floor() as usize;
    let col = last[0].floor() as i64;
    let w = scene.width() as i64;
    for step in 0..w {
        for cand in [col + dir as i64 * step, col - dir as i64 * step] {
            if (0..w).contains(&cand) && !scene.drivable.get(row, cand as usize) {
                last[0] = cand as f64 + 0.5;
                return;
            }
        }
    }
}
