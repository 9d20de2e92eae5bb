//! Point-mass rollout turning an action triplet into waypoints.

use serde::{Deserialize, Serialize};

use super::types::{ActionTriplet, Point};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    /// Speed at full throttle, pixels per step.
    pub max_speed: f64,
    /// Heading change per step at full steering lock, radians.
    pub max_yaw_rate: f64,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self {
            max_speed: 6.0,
            max_yaw_rate: 0.08,
        }
    }
}

impl Kinematics {
    pub fn speed(&self, a: ActionTriplet) -> f64 {
        let a = a.clamped();
        self.max_speed * a.throttle as f64 * (1.0 - a.brake as f64)
    }

    /// Waypoints `1..=horizon` starting from `start` with heading straight up
    /// the image. Positive steering turns towards `+x`.
    pub fn rollout(&self, start: Point, action: ActionTriplet, horizon: usize) -> Vec<Point> {
        let a = action.clamped();
        let v = self.speed(a);
        let yaw = a.steering as f64 * self.max_yaw_rate;
        let (mut x, mut y, mut heading) = (start[0], start[1], 0.0f64);
        (0..horizon)
            .map(|_| {
                heading += yaw;
                x += v * heading.sin();
                y -= v * heading.cos();
                [x, y]
            })
            .collect()
    }

    /// Steering that best tracks `target` laterally for a fixed speed, searched
    /// on a grid restricted to the sign of the target's lateral displacement.
    pub fn fit_steering(&self, start: Point, target: &[Point], throttle: f32) -> f32 {
        let Some(last) = target.last() else { return 0.0 };
        let disp = last[0] - start[0];
        if disp.abs() < 1e-9 {
            return 0.0;
        }
        let sign = disp.signum() as f32;
        let cost = |s: f32| -> f64 {
            let a = ActionTriplet::new(s, throttle, 0.0);
            self.rollout(start, a, target.len())
                .iter()
                .zip(target)
                .map(|(p, q)| (p[0] - q[0]).powi(2))
                .sum()
        };
        let mut best = (f64::INFINITY, 0.0f32);
        for k in 1..=200 {
            let s = sign * k as f32 / 200.0;
            let c = cost(s);
            if c < best.0 {
                best = (c, s);
            }
        }
        best.1
    }
}
