//! Open-loop planning metrics and report plots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, Rect};

/// Mean waypoint distance over the first `k` points, for each `k` in `buckets`.
pub fn l2_metric(pred: &[Point], gt: &[Point], buckets: &[usize]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "l2_metric",
            "pred",
            format!("{} waypoints vs {} in ground truth", pred.len(), gt.len()),
        ));
    }
    let dist: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .collect();
    buckets
        .iter()
        .map(|&k| {
            if k == 0 || k > dist.len() {
                return Err(Error::invalid(format!("horizon bucket {k} outside 1..={}", dist.len())));
            }
            Ok(dist[..k].iter().sum::<f64>() / k as f64)
        })
        .collect()
}

/// Ego footprint `width x height` in pixels, centred on each waypoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub width: f64,
    pub height: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self {
            width: 3.0,
            height: 4.0,
        }
    }
}

/// Whether any waypoint's footprint overlaps any obstacle with positive area.
pub fn trajectory_collides(traj: &[Point], obstacles: &[Rect], fp: Footprint) -> bool {
    let (hw, hh) = (fp.width / 2.0, fp.height / 2.0);
    traj.iter().any(|p| {
        let (x0, x1, y0, y1) = (p[0] - hw, p[0] + hw, p[1] - hh, p[1] + hh);
        obstacles
            .iter()
            .any(|r| x0 < r.x1 as f64 && x1 > r.x0 as f64 && y0 < r.y1 as f64 && y1 > r.y0 as f64)
    })
}

/// Fraction of trajectories colliding with their scene's obstacles.
pub fn collision_rate(trajectories: &[Vec<Point>], obstacles: &[Vec<Rect>], fp: Footprint) -> Result<f64> {
    if !(fp.width > 0.0 && fp.height > 0.0) {
        return Err(Error::invalid("footprint must have positive extent"));
    }
    if trajectories.len() != obstacles.len() {
        return Err(Error::shape(
            "collision_rate",
            "obstacles",
            format!("{} obstacle sets for {} trajectories", obstacles.len(), trajectories.len()),
        ));
    }
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories"));
    }
    let hits = trajectories
        .iter()
        .zip(obstacles)
        .filter(|(t, o)| trajectory_collides(t, o, fp))
        .count();
    Ok(hits as f64 / trajectories.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonL2 {
    pub waypoints: usize,
    pub mean: f64,
}

/// Metrics of one evaluation run plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l2: Vec<HorizonL2>,
    pub collision_rate: f64,
    pub mean_hybrid_reward: f64,
    pub samples: usize,
    pub config_hash: String,
    pub seed: u64,
    pub stages: serde_json::Value,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("report has no samples"));
        }
        if !(0.0..=1.0).contains(&self.collision_rate) {
            return Err(Error::invalid("collision rate outside [0, 1]"));
        }
        if self.l2.iter().any(|h| !(h.mean >= 0.0)) {
            return Err(Error::invalid("negative or NaN L2"));
        }
        Ok(())
    }
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 240.0;
const PAD: f64 = 36.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of one or more named series against their index.
pub fn svg_line_chart(title: &str, series: &[(&str, &[f64])]) -> String {
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| PAD + (SVG_W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| SVG_H - PAD - (SVG_H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    out += &format!("<text x=\"{PAD}\" y=\"16\">{}</text>\n", esc(title));
    out += &format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        SVG_W - 2.0 * PAD,
        SVG_H - 2.0 * PAD
    );
    out += &format!("<text x=\"2\" y=\"{}\">{hi:.3}</text>\n", PAD + 4.0);
    out += &format!("<text x=\"2\" y=\"{}\">{lo:.3}</text>\n", SVG_H - PAD);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        out += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>\n",
            pts.join(" ")
        );
        out += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            SVG_W - PAD - 100.0,
            PAD + 14.0 * (k + 1) as f64,
            esc(name)
        );
    }
    out + "</svg>\n"
}

/// Histogram with `bins` equal-width bins.
pub fn svg_histogram(title: &str, values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let vals: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let mut counts = vec![0usize; bins];
    for v in &vals {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (SVG_W - 2.0 * PAD) / bins as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    out += &format!("<text x=\"{PAD}\" y=\"16\">{}</text>\n", esc(title));
    for (i, &c) in counts.iter().enumerate() {
        let h = (SVG_H - 2.0 * PAD) * c as f64 / top;
        out += &format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>\n",
            PAD + bw * i as f64,
            SVG_H - PAD - h,
            (bw - 1.0).max(0.5),
            COLORS[0]
        );
    }
    out += &format!("<text x=\"{PAD}\" y=\"{}\">{lo:.3}</text>\n", SVG_H - PAD + 14.0);
    out += &format!("<text x=\"{}\" y=\"{}\">{hi:.3}</text>\n", SVG_W - PAD - 30.0, SVG_H - PAD + 14.0);
    out + "</svg>\n"
}
