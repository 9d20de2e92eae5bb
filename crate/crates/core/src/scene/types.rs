use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel coordinates `[x, y]`, origin at the top-left corner, `x` to the
/// right and `y` down. Pixel `(row, col)` covers `[col, col+1) x [row, row+1)`.
pub type Point = [f64; 2];

/// Binary `H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.cells[y * width + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[y * self.width + x] = v;
    }

    /// Cell at signed coordinates; out of bounds reads as `false`.
    pub fn get_signed(&self, y: i64, x: i64) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.get(y as usize, x as usize)
    }

    pub fn row(&self, y: usize) -> &[bool] {
        &self.cells[y * self.width..(y + 1) * self.width]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Number of cells set in both masks.
    pub fn overlap(&self, other: &Mask) -> usize {
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).unwrap()
    }

    /// Reads an `[H, W]` tensor whose values are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[height, width] = t.dims() else {
            return Err(Error::shape("mask", "tensor", format!("{:?} is not [H, W]", t.dims())));
        };
        let mut cells = Vec::with_capacity(t.len());
        for &v in t.data() {
            match v {
                0.0 => cells.push(false),
                1.0 => cells.push(true),
                _ => return Err(Error::invalid(format!("mask value {v} is not binary"))),
            }
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }
}

/// Axis-aligned pixel rectangle covering columns `x0..x1` and rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl From<[i64; 4]> for Rect {
    fn from([x0, y0, x1, y1]: [i64; 4]) -> Self {
        Rect { x0, y0, x1, y1 }
    }
}

impl From<Rect> for [i64; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

impl Rect {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 as f64 && p[0] < self.x1 as f64 && p[1] >= self.y0 as f64 && p[1] < self.y1 as f64
    }

    /// Euclidean distance from `p` to the rectangle; zero inside.
    pub fn distance(&self, p: Point) -> f64 {
        let dx = (self.x0 as f64 - p[0]).max(p[0] - self.x1 as f64).max(0.0);
        let dy = (self.y0 as f64 - p[1]).max(p[1] - self.y1 as f64).max(0.0);
        dx.hypot(dy)
    }

    pub fn translated(&self, dy: i64) -> Rect {
        Rect {
            y0: self.y0 + dy,
            y1: self.y1 + dy,
            ..*self
        }
    }

    pub fn clipped(&self, height: usize, width: usize) -> Rect {
        Rect {
            x0: self.x0.clamp(0, width as i64),
            x1: self.x1.clamp(0, width as i64),
            y0: self.y0.clamp(0, height as i64),
            y1: self.y1.clamp(0, height as i64),
        }
    }
}

/// `[steering, throttle, brake]` in `[-1, 1] x [0, 1] x [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f32; 3]", into = "[f32; 3]")]
pub struct ActionTriplet {
    pub steering: f32,
    pub throttle: f32,
    pub brake: f32,
}

impl From<[f32; 3]> for ActionTriplet {
    fn from([steering, throttle, brake]: [f32; 3]) -> Self {
        Self {
            steering,
            throttle,
            brake,
        }
    }
}

impl From<ActionTriplet> for [f32; 3] {
    fn from(a: ActionTriplet) -> Self {
        a.to_array()
    }
}

impl ActionTriplet {
    pub const LOW: [f64; 3] = [-1.0, 0.0, 0.0];
    pub const HIGH: [f64; 3] = [1.0, 1.0, 1.0];

    pub fn new(steering: f32, throttle: f32, brake: f32) -> Self {
        Self {
            steering,
            throttle,
            brake,
        }
    }

    pub fn to_array(self) -> [f32; 3] {
        [self.steering, self.throttle, self.brake]
    }

    /// Projects each component into its range.
    pub fn clamped(self) -> Self {
        Self {
            steering: self.steering.clamp(-1.0, 1.0),
            throttle: self.throttle.clamp(0.0, 1.0),
            brake: self.brake.clamp(0.0, 1.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        (-1.0..=1.0).contains(&self.steering)
            && (0.0..=1.0).contains(&self.throttle)
            && (0.0..=1.0).contains(&self.brake)
    }

    pub fn from_f64(v: &[f64]) -> Self {
        Self::new(v[0] as f32, v[1] as f32, v[2] as f32)
    }
}

/// One-hot navigation command `(left, straight, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 3]", into = "[u8; 3]")]
pub enum NavCommand {
    Left,
    Straight,
    Right,
}

impl NavCommand {
    pub const ALL: [NavCommand; 3] = [NavCommand::Left, NavCommand::Straight, NavCommand::Right];

    pub fn index(self) -> usize {
        match self {
            NavCommand::Left => 0,
            NavCommand::Straight => 1,
            NavCommand::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [u8; 3] {
        let mut v = [0; 3];
        v[self.index()] = 1;
        v
    }

    pub fn one_hot_f64(self) -> [f64; 3] {
        self.one_hot().map(f64::from)
    }

    pub fn from_one_hot(flags: [u8; 3]) -> Result<Self> {
        match flags {
            [1, 0, 0] => Ok(NavCommand::Left),
            [0, 1, 0] => Ok(NavCommand::Straight),
            [0, 0, 1] => Ok(NavCommand::Right),
            other => Err(Error::invalid(format!("navigation flags {other:?} are not one-hot"))),
        }
    }
}

impl TryFrom<[u8; 3]> for NavCommand {
    type Error = Error;
    fn try_from(v: [u8; 3]) -> Result<Self> {
        Self::from_one_hot(v)
    }
}

impl From<NavCommand> for [u8; 3] {
    fn from(n: NavCommand) -> Self {
        n.one_hot()
    }
}

/// One synthetic frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// Drivable area; also the segmentation target.
    pub drivable: Mask,
    pub obstacle_mask: Mask,
    /// Obstacle boxes, clipped to the frame; their union is `obstacle_mask`.
    pub obstacles: Vec<Rect>,
    /// `[H, W, C]` render of the masks plus noise.
    pub image: Tensor<f32>,
    pub trajectory: Vec<Point>,
    pub action: ActionTriplet,
    pub nav: NavCommand,
    /// Pixels per trajectory step.
    pub ego_speed: f64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.drivable.height()
    }

    pub fn width(&self) -> usize {
        self.drivable.width()
    }

    /// Segmentation ground truth (the drivable area).
    pub fn seg_target(&self) -> &Mask {
        &self.drivable
    }

    /// Ego position before the first waypoint: bottom row, at the mean of the
    /// drivable columns of that row.
    pub fn ego_start(&self) -> Point {
        ego_start(&self.drivable)
    }

    /// Checks the structural invariants of a generated frame.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.obstacle_mask.height() != h || self.obstacle_mask.width() != w {
            return Err(Error::invalid("obstacle mask dims differ from drivable mask"));
        }
        if self.image.dims().len() != 3 || self.image.dims()[..2] != [h, w] {
            return Err(Error::invalid(format!("image dims {:?} are not [H, W, C]", self.image.dims())));
        }
        if self.drivable.overlap(&self.obstacle_mask) != 0 {
            return Err(Error::invalid("drivable and obstacle masks overlap"));
        }
        if self.trajectory.is_empty() {
            return Err(Error::invalid("empty trajectory"));
        }
        for p in &self.trajectory {
            if !(p[0] >= 0.0 && p[0] < w as f64 && p[1] >= 0.0 && p[1] < h as f64) {
                return Err(Error::invalid(format!("trajectory point {p:?} outside the frame")));
            }
        }
        if !self.action.is_valid() {
            return Err(Error::invalid(format!("action {:?} out of range", self.action)));
        }
        Ok(())
    }
}

pub fn ego_start(drivable: &Mask) -> Point {
    let y = drivable.height() - 1;
    let cols: Vec<usize> = (0..drivable.width()).filter(|&x| drivable.get(y, x)).collect();
    let x = if cols.is_empty() {
        drivable.width() as f64 / 2.0
    } else {
        cols.iter().sum::<usize>() as f64 / cols.len() as f64
    };
    [x, drivable.height() as f64 - 0.5]
}
