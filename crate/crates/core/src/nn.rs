//! Parameter storage, dense layers and the Adam optimizer.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered set of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant leaf on `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Replaces the values with those of `other`, which must carry the same
    /// names and dims in the same order.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter names do not match the model layout"));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.dims() != b.dims() {
                return Err(Error::shape(
                    "load_params",
                    name.clone(),
                    format!("{:?} vs expected {:?}", b.dims(), a.dims()),
                ));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Glorot/Xavier uniform.
    Glorot,
    Zeros,
    Uniform(f64),
}

pub fn init_tensor<T: Real>(dims: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let bound = match init {
        Init::Zeros => return Tensor::zeros(dims),
        Init::Uniform(a) => a,
        Init::Glorot => {
            let fan_in = if dims.len() > 1 { dims[0] } else { 1 };
            let fan_out = *dims.last().unwrap();
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        }
    };
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Affine layer `x · W + b` over the trailing dimension.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[fan_in, fan_out], init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.w])?;
        g.add(h, p[self.b])
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], Init::Glorot, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i != last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, config: AdamConfig) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update from the adjoints of `bound` and returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<f32>, bound: &Bound, grads: &Gradients<f32>) -> f64 {
        let gs: Vec<Option<&Tensor<f32>>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
        let norm = gs
            .iter()
            .flatten()
            .map(|g| g.sum_sq())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, g) in gs.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.tensors_mut()[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] as f64 * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
        norm
    }
}

/// Multi-head self-attention followed by a feed-forward layer, each wrapped
/// in a residual add and a (non-affine) layer norm.
#[derive(Clone, Debug)]
pub struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff: Mlp,
    heads: usize,
}

impl Block {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible into {heads} heads");
        let lin = |store: &mut ParamStore<T>, n: &str, rng: &mut _| Linear::new(store, &format!("{name}.{n}"), d, d, Init::Glorot, rng);
        Self {
            q: lin(store, "q", rng),
            k: lin(store, "k", rng),
            v: lin(store, "v", rng),
            o: lin(store, "o", rng),
            ff: Mlp::new(store, &format!("{name}.ff"), &[d, 2 * d, d], rng),
            heads,
        }
    }

    /// `x` is `[L, d]`; with `causal`, position `i` attends to `0..=i` only.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let dims = g.dims(x).to_vec();
        let (len, d) = (dims[0], dims[1]);
        let dh = d / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let mask = causal.then(|| {
            let data = (0..len * len)
                .map(|i| if i % len > i / len { T::of(-1e9) } else { T::zero() })
                .collect();
            g.constant(Tensor::new(vec![len, len], data).unwrap())
        });
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let att = self.o.forward(g, p, cat)?;
        let r = g.add(x, att)?;
        let x = g.layer_norm(r);
        let f = self.ff.forward(g, p, x)?;
        let r = g.add(x, f)?;
        Ok(g.layer_norm(r))
    }
}

/// Polyak averaging `target <- (1 - tau) target + tau source`.
pub fn polyak_update(target: &mut ParamStore<f32>, source: &ParamStore<f32>, tau: f64) {
    for (t, s) in target.tensors_mut().iter_mut().zip(source.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = ((1.0 - tau) * *a as f64 + tau * b as f64) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..300 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let sq = g.mul(p[id], p[id]).unwrap();
            let l = g.sum(sq);
            let grads = g.backward(l).unwrap();
            opt.step(&mut store, &p, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn load_checks_layout() {
        let mut r = rng::rng(0);
        let mut a = ParamStore::<f32>::new();
        Linear::new(&mut a, "l", 3, 2, Init::Glorot, &mut r);
        let mut b = ParamStore::<f32>::new();
        Linear::new(&mut b, "l", 3, 4, Init::Glorot, &mut r);
        assert!(a.clone().load_from(&b).is_err());
        let mut c = ParamStore::<f32>::new();
        Linear::new(&mut c, "l", 3, 2, Init::Zeros, &mut r);
        c.load_from(&a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn polyak_moves_fraction() {
        let mut t = ParamStore::<f32>::new();
        t.add("a", Tensor::from_f64(&[1], &[0.0]).unwrap());
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::from_f64(&[1], &[1.0]).unwrap());
        polyak_update(&mut t, &s, 0.25);
        assert_eq!(t.tensors()[0].data(), &[0.25]);
    }
}
