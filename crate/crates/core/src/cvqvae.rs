//! Conditional vector-quantized autoencoder over segmented scenes.
//!
//! The image and a rasterized trajectory channel are cut into `patch x patch`
//! cells; a shared MLP maps every cell to a latent vector, which is snapped to
//! the nearest codebook entry. A second MLP decodes each quantized cell,
//! again alongside the trajectory raster of that cell, into drivable-area
//! probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Adam, AdamConfig, Bound, Init, Mlp, ParamId, ParamStore};
use crate::rng;
use crate::scene::{Point, SceneSample};
use crate::tensor::{Real, Tensor};

/// Token IDs below this value are reserved for special symbols.
pub const TOKEN_BASE: u32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvqVaeConfig {
    pub patch: usize,
    /// Codebook size K.
    pub codes: usize,
    /// Code dimension.
    pub code_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub commitment_beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Codes unused for this many consecutive steps are re-seeded.
    pub dead_code_steps: usize,
}

impl Default for CvqVaeConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            codes: 32,
            code_dim: 16,
            enc_hidden: 64,
            dec_hidden: 96,
            commitment_beta: 0.25,
            lr: 2e-3,
            steps: 2000,
            batch: 8,
            dead_code_steps: 200,
        }
    }
}

impl CvqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.commitment_beta > 0.0) {
            return Err(Error::invalid("commitment_beta must be > 0"));
        }
        if self.codes == 0 || self.code_dim == 0 || self.patch == 0 || self.batch == 0 {
            return Err(Error::invalid("codes, code_dim, patch and batch must be positive"));
        }
        Ok(())
    }
}

/// Codebook entries plus how often each has been selected.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[K, D]`.
    pub codes: Tensor<f32>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(codes: Tensor<f32>) -> Result<Self> {
        if codes.rank() != 2 {
            return Err(Error::shape("codebook", "codes", format!("{:?} is not [K, D]", codes.dims())));
        }
        if !codes.is_finite() {
            return Err(Error::invalid("codebook holds non-finite values"));
        }
        let k = codes.dims()[0];
        Ok(Self { codes, usage: vec![0; k] })
    }

    pub fn len(&self) -> usize {
        self.codes.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.codes.dims()[1]
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }
}

/// Continuous and quantized latents of one or more grids, flattened to
/// `[cells, D]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub z_e: Tensor<f32>,
    pub z_q: Tensor<f32>,
    pub indices: Vec<usize>,
    /// Squared distance of each cell to its code.
    pub distances: Vec<f64>,
}

/// Squared distance accumulated in 64-bit.
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// Nearest-code indices for each row of `z_e` (`[.., D]`); ties go to the
/// lowest index.
pub fn nearest_codes<T: Real>(z_e: &Tensor<T>, codes: &Tensor<T>) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = codes.dims()[1];
    if z_e.last_dim() != d {
        return Err(Error::shape(
            "quantize",
            "z_e",
            format!("code dim {} does not match codebook dim {d}", z_e.last_dim()),
        ));
    }
    let cells = z_e.rows();
    let mut best = vec![f64::INFINITY; cells];
    let mut idx = vec![0usize; cells];
    for k in 0..codes.dims()[0] {
        let code = codes.row(k);
        for c in 0..cells {
            let dist = sq_dist(z_e.row(c), code);
            if dist < best[c] {
                best[c] = dist;
                idx[c] = k;
            }
        }
    }
    Ok((idx, best))
}

pub fn quantize(z_e: &Tensor<f32>, codebook: &Codebook) -> Result<LatentGrid> {
    let (indices, distances) = nearest_codes(z_e, &codebook.codes)?;
    let mut data = Vec::with_capacity(z_e.len());
    for &i in &indices {
        data.extend_from_slice(codebook.codes.row(i));
    }
    Ok(LatentGrid {
        z_e: z_e.clone(),
        z_q: Tensor::new(z_e.dims().to_vec(), data)?,
        indices,
        distances,
    })
}

/// `exp(entropy)` of the empirical code distribution, in `[1, K]`.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Loss terms on a graph.
#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// Reconstruction BCE summed over pixels, plus the codebook term (adjoint to
/// the codes only) and the weighted commitment term (adjoint to the encoder
/// only).
pub fn vq_loss<T: Real>(
    g: &mut Graph<T>,
    z_e: Var,
    z_q: Var,
    decoded: Var,
    target: Var,
    commitment_beta: f64,
) -> Result<VqLoss> {
    if let Some(v) = g.value(target).data().iter().find(|v| !(v.is_zero() || **v == T::one())) {
        return Err(Error::invalid(format!("segmentation target value {v} is not binary")));
    }
    let recon = g.bce(decoded, target)?;
    let sg_e = g.stop_gradient(z_e);
    let sg_q = g.stop_gradient(z_q);
    let diff_cb = g.sub(z_q, sg_e)?;
    let sq_cb = g.mul(diff_cb, diff_cb)?;
    let codebook = g.sum(sq_cb);
    let diff_cm = g.sub(z_e, sg_q)?;
    let sq_cm = g.mul(diff_cm, diff_cm)?;
    let commit = g.sum(sq_cm);
    let commitment = g.scale(commit, commitment_beta);
    let t = g.add(recon, codebook)?;
    let total = g.add(t, commitment)?;
    Ok(VqLoss {
        total,
        recon,
        codebook,
        commitment,
    })
}

/// Marks the pixels crossed by the polyline through the waypoints.
pub fn rasterize_trajectory(height: usize, width: usize, trajectory: &[Point]) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width];
    let mut mark = |p: Point| {
        let (x, y) = (p[0].floor(), p[1].floor());
        if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height {
            out[y as usize * width + x as usize] = 1.0;
        }
    };
    let Some(&first) = trajectory.first() else {
        return out;
    };
    let mut prev = first;
    mark(prev);
    for &p in &trajectory[1..] {
        let len = (p[0] - prev[0]).hypot(p[1] - prev[1]);
        let steps = (len * 4.0).ceil().max(1.0) as usize;
        for s in 1..=steps {
            let f = s as f64 / steps as f64;
            mark([prev[0] + f * (p[0] - prev[0]), prev[1] + f * (p[1] - prev[1])]);
        }
        prev = p;
    }
    out
}

/// Per-cell inputs for one scene.
#[derive(Clone, Debug)]
pub struct CellInputs {
    /// `[cells, p*p*(C+1)]` image and raster features.
    pub enc: Vec<f32>,
    /// `[cells, p*p]` raster features for the decoder.
    pub cond: Vec<f32>,
    /// `[cells, p*p]` segmentation targets.
    pub target: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Geometry {
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
}

impl Geometry {
    fn cells(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    fn enc_width(&self) -> usize {
        self.patch * self.patch * (self.channels + 1)
    }

    fn pix(&self) -> usize {
        self.patch * self.patch
    }

    /// Flat pixel index of pixel `k` (row-major within the patch) of `cell`.
    fn pixel(&self, cell: usize, k: usize) -> (usize, usize) {
        let (_, gw) = self.grid();
        let (ci, cj) = (cell / gw, cell % gw);
        (ci * self.patch + k / self.patch, cj * self.patch + k % self.patch)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    encoder: Mlp,
    decoder: Mlp,
    codebook: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvqVaeMeta {
    pub config: CvqVaeConfig,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Trained (or freshly initialized) model.
#[derive(Clone, Debug)]
pub struct CvqVae {
    pub config: CvqVaeConfig,
    pub params: ParamStore<f32>,
    /// Selection counts accumulated during training.
    pub usage: Vec<u64>,
    geo: Geometry,
    layers: Layers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Reconstruction BCE per pixel.
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub perplexity: f64,
    pub reseeded: usize,
}

/// Forward results for a batch.
pub struct BatchForward {
    pub loss: VqLoss,
    pub z_e: Var,
    pub indices: Vec<usize>,
    pub probs: Var,
}

impl CvqVae {
    pub const KIND: &'static str = "cvqvae";

    pub fn new(config: CvqVaeConfig, height: usize, width: usize, channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if !height.is_multiple_of(config.patch) || !width.is_multiple_of(config.patch) {
            return Err(Error::invalid(format!(
                "image {height}x{width} is not divisible by patch {}",
                config.patch
            )));
        }
        let geo = Geometry {
            height,
            width,
            channels,
            patch: config.patch,
        };
        let mut r = rng::rng(seed);
        let mut params = ParamStore::new();
        let encoder = Mlp::new(
            &mut params,
            "enc",
            &[geo.enc_width(), config.enc_hidden, config.enc_hidden, config.code_dim],
            &mut r,
        );
        let decoder = Mlp::new(
            &mut params,
            "dec",
            &[config.code_dim + geo.pix(), config.dec_hidden, geo.pix()],
            &mut r,
        );
        let bound = 1.0 / config.codes as f64;
        let codebook = params.add(
            "codebook",
            init_tensor(&[config.codes, config.code_dim], Init::Uniform(bound), &mut r),
        );
        Ok(Self {
            usage: vec![0; config.codes],
            config,
            params,
            geo,
            layers: Layers {
                encoder,
                decoder,
                codebook,
            },
        })
    }

    pub fn meta(&self) -> CvqVaeMeta {
        CvqVaeMeta {
            config: self.config.clone(),
            height: self.geo.height,
            width: self.geo.width,
            channels: self.geo.channels,
        }
    }

    pub fn from_parts(meta: CvqVaeMeta, params: ParamStore<f32>) -> Result<Self> {
        let mut model = Self::new(meta.config, meta.height, meta.width, meta.channels, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.geo.grid()
    }

    pub fn cells(&self) -> usize {
        self.geo.cells()
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            codes: self.params.get(self.layers.codebook).clone(),
            usage: self.usage.clone(),
        }
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layers.codebook
    }

    fn check_inputs(&self, image: &Tensor<f32>, trajectory: &[Point]) -> Result<()> {
        let g = self.geo;
        if image.dims() != [g.height, g.width, g.channels] {
            return Err(Error::shape(
                "encode",
                "image",
                format!("{:?} vs expected [{}, {}, {}]", image.dims(), g.height, g.width, g.channels),
            ));
        }
        if trajectory.is_empty() {
            return Err(Error::shape("encode", "trajectory", "no waypoints"));
        }
        Ok(())
    }

    /// Cell features of an image/trajectory pair. `target` may be omitted
    /// (zeros) at inference.
    pub fn cell_inputs(&self, image: &Tensor<f32>, trajectory: &[Point], target: Option<&Tensor<f32>>) -> Result<CellInputs> {
        self.check_inputs(image, trajectory)?;
        let g = self.geo;
        let raster = rasterize_trajectory(g.height, g.width, trajectory);
        let cells = g.cells();
        let mut enc = Vec::with_capacity(cells * g.enc_width());
        let mut cond = Vec::with_capacity(cells * g.pix());
        let mut tgt = Vec::with_capacity(cells * g.pix());
        for c in 0..cells {
            for k in 0..g.pix() {
                let (y, x) = g.pixel(c, k);
                for ch in 0..g.channels {
                    enc.push(image.data()[(y * g.width + x) * g.channels + ch]);
                }
            }
            for k in 0..g.pix() {
                let (y, x) = g.pixel(c, k);
                let v = raster[y * g.width + x];
                enc.push(v);
                cond.push(v);
                tgt.push(target.map_or(0.0, |t| t.data()[y * g.width + x]));
            }
        }
        Ok(CellInputs { enc, cond, target: tgt })
    }

    pub fn scene_inputs(&self, scene: &SceneSample) -> Result<CellInputs> {
        self.cell_inputs(&scene.image, &scene.trajectory, Some(&scene.seg_target().to_tensor()))
    }

    fn stack<T: Real>(&self, batch: &[&CellInputs], pick: impl Fn(&CellInputs) -> &[f32], width: usize) -> Tensor<T> {
        let rows = batch.len() * self.geo.cells();
        let data = batch.iter().flat_map(|b| pick(b).iter().map(|&v| T::of(v as f64))).collect();
        Tensor::new(vec![rows, width], data).unwrap()
    }

    /// Encoder output for stacked cells.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &[&CellInputs]) -> Result<Var> {
        let x = self.stack(batch, |b| &b.enc, self.geo.enc_width());
        let x = g.constant(x);
        self.layers.encoder.forward(g, p, x)
    }

    /// Decoder probabilities `[cells, p*p]` for quantized latents `z` (which
    /// may be a straight-through node).
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: Var, batch: &[&CellInputs]) -> Result<Var> {
        let cond = self.stack(batch, |b| &b.cond, self.geo.pix());
        let cond = g.constant(cond);
        let x = g.concat(&[z, cond], 1)?;
        let logits = self.layers.decoder.forward(g, p, x)?;
        Ok(g.sigmoid(logits))
    }

    /// Full forward pass and loss; losses are averaged over the batch.
    pub fn forward_batch<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &[&CellInputs]) -> Result<BatchForward> {
        let z_e = self.encode_graph(g, p, batch)?;
        let codes = p[self.layers.codebook];
        let (indices, _) = nearest_codes(g.value(z_e), g.value(codes))?;
        let z_q = g.gather_rows(codes, &indices)?;
        let z_st = g.straight_through(z_e, z_q)?;
        let probs = self.decode_graph(g, p, z_st, batch)?;
        let target = self.stack(batch, |b| &b.target, self.geo.pix());
        let target = g.constant(target);
        let loss = vq_loss(g, z_e, z_q, probs, target, self.config.commitment_beta)?;
        let inv_b = 1.0 / batch.len() as f64;
        let loss = VqLoss {
            total: g.scale(loss.total, inv_b),
            recon: g.scale(loss.recon, inv_b),
            codebook: g.scale(loss.codebook, inv_b),
            commitment: g.scale(loss.commitment, inv_b),
        };
        Ok(BatchForward {
            loss,
            z_e,
            indices,
            probs,
        })
    }

    /// `z_e` as an `[h, w, D]` grid.
    pub fn encode(&self, image: &Tensor<f32>, trajectory: &[Point]) -> Result<Tensor<f32>> {
        let inputs = self.cell_inputs(image, trajectory, None)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let z = self.encode_graph(&mut g, &p, &[&inputs])?;
        let (h, w) = self.grid();
        g.value(z).clone().reshaped(&[h, w, self.config.code_dim])
    }

    pub fn encode_scene(&self, scene: &SceneSample) -> Result<Tensor<f32>> {
        let inputs = self.cell_inputs(&scene.image, &scene.trajectory, None)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let z = self.encode_graph(&mut g, &p, &[&inputs])?;
        let (h, w) = self.grid();
        g.value(z).clone().reshaped(&[h, w, self.config.code_dim])
    }

    /// Codebook indices of a scene, row-major over the latent grid.
    pub fn scene_indices(&self, scene: &SceneSample) -> Result<Vec<usize>> {
        let z = self.encode_scene(scene)?;
        Ok(quantize(&z, &self.codebook())?.indices)
    }

    /// Flattened token IDs (`index + TOKEN_BASE`) of a scene.
    pub fn tokens_for_scene(&self, scene: &SceneSample) -> Result<Vec<u32>> {
        Ok(self
            .scene_indices(scene)?
            .into_iter()
            .map(|i| i as u32 + TOKEN_BASE)
            .collect())
    }

    /// Drivable-area probabilities `[H, W]` decoded from token IDs.
    pub fn decode_tokens(&self, tokens: &[u32], trajectory: &[Point]) -> Result<Tensor<f32>> {
        let k = self.config.codes as u32;
        if tokens.len() != self.cells() {
            return Err(Error::shape("decode", "tokens", format!("{} tokens for {} cells", tokens.len(), self.cells())));
        }
        let idx = tokens
            .iter()
            .map(|&t| {
                if t < TOKEN_BASE || t >= TOKEN_BASE + k {
                    Err(Error::invalid(format!("token {t} outside [{TOKEN_BASE}, {})", TOKEN_BASE + k)))
                } else {
                    Ok((t - TOKEN_BASE) as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let geo = self.geo;
        let raster = rasterize_trajectory(geo.height, geo.width, trajectory);
        let cond = (0..geo.cells())
            .flat_map(|c| (0..geo.pix()).map(move |k| geo.pixel(c, k)))
            .map(|(y, x)| raster[y * geo.width + x])
            .collect();
        let inputs = CellInputs {
            enc: Vec::new(),
            cond,
            target: Vec::new(),
        };
        let mut g = Graph::<f32>::new();
        let p = self.params.bind_frozen(&mut g);
        let z = g.gather_rows(p[self.layers.codebook], &idx)?;
        let probs = self.decode_graph(&mut g, &p, z, &[&inputs])?;
        Ok(self.assemble(g.value(probs)))
    }

    /// Reassembles `[cells, p*p]` back into an `[H, W]` image.
    pub fn assemble(&self, cells: &Tensor<f32>) -> Tensor<f32> {
        let geo = self.geo;
        let mut out = vec![0.0f32; geo.height * geo.width];
        for c in 0..geo.cells() {
            for k in 0..geo.pix() {
                let (y, x) = geo.pixel(c, k);
                out[y * geo.width + x] = cells.data()[c * geo.pix() + k];
            }
        }
        Tensor::new(vec![geo.height, geo.width], out).unwrap()
    }

    /// Mean reconstruction BCE per pixel and dataset perplexity.
    pub fn evaluate(&self, scenes: &[SceneSample]) -> Result<(f64, f64)> {
        let mut bce = 0.0;
        let mut counts = vec![0u64; self.config.codes];
        for scene in scenes {
            let inputs = self.scene_inputs(scene)?;
            let mut g = Graph::<f32>::new();
            let p = self.params.bind_frozen(&mut g);
            let fwd = self.forward_batch(&mut g, &p, &[&inputs])?;
            bce += g.value(fwd.loss.recon).item() as f64;
            for &i in &fwd.indices {
                counts[i] += 1;
            }
        }
        let pixels = (self.geo.height * self.geo.width * scenes.len()) as f64;
        Ok((bce / pixels, perplexity(&counts)))
    }
}

/// Trains a model on `scenes`.
pub fn train(
    scenes: &[SceneSample],
    config: &CvqVaeConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<(CvqVae, Vec<StepMetrics>)> {
    let first = scenes.first().ok_or_else(|| Error::invalid("no scenes to train on"))?;
    let dims = first.image.dims();
    let mut model = CvqVae::new(config.clone(), dims[0], dims[1], dims[2], rng::derive_seed(seed, 0))?;
    let inputs = scenes.iter().map(|s| model.scene_inputs(s)).collect::<Result<Vec<_>>>()?;
    let mut r = rng::rng(rng::derive_seed(seed, 1));
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut last_used = vec![0usize; config.codes];
    let mut log = Vec::with_capacity(config.steps);
    let pixels = (model.geo.height * model.geo.width) as f64;

    for step in 0..config.steps {
        let batch: Vec<&CellInputs> = (0..config.batch).map(|_| &inputs[r.random_range(0..inputs.len())]).collect();
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g);
        let fwd = model.forward_batch(&mut g, &p, &batch)?;
        let total = g.value(fwd.loss.total).item();
        if !total.is_finite() {
            return Err(Error::Divergence { stage: "cvqvae", step });
        }
        let grads = g.backward(fwd.loss.total)?;
        opt.step(&mut model.params, &p, &grads);

        let mut counts = vec![0u64; config.codes];
        for &i in &fwd.indices {
            counts[i] += 1;
            last_used[i] = step;
        }
        for (u, c) in model.usage.iter_mut().zip(&counts) {
            *u += c;
        }

        let mut reseeded = 0;
        let ze = g.value(fwd.z_e);
        for k in 0..config.codes {
            if step - last_used[k] >= config.dead_code_steps {
                let cell = r.random_range(0..ze.rows());
                let src = ze.row(cell).to_vec();
                let codes = model.params.get_mut(model.layers.codebook);
                let d = config.code_dim;
                codes.data_mut()[k * d..(k + 1) * d].copy_from_slice(&src);
                last_used[k] = step;
                reseeded += 1;
            }
        }

        let m = StepMetrics {
            step,
            recon: g.value(fwd.loss.recon).item() as f64 / pixels,
            codebook: g.value(fwd.loss.codebook).item() as f64,
            commitment: g.value(fwd.loss.commitment).item() as f64,
            perplexity: perplexity(&counts),
            reseeded,
        };
        on_step(&m);
        log.push(m);
    }
    if !model.params.is_finite() {
        return Err(Error::Divergence {
            stage: "cvqvae",
            step: config.steps,
        });
    }
    Ok((model, log))
}
