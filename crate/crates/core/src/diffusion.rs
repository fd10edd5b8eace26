//! Pixel-space conditional DDPM: variance schedule, forward noising, a small
//! U-Net noise predictor with feature-wise affine conditioning, training, and
//! ancestral sampling.
//!
//! Sampling draw order, per image, from a `ChaCha8Rng` seeded with the image's
//! seed: first one `C·H·W` block of standard normals (CHW order) for the
//! starting point, then one such block per reverse step from the highest `t`
//! down to `t = 1`. The block drawn at `t = 1` is multiplied by a zero
//! posterior standard deviation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::inversion::PromptEmbedding;
use crate::nn::{Adam, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    n_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// `β_t` for `t ∈ 1..=n_steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for `t ∈ 0..=n_steps`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior standard deviation of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        let b = self.beta(t);
        (b * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])).sqrt()
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        NoiseSchedule {
            n_steps: betas.len(),
            betas,
            alpha_bars,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_steps": self.n_steps,
            "betas_bits": self.betas.iter().map(|b| b.to_bits()).collect::<Vec<_>>(),
        })
    }

    fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bits: Vec<u64> = serde_json::from_value(v["betas_bits"].clone())?;
        Ok(Self::from_betas(bits.into_iter().map(f64::from_bits).collect()))
    }
}

/// Linear betas from `beta_min` to `beta_max` over `n_steps` steps.
pub fn make_schedule(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let betas = (0..n_steps)
        .map(|s| {
            if n_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * s as f64 / (n_steps - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(betas))
}

/// The 1000-step `1e-4..0.02` linear schedule rescaled to `n_steps`.
pub fn scaled_linear_schedule(n_steps: usize) -> Result<NoiseSchedule> {
    let scale = 1000.0 / n_steps.max(1) as f64;
    make_schedule(n_steps, 1e-4 * scale, (0.02 * scale).min(0.999))
}

fn noise_coeffs(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    if t > sched.n_steps {
        return Err(Error::Argument(format!(
            "t = {t} outside 0..={}",
            sched.n_steps
        )));
    }
    let ab = sched.alpha_bar(t);
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

fn mix(x0: &[f64], eps: &[f64], a: f64, b: f64) -> Vec<f64> {
    if b == 0.0 {
        return x0.to_vec();
    }
    if a == 0.0 {
        return eps.to_vec();
    }
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| a * x + b * e)
        .collect()
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    if !x0.same_shape(eps) {
        return Err(Error::Argument("noise shape differs from image shape".into()));
    }
    let (a, b) = noise_coeffs(t, sched)?;
    Ok(ImageTensor::new(
        x0.height(),
        x0.width(),
        x0.channels(),
        mix(x0.data(), eps.data(), a, b),
    ))
}

/// `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    if t == 0 {
        return Err(Error::Argument("predict_x0 needs t >= 1".into()));
    }
    if !x_t.same_shape(eps_hat) {
        return Err(Error::Argument("noise shape differs from image shape".into()));
    }
    let (a, b) = noise_coeffs(t, sched)?;
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - b * e) / a)
        .collect();
    Ok(ImageTensor::new(x_t.height(), x_t.width(), x_t.channels(), data))
}

/// A noise predictor `ε̂(x_t, t, cond)` over NCHW batches.
pub trait Denoiser {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// `(channels, height, width)` of the images the model works on.
    fn image_shape(&self) -> (usize, usize, usize);
    fn cond_dim(&self) -> usize;
    /// `x` is `[n, c, h, w]`, `cond` is `[n, cond_dim]`.
    fn predict_eps(&self, g: &mut Graph, x: Var, t: &[usize], cond: Var) -> Var;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            resolution: 32,
            base_channels: 16,
            cond_dim: 16,
            time_dim: 32,
            emb_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    film_scale: Linear,
    film_shift: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, emb: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1),
            film_scale: Linear::zero_init(ps, &format!("{name}.film_scale"), emb, cout),
            film_shift: Linear::zero_init(ps, &format!("{name}.film_shift"), emb, cout),
            conv2: Conv2d::with_gain(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, 0.3),
            skip: (cin != cout).then(|| Conv2d::new(ps, rng, &format!("{name}.skip"), cin, cout, 1, 1, 0)),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, emb: Var) -> Var {
        let h = g.silu(x);
        let h = self.conv1.forward(g, ps, h);
        let scale = self.film_scale.forward(g, ps, emb);
        let shift = self.film_shift.forward(g, ps, emb);
        let h = g.modulate(h, scale, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, ps, x),
            None => x,
        };
        g.add(s, h)
    }
}

/// Small U-Net: two downsampling stages, a middle block and two upsampling
/// stages with skip connections; every residual block is modulated by an
/// embedding of the timestep and the pooled prompt.
#[derive(Clone, Debug)]
pub struct UNetDenoiser {
    config: DenoiserConfig,
    store: ParamStore,
    t_proj: Linear,
    c_proj: Linear,
    emb2: Linear,
    conv_in: Conv2d,
    down0: ResBlock,
    ds1: Conv2d,
    down1: ResBlock,
    ds2: Conv2d,
    mid: ResBlock,
    global_ctx: Linear,
    up1: ResBlock,
    up0: ResBlock,
    conv_out: Conv2d,
}

impl UNetDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = config.base_channels;
        let e = config.emb_dim;
        let r = &mut rng;
        let t_proj = Linear::new(&mut ps, r, "emb.time", config.time_dim, e);
        let c_proj = Linear::new(&mut ps, r, "emb.cond", config.cond_dim, e);
        let emb2 = Linear::new(&mut ps, r, "emb.out", e, e);
        let conv_in = Conv2d::new(&mut ps, r, "conv_in", 3, c, 3, 1, 1);
        let down0 = ResBlock::new(&mut ps, r, "down0", c, c, e);
        let ds1 = Conv2d::new(&mut ps, r, "ds1", c, 2 * c, 3, 2, 1);
        let down1 = ResBlock::new(&mut ps, r, "down1", 2 * c, 2 * c, e);
        let ds2 = Conv2d::new(&mut ps, r, "ds2", 2 * c, 2 * c, 3, 2, 1);
        let mid = ResBlock::new(&mut ps, r, "mid", 2 * c, 2 * c, e);
        let global_ctx = Linear::zero_init(&mut ps, "global_ctx", 2 * c, e);
        let up1 = ResBlock::new(&mut ps, r, "up1", 4 * c, 2 * c, e);
        let up0 = ResBlock::new(&mut ps, r, "up0", 3 * c, c, e);
        let conv_out = Conv2d::with_gain(&mut ps, r, "conv_out", c, 3, 3, 1, 1, 0.1);
        UNetDenoiser {
            config,
            store: ps,
            t_proj,
            c_proj,
            emb2,
            conv_in,
            down0,
            ds1,
            down1,
            ds2,
            mid,
            global_ctx,
            up1,
            up0,
            conv_out,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn freeze(&mut self) {
        self.store.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn param_hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn save(&self, path: &Path, sched: &NoiseSchedule) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "denoiser",
            "config": self.config,
            "schedule": sched.to_json(),
        });
        checkpoint::save(path, &self.store, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, NoiseSchedule)> {
        let (store, meta) = checkpoint::load(path)?;
        if meta["kind"] != "denoiser" {
            return Err(Error::Format(format!("{} is not a denoiser checkpoint", path.display())));
        }
        let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())?;
        let sched = NoiseSchedule::from_json(&meta["schedule"])?;
        let mut model = UNetDenoiser::new(config, 0);
        model.store.load_from(&store)?;
        Ok((model, sched))
    }
}

pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            out[i * dim + j] = arg.sin() as f32;
            out[i * dim + half + j] = arg.cos() as f32;
        }
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

impl Denoiser for UNetDenoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.config.resolution, self.config.resolution)
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn predict_eps(&self, g: &mut Graph, x: Var, t: &[usize], cond: Var) -> Var {
        let ps = &self.store;
        let temb = g.constant(timestep_embedding(t, self.config.time_dim));
        let te = self.t_proj.forward(g, ps, temb);
        let ce = self.c_proj.forward(g, ps, cond);
        let e = g.add(te, ce);
        let e = g.silu(e);
        let e = self.emb2.forward(g, ps, e);
        let emb = g.silu(e);

        let h = self.conv_in.forward(g, ps, x);
        let h0 = self.down0.forward(g, ps, h, emb);
        let h = self.ds1.forward(g, ps, h0);
        let h1 = self.down1.forward(g, ps, h, emb);
        let h = self.ds2.forward(g, ps, h1);
        let h = self.mid.forward(g, ps, h, emb);
        // The up path sees a pooled summary of the whole image, which the
        // convolutions alone cannot reach; global colour depends on it.
        let pooled = g.global_avg_pool(h);
        let ctx = self.global_ctx.forward(g, ps, pooled);
        let e_up = g.add(e, ctx);
        let emb_up = g.silu(e_up);
        let h = g.upsample2x(h);
        let h = g.concat(h, h1);
        let h = self.up1.forward(g, ps, h, emb_up);
        let h = g.upsample2x(h);
        let h = g.concat(h, h0);
        let h = self.up0.forward(g, ps, h, emb_up);
        let h = g.silu(h);
        self.conv_out.forward(g, ps, h)
    }
}

/// One training example: an image and the prompt that describes it.
#[derive(Clone, Debug)]
pub struct CaptionedImage {
    pub image: ImageTensor,
    pub cond: PromptEmbedding,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainDenoiserOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Weight EMA decay; the returned model holds the averaged weights.
    /// `0.0` keeps the raw weights.
    pub ema_decay: f32,
}

/// Noised batch for one ε-prediction step.
pub(crate) struct NoisedBatch {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
}

pub(crate) fn noised_batch<R: Rng>(images: &[&ImageTensor], sched: &NoiseSchedule, rng: &mut R) -> NoisedBatch {
    noised_batch_with(images, sched, rng, |rng: &mut R| rng.random_range(1..=sched.n_steps()))
}

/// Like `noised_batch` but with the timesteps given.
pub(crate) fn noised_batch_at<R: Rng>(images: &[&ImageTensor], t: &[usize], sched: &NoiseSchedule, rng: &mut R) -> NoisedBatch {
    let mut it = t.iter().copied();
    noised_batch_with(images, sched, rng, |_: &mut R| it.next().expect("one timestep per image"))
}

fn noised_batch_with<R: Rng>(
    images: &[&ImageTensor],
    sched: &NoiseSchedule,
    rng: &mut R,
    mut draw_t: impl FnMut(&mut R) -> usize,
) -> NoisedBatch {
    let x0 = ImageTensor::batch_to_chw(&images.iter().map(|&i| i.clone()).collect::<Vec<_>>());
    let per = x0.len() / images.len();
    let mut x_t = Vec::with_capacity(x0.len());
    let mut eps_all = Vec::with_capacity(x0.len());
    let mut ts = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let t = draw_t(rng);
        let eps: Vec<f32> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
        let (a, b) = noise_coeffs(t, sched).expect("t in range");
        let x = &x0.data()[i * per..(i + 1) * per];
        x_t.extend(x.iter().zip(&eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32));
        eps_all.extend(eps);
        ts.push(t);
    }
    NoisedBatch {
        x_t: Tensor::from_vec(x0.shape(), x_t),
        eps: Tensor::from_vec(x0.shape(), eps_all),
        t: ts,
    }
}

/// ε-prediction MSE training with uniform `t ∈ [1, n_steps]`, Adam with a short
/// linear warmup and cosine decay. Returns the per-step loss trajectory.
pub fn train_denoiser<D: Denoiser>(
    model: &mut D,
    data: &[CaptionedImage],
    sched: &NoiseSchedule,
    opts: &TrainDenoiserOptions,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Argument("denoiser training data is empty".into()));
    }
    if model.params().is_frozen() {
        return Err(Error::Contract("cannot train a frozen denoiser".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(model.params(), 0.9, 0.999);
    let mut losses = Vec::with_capacity(opts.steps);
    let warmup = (opts.steps / 20).max(1);
    if !(0.0..1.0).contains(&opts.ema_decay) {
        return Err(Error::Argument(format!("ema_decay {} outside [0, 1)", opts.ema_decay)));
    }
    let mut ema: Vec<Tensor> = model.params().tensors().to_vec();
    for step in 0..opts.steps {
        let idx: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..data.len())).collect();
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &data[i].image).collect();
        let batch = noised_batch(&imgs, sched, &mut rng);
        let cond: Vec<f32> = idx.iter().flat_map(|&i| data[i].cond.pooled()).collect();
        let mut g = Graph::new();
        let x = g.constant(batch.x_t);
        let c = g.constant(Tensor::from_vec(&[idx.len(), model.cond_dim()], cond));
        let pred = model.predict_eps(&mut g, x, &batch.t, c);
        let target = g.constant(batch.eps);
        let loss = g.mse(pred, target);
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("denoiser loss diverged at step {step}")));
        }
        losses.push(lv);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads, model.params());
        let ramp = ((step + 1) as f32 / warmup as f32).min(1.0);
        let decay = 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / opts.steps as f32).cos());
        let lr = opts.lr * ramp * decay;
        opt.step(model.params_mut(), &pg, lr);
        let d = opts.ema_decay.min((1 + step) as f32 / (10 + step) as f32);
        for (a, p) in ema.iter_mut().zip(model.params().tensors()) {
            for (av, &pv) in a.data_mut().iter_mut().zip(p.data()) {
                *av = d * *av + (1.0 - d) * pv;
            }
        }
        if step % 200 == 0 {
            log::debug!("denoiser step {step}: loss {lv:.4}");
        }
    }
    if opts.ema_decay > 0.0 {
        let store = model.params_mut();
        for (i, a) in ema.into_iter().enumerate() {
            *store.get_mut(ParamId(i)) = a;
        }
    }
    Ok(losses)
}

/// One reverse-diffusion chain in flight.
pub struct Chain {
    x: Vec<f32>,
    t: usize,
    cond: Vec<f32>,
    rng: ChaCha8Rng,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl Chain {
    /// A chain that starts from pure noise at `t = n_steps`.
    pub fn from_noise(numel: usize, cond: &PromptEmbedding, seed: u64, sched: &NoiseSchedule) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normals(&mut rng, numel);
        Chain {
            x,
            t: sched.n_steps(),
            cond: cond.pooled(),
            rng,
        }
    }

    /// A chain that resumes from `x_start` at `start_t`, continuing the given generator.
    pub fn from_state(x_start: Tensor, start_t: usize, cond: &PromptEmbedding, rng: ChaCha8Rng) -> Self {
        Chain {
            x: x_start.into_data(),
            t: start_t,
            cond: cond.pooled(),
            rng,
        }
    }
}

/// Runs all chains down to `t = 0`, batching chains that share a timestep.
/// Results are clamped to [-1, 1].
pub fn run_chains<D: Denoiser>(
    model: &D,
    sched: &NoiseSchedule,
    mut chains: Vec<Chain>,
    max_batch: usize,
) -> Vec<ImageTensor> {
    let (c, h, w) = model.image_shape();
    let numel = c * h * w;
    let max_batch = max_batch.max(1);
    while let Some(t) = chains.iter().map(|ch| ch.t).max().filter(|&t| t > 0) {
        let active: Vec<usize> = (0..chains.len()).filter(|&i| chains[i].t == t).collect();
        for group in active.chunks(max_batch) {
            let n = group.len();
            let mut g = Graph::new();
            let xs: Vec<f32> = group.iter().flat_map(|&i| chains[i].x.iter().copied()).collect();
            let conds: Vec<f32> = group.iter().flat_map(|&i| chains[i].cond.iter().copied()).collect();
            let x = g.constant(Tensor::from_vec(&[n, c, h, w], xs));
            let cond = g.constant(Tensor::from_vec(&[n, model.cond_dim()], conds));
            let eps = model.predict_eps(&mut g, x, &vec![t; n], cond);
            let eps = g.take_value(eps);
            let beta = sched.beta(t);
            let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
            let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
            let sigma = sched.posterior_std(t);
            for (j, &i) in group.iter().enumerate() {
                let ch = &mut chains[i];
                let z = normals(&mut ch.rng, numel);
                let e = &eps.data()[j * numel..(j + 1) * numel];
                for ((xv, &ev), &zv) in ch.x.iter_mut().zip(e).zip(&z) {
                    let mean = inv_sqrt_alpha * (*xv as f64 - coef * ev as f64);
                    *xv = (mean + sigma * zv as f64) as f32;
                }
                ch.t -= 1;
            }
        }
    }
    chains
        .into_iter()
        .map(|ch| {
            let t = Tensor::from_vec(&[1, c, h, w], ch.x);
            ImageTensor::from_chw(&t, 0).clamp()
        })
        .collect()
}

/// Ancestral sampling of one image.
///
/// With `start_t = n_steps` and no `x_start`, the chain starts from unit noise
/// drawn from `seed`. With `start_t < n_steps`, `x_start` is required and the
/// generator is seeded with `seed` before the first reverse step.
pub fn sample<D: Denoiser>(
    model: &D,
    cond: &PromptEmbedding,
    sched: &NoiseSchedule,
    seed: u64,
    start_t: usize,
    x_start: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    let n = sched.n_steps();
    if start_t == 0 || start_t > n {
        return Err(Error::Argument(format!("start_t = {start_t} outside 1..={n}")));
    }
    let (c, h, w) = model.image_shape();
    let chain = match x_start {
        None if start_t == n => Chain::from_noise(c * h * w, cond, seed, sched),
        None => {
            return Err(Error::Argument(
                "x_start is required when start_t < n_steps".into(),
            ))
        }
        Some(x) => {
            if (x.channels(), x.height(), x.width()) != (c, h, w) {
                return Err(Error::Argument("x_start shape differs from model shape".into()));
            }
            Chain::from_state(x.to_chw(), start_t, cond, ChaCha8Rng::seed_from_u64(seed))
        }
    };
    Ok(run_chains(model, sched, vec![chain], 1).pop().unwrap())
}
