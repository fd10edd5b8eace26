//! Unpaired image-to-image translation: a residual encoder-decoder generator,
//! a patch discriminator, least-squares adversarial loss and a patchwise
//! contrastive loss between input and output features.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::nn::{Adam, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

/// Anything that maps a batch of images to stylized images of the same shape.
pub trait Stylizer {
    fn stylize_batch(&self, imgs: &[ImageTensor]) -> Result<Vec<ImageTensor>>;
}

/// Returns its input; the "no-op" translator.
pub struct IdentityStylizer;

impl Stylizer for IdentityStylizer {
    fn stylize_batch(&self, imgs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        Ok(imgs.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub resolution: usize,
    /// Width of the first generator stage; later stages use `2 * ngf`.
    pub ngf: usize,
    pub n_res_blocks: usize,
    pub ndf: usize,
    pub n_patches: usize,
    pub nce_dim: usize,
    pub tau: f32,
    pub lambda_nce: f32,
    pub identity_nce: bool,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            resolution: 32,
            ngf: 16,
            n_res_blocks: 3,
            ndf: 16,
            n_patches: 64,
            nce_dim: 64,
            tau: 0.07,
            lambda_nce: 1.0,
            identity_nce: true,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 || self.resolution < 16 {
            return Err(Error::Config(format!(
                "translator resolution {} must be a multiple of 4 and at least 16",
                self.resolution
            )));
        }
        if self.ngf == 0 || self.ndf == 0 || self.n_patches == 0 || self.nce_dim == 0 {
            return Err(Error::Config("translator widths and patch counts must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("translator lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct NormConv {
    conv: Conv2d,
}

impl NormConv {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.conv.forward(g, ps, x);
        let h = g.instance_norm(h);
        g.relu(h)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: TranslatorConfig,
    store: ParamStore,
    stem: NormConv,
    down1: NormConv,
    down2: NormConv,
    res: Vec<(Conv2d, Conv2d)>,
    up1: NormConv,
    up2: NormConv,
    head: Conv2d,
}

/// Generator activations used by the contrastive loss.
pub struct Encoded {
    pub layers: Vec<Var>,
    pub bottleneck: Var,
}

impl Generator {
    pub fn new(config: TranslatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut ps = ParamStore::new();
        let (a, b) = (config.ngf, 2 * config.ngf);
        let nc = |ps: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, i, o, k, s, p| NormConv {
            conv: Conv2d::new(ps, r, name, i, o, k, s, p),
        };
        let stem = nc(&mut ps, r, "stem", 3, a, 7, 1, 3);
        let down1 = nc(&mut ps, r, "down1", a, b, 3, 2, 1);
        let down2 = nc(&mut ps, r, "down2", b, b, 3, 2, 1);
        let res = (0..config.n_res_blocks)
            .map(|i| {
                (
                    Conv2d::new(&mut ps, r, &format!("res{i}.conv1"), b, b, 3, 1, 1),
                    Conv2d::new(&mut ps, r, &format!("res{i}.conv2"), b, b, 3, 1, 1),
                )
            })
            .collect();
        let up1 = nc(&mut ps, r, "up1", b, b, 3, 1, 1);
        let up2 = nc(&mut ps, r, "up2", b, a, 3, 1, 1);
        let head = Conv2d::with_gain(&mut ps, r, "head", a, 3, 7, 1, 3, 0.5);
        Ok(Generator {
            config,
            store: ps,
            stem,
            down1,
            down2,
            res,
            up1,
            up2,
            head,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_hash(&self) -> String {
        self.store.content_hash()
    }

    /// Encoder pass; `layers` are the stem, first downsampling and first
    /// residual block outputs (the full encoder when there are no residual blocks).
    pub fn encode(&self, g: &mut Graph, x: Var) -> Encoded {
        let ps = &self.store;
        let h0 = self.stem.forward(g, ps, x);
        let h1 = self.down1.forward(g, ps, h0);
        let mut h = self.down2.forward(g, ps, h1);
        let mut layers = vec![h0, h1];
        for (i, (c1, c2)) in self.res.iter().enumerate() {
            let r = c1.forward(g, ps, h);
            let r = g.instance_norm(r);
            let r = g.relu(r);
            let r = c2.forward(g, ps, r);
            let r = g.instance_norm(r);
            h = g.add(h, r);
            if i == 0 {
                layers.push(h);
            }
        }
        if self.res.is_empty() {
            layers.push(h);
        }
        Encoded { layers, bottleneck: h }
    }

    pub fn decode(&self, g: &mut Graph, h: Var) -> Var {
        let ps = &self.store;
        let h = g.upsample2x(h);
        let h = self.up1.forward(g, ps, h);
        let h = g.upsample2x(h);
        let h = self.up2.forward(g, ps, h);
        let h = self.head.forward(g, ps, h);
        g.tanh(h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Encoded) {
        let enc = self.encode(g, x);
        let y = self.decode(g, enc.bottleneck);
        (y, enc)
    }

    fn check_shape(&self, img: &ImageTensor) -> Result<()> {
        let r = self.config.resolution;
        if (img.height(), img.width(), img.channels()) != (r, r, 3) {
            return Err(Error::Argument(format!(
                "image is {}x{}x{}, translator expects {r}x{r}x3",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// One forward pass.
    pub fn stylize(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.stylize_batch(std::slice::from_ref(img))?.pop().unwrap())
    }

    pub fn save(&self, path: &Path, iteration: usize) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "generator",
            "config": self.config,
            "iteration": iteration,
        });
        checkpoint::save(path, &self.store, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path)?;
        if meta["kind"] != "generator" {
            return Err(Error::Format(format!("{} is not a generator checkpoint", path.display())));
        }
        let config: TranslatorConfig = serde_json::from_value(meta["config"].clone())?;
        let mut g = Generator::new(config, 0)?;
        g.store.load_from(&store)?;
        Ok(g)
    }
}

impl Stylizer for Generator {
    fn stylize_batch(&self, imgs: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        for img in imgs {
            self.check_shape(img)?;
        }
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(32) {
            let mut g = Graph::new();
            g.freeze(&self.store);
            let x = g.constant(ImageTensor::batch_to_chw(chunk));
            let (y, _) = self.forward(&mut g, x);
            let y = g.take_value(y);
            out.extend((0..chunk.len()).map(|i| ImageTensor::from_chw(&y, i)));
        }
        Ok(out)
    }
}

/// Patch discriminator producing a score map smaller than its input.
#[derive(Clone, Debug)]
pub struct Discriminator {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(config: &TranslatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut ps = ParamStore::new();
        let (a, b) = (config.ndf, 2 * config.ndf);
        let convs = vec![
            Conv2d::new(&mut ps, r, "d0", 3, a, 4, 2, 1),
            Conv2d::new(&mut ps, r, "d1", a, b, 4, 2, 1),
            Conv2d::new(&mut ps, r, "d2", b, b, 4, 1, 1),
            Conv2d::new(&mut ps, r, "d3", b, 1, 4, 1, 1),
        ];
        Discriminator { store: ps, convs }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Scores with the parameters of `store`, which must have this layout.
    fn forward_with(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, store, h);
            if i + 1 < self.convs.len() {
                if i > 0 {
                    h = g.instance_norm(h);
                }
                h = g.leaky_relu(h, 0.2);
            }
        }
        h
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_with(g, &self.store, x)
    }
}

/// Per-layer two-layer MLP projection heads for patch features.
#[derive(Clone, Debug)]
pub struct PatchHeads {
    store: ParamStore,
    heads: Vec<(Linear, Linear)>,
}

impl PatchHeads {
    pub fn new(channels: &[usize], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let heads = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                (
                    Linear::new(&mut ps, &mut rng, &format!("head{i}.fc1"), c, dim),
                    Linear::new(&mut ps, &mut rng, &format!("head{i}.fc2"), dim, dim),
                )
            })
            .collect();
        PatchHeads { store: ps, heads }
    }

    /// Unit-normalized projections of `feat` at flat locations `locs`: `[n·|locs|, dim]`.
    pub fn project(&self, g: &mut Graph, layer: usize, feat: Var, locs: &[usize]) -> Var {
        let (fc1, fc2) = &self.heads[layer];
        let p = g.gather(feat, locs);
        let h = fc1.forward(g, &self.store, p);
        let h = g.relu(h);
        let h = fc2.forward(g, &self.store, h);
        g.l2_normalize(h)
    }
}

/// Unit-normalized feature vectors at matched locations of two images per layer.
pub struct PatchFeatureStack {
    pub layers: Vec<Var>,
}

/// Patchwise InfoNCE averaged over layers. Keys are treated as constants.
pub fn patch_nce_loss(
    g: &mut Graph,
    query: &PatchFeatureStack,
    keys: &PatchFeatureStack,
    groups: usize,
    tau: f32,
) -> Result<Var> {
    if query.layers.len() != keys.layers.len() || query.layers.is_empty() {
        return Err(Error::Contract("patch stacks have different layer counts".into()));
    }
    let mut total: Option<Var> = None;
    for (&q, &k) in query.layers.iter().zip(&keys.layers) {
        if g.value(q).shape() != g.value(k).shape() || g.value(q).dims2().0 % groups != 0 {
            return Err(Error::Contract("patch stacks are not location-aligned".into()));
        }
        let k = g.detach(k);
        let l = g.patch_nce(q, k, groups, tau);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let n = query.layers.len() as f32;
    Ok(g.scale(total.unwrap(), 1.0 / n))
}

/// Independent uniform draws from the source and target sets; no pairing by index.
pub struct PairSampler {
    rng: ChaCha8Rng,
    n_source: usize,
    n_target: usize,
}

impl PairSampler {
    pub fn new(n_source: usize, n_target: usize, seed: u64) -> Self {
        PairSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n_source,
            n_target,
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let s = (0..batch).map(|_| self.rng.random_range(0..self.n_source)).collect();
        let t = (0..batch).map(|_| self.rng.random_range(0..self.n_target)).collect();
        (s, t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainTranslatorOptions {
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    /// Write the generator every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss_d: Vec<f32>,
    pub loss_g_adv: Vec<f32>,
    pub loss_nce: Vec<f32>,
    pub loss_nce_idt: Vec<f32>,
    /// `(source index, target index)` of every drawn example.
    pub pairs: Vec<(usize, usize)>,
}

pub struct TrainedTranslator {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: TrainLog,
}

fn lr_at(base: f32, it: usize, iters: usize) -> f32 {
    let half = iters / 2;
    if it < half {
        base
    } else {
        base * (iters - it) as f32 / (iters - half) as f32
    }
}

fn stack(images: &[ImageTensor], idx: &[usize]) -> Tensor {
    let picked: Vec<ImageTensor> = idx.iter().map(|&i| images[i].clone()).collect();
    ImageTensor::batch_to_chw(&picked)
}

/// Alternating discriminator/generator training on unpaired batches.
///
/// Generator objective: `loss_G + λ·NCE(input, G(input)) + λ·NCE(target, G(target))`,
/// the last term only when `identity_nce` is set. All randomness (batches,
/// patch locations, initialization) derives from `opts.seed`.
pub fn train_translator(
    config: &TranslatorConfig,
    source: &[ImageTensor],
    target: &[ImageTensor],
    opts: &TrainTranslatorOptions,
    checkpoint_path: Option<&Path>,
) -> Result<TrainedTranslator> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Argument("translator needs nonempty source and target sets".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Argument("batch must be at least 1".into()));
    }
    let mut gen = Generator::new(config.clone(), opts.seed)?;
    for img in source.iter().chain(target) {
        gen.check_shape(img)?;
    }
    let mut disc = Discriminator::new(config, opts.seed.wrapping_add(1));
    let (a, b) = (config.ngf, 2 * config.ngf);
    let mut heads = PatchHeads::new(&[a, b, b], config.nce_dim, opts.seed.wrapping_add(2));
    let mut opt_g = Adam::new(&gen.store, config.beta1, config.beta2);
    let mut opt_d = Adam::new(&disc.store, config.beta1, config.beta2);
    let mut opt_h = Adam::new(&heads.store, config.beta1, config.beta2);
    let mut sampler = PairSampler::new(source.len(), target.len(), opts.seed.wrapping_add(3));
    let mut patch_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut log = TrainLog::default();

    for it in 0..opts.iters {
        let (si, ti) = sampler.next_batch(opts.batch);
        log.pairs.extend(si.iter().copied().zip(ti.iter().copied()));
        let n = si.len();
        let mut g = Graph::new();
        let real_a = g.constant(stack(source, &si));
        let real_b = g.constant(stack(target, &ti));
        let (fake_b, enc_a) = gen.forward(&mut g, real_a);

        // Discriminator step on the current fake.
        let fake_det = g.detach(fake_b);
        let d_real = disc.forward(&mut g, real_b);
        let d_fake = disc.forward(&mut g, fake_det);
        let l_real = g.mse_const(d_real, 1.0);
        let l_fake = g.mse_const(d_fake, 0.0);
        let l_sum = g.add(l_real, l_fake);
        let loss_d = g.scale(l_sum, 0.5);
        let ld = g.value(loss_d).data()[0];
        let grads = g.backward(loss_d);
        let dg = g.param_grads(&grads, &disc.store);
        let lr = lr_at(config.lr, it, opts.iters);
        opt_d.step(&mut disc.store, &dg, lr);

        // Generator step against the updated discriminator.
        let d_now = disc.store.clone();
        g.freeze(&d_now);
        let score = disc.forward_with(&mut g, &d_now, fake_b);
        let loss_adv = g.mse_const(score, 1.0);
        let la = g.value(loss_adv).data()[0];

        let enc_fake = gen.encode(&mut g, fake_b);
        let nce = nce_between(&mut g, &heads, &enc_a, &enc_fake, n, config, &mut patch_rng)?;
        let ln = g.value(nce).data()[0];
        let weighted = g.scale(nce, config.lambda_nce);
        let mut loss_g = g.add(loss_adv, weighted);
        let mut lni = 0.0;
        if config.identity_nce {
            let (idt_b, enc_b) = gen.forward(&mut g, real_b);
            let enc_idt = gen.encode(&mut g, idt_b);
            let nce_idt = nce_between(&mut g, &heads, &enc_b, &enc_idt, n, config, &mut patch_rng)?;
            lni = g.value(nce_idt).data()[0];
            let w = g.scale(nce_idt, config.lambda_nce);
            loss_g = g.add(loss_g, w);
        }
        for v in [ld, la, ln, lni] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("translator loss diverged at iteration {it}")));
            }
        }
        let grads = g.backward(loss_g);
        let gg = g.param_grads(&grads, &gen.store);
        let hg = g.param_grads(&grads, &heads.store);
        opt_g.step(&mut gen.store, &gg, lr);
        opt_h.step(&mut heads.store, &hg, lr);

        log.loss_d.push(ld);
        log.loss_g_adv.push(la);
        log.loss_nce.push(ln);
        log.loss_nce_idt.push(lni);
        if it % 100 == 0 {
            log::debug!("translator iter {it}: D {ld:.3} G {la:.3} NCE {ln:.3} idt {lni:.3}");
        }
        if let Some(p) = checkpoint_path {
            if opts.checkpoint_every > 0 && (it + 1) % opts.checkpoint_every == 0 {
                gen.save(p, it + 1)?;
            }
        }
    }
    if let Some(p) = checkpoint_path {
        gen.save(p, opts.iters)?;
    }
    Ok(TrainedTranslator {
        generator: gen,
        discriminator: disc,
        log,
    })
}

fn nce_between<R: Rng>(
    g: &mut Graph,
    heads: &PatchHeads,
    keys_from: &Encoded,
    queries_from: &Encoded,
    groups: usize,
    config: &TranslatorConfig,
    rng: &mut R,
) -> Result<Var> {
    let mut q_layers = Vec::new();
    let mut k_layers = Vec::new();
    for (l, (&kf, &qf)) in keys_from.layers.iter().zip(&queries_from.layers).enumerate() {
        let (_, _, h, w) = g.value(kf).dims4();
        let n_loc = config.n_patches.min(h * w);
        let locs = sample_indices(rng, h * w, n_loc).into_vec();
        k_layers.push(heads.project(g, l, kf, &locs));
        q_layers.push(heads.project(g, l, qf, &locs));
    }
    patch_nce_loss(
        g,
        &PatchFeatureStack { layers: q_layers },
        &PatchFeatureStack { layers: k_layers },
        groups,
        config.tau,
    )
}
