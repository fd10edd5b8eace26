//! Evaluation: Fréchet distance between Gaussian fits of extractor features,
//! and a perceptual distance between an input and its stylized output.
//!
//! Both use a small fixed convolutional network (`FeatureExtractor`) that is
//! pretrained once on a 10-way attribute task over source faces and then frozen.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datagen::{apply_style_oracle, gen_source_image, FaceParams, ATTRIBUTE_CLASSES, REFERENCE_SEED_OFFSET};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::guidance::{gis_batch, GuidanceSpec};
use crate::image::ImageTensor;
use crate::inversion::Vocabulary;
use crate::linalg::{matmul, sqrt_psd, symmetric_eigen, trace};
use crate::manifest::{write_atomic, DatasetManifest};
use crate::nn::{Adam, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::translator::Stylizer;

/// Anything that maps a `[n, 3, h, w]` batch to a list of intermediate feature maps.
pub trait FeatureMaps {
    fn feature_maps(&self, batch: &Tensor) -> Vec<Tensor>;
    fn content_hash(&self) -> String;
}

/// Channels of the three stride-2 conv blocks; pooled features have their sum as dimension.
pub const EXTRACTOR_CHANNELS: [usize; 3] = [16, 16, 32];
pub const FEATURE_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    store: ParamStore,
    blocks: Vec<Conv2d>,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorTraining {
    pub n_images: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        ExtractorTraining {
            n_images: 2000,
            steps: 400,
            batch: 32,
            lr: 3e-3,
            seed: 0,
            resolution: 32,
        }
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c) in EXTRACTOR_CHANNELS.iter().enumerate() {
            blocks.push(Conv2d::new(&mut store, &mut rng, &format!("block{i}"), c_in, c, 3, 2, 1));
            c_in = c;
        }
        let head = Linear::new(&mut store, &mut rng, "head", FEATURE_DIM, ATTRIBUTE_CLASSES);
        FeatureExtractor { store, blocks, head }
    }

    /// Trains on attribute labels of source faces with seeds `opts.seed .. opts.seed + n_images`,
    /// then freezes. Returns the per-step loss.
    pub fn pretrain(opts: &ExtractorTraining) -> Result<(Self, Vec<f32>)> {
        if opts.n_images == 0 || opts.batch == 0 {
            return Err(Error::Argument("extractor pretraining needs images and a batch".into()));
        }
        let mut ext = FeatureExtractor::new(opts.seed);
        let mut images = Vec::with_capacity(opts.n_images);
        let mut labels = Vec::with_capacity(opts.n_images);
        for j in 0..opts.n_images as u64 {
            let seed = opts.seed + j;
            images.push(gen_source_image(seed, opts.resolution)?);
            labels.push(FaceParams::from_seed(seed, opts.resolution).attribute_label());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
        let mut adam = Adam::new(&ext.store, 0.9, 0.999);
        let mut losses = Vec::with_capacity(opts.steps);
        for _ in 0..opts.steps {
            let idx: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..images.len())).collect();
            let batch: Vec<ImageTensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(ImageTensor::batch_to_chw(&batch));
            let (_, pooled) = ext.forward(&mut g, x);
            let logits = ext.head.forward(&mut g, &ext.store, pooled);
            let loss = g.cross_entropy(logits, &ys);
            losses.push(g.value(loss).data()[0]);
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &ext.store);
            adam.step(&mut ext.store, &pg, opts.lr);
        }
        ext.store.set_frozen(true);
        Ok((ext, losses))
    }

    fn forward(&self, g: &mut Graph, x: Var) -> (Vec<Var>, Var) {
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut pooled = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let z = block.forward(g, &self.store, h);
            h = g.relu(z);
            maps.push(h);
            pooled.push(g.global_avg_pool(h));
        }
        let n = g.value(x).shape()[0];
        let as4 = |g: &mut Graph, v: Var| {
            let c = g.value(v).shape()[1];
            g.reshape(v, &[n, c, 1, 1])
        };
        let mut p = as4(g, pooled[0]);
        for &q in &pooled[1..] {
            let q = as4(g, q);
            p = g.concat(p, q);
        }
        let p = g.reshape(p, &[n, FEATURE_DIM]);
        (maps, p)
    }

    /// Fraction of correct attribute predictions on the given seeds.
    pub fn attribute_accuracy(&self, seeds: &[u64], resolution: usize) -> Result<f64> {
        let mut correct = 0;
        for chunk in seeds.chunks(64) {
            let imgs = chunk
                .iter()
                .map(|&s| gen_source_image(s, resolution))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            g.freeze(&self.store);
            let x = g.constant(ImageTensor::batch_to_chw(&imgs));
            let (_, pooled) = self.forward(&mut g, x);
            let logits = self.head.forward(&mut g, &self.store, pooled);
            let lv = g.value(logits);
            for (i, &s) in chunk.iter().enumerate() {
                let row = &lv.data()[i * ATTRIBUTE_CLASSES..(i + 1) * ATTRIBUTE_CLASSES];
                let pred = (0..ATTRIBUTE_CLASSES).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                correct += usize::from(pred == FaceParams::from_seed(s, resolution).attribute_label());
            }
        }
        Ok(correct as f64 / seeds.len().max(1) as f64)
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, &serde_json::json!({ "kind": "extractor" }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path)?;
        if meta["kind"] != "extractor" {
            return Err(Error::Format(format!("{} is not an extractor checkpoint", path.display())));
        }
        let mut ext = FeatureExtractor::new(0);
        ext.store.load_from(&store)?;
        ext.store.set_frozen(true);
        Ok(ext)
    }
}

impl FeatureMaps for FeatureExtractor {
    fn feature_maps(&self, batch: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let x = g.constant(batch.clone());
        let (maps, _) = self.forward(&mut g, x);
        maps.into_iter().map(|m| g.value(m).clone()).collect()
    }

    fn content_hash(&self) -> String {
        self.store.content_hash()
    }
}

/// Spatially averaged feature maps, concatenated over layers: one row per image.
pub fn pooled_features<F: FeatureMaps + ?Sized>(ext: &F, imgs: &[ImageTensor]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(imgs.len());
    for chunk in imgs.chunks(64) {
        let maps = ext.feature_maps(&ImageTensor::batch_to_chw(chunk));
        for i in 0..chunk.len() {
            let mut row = Vec::new();
            for m in &maps {
                let (_, c, h, w) = m.dims4();
                let l = h * w;
                for ch in 0..c {
                    let seg = &m.data()[(i * c + ch) * l..(i * c + ch + 1) * l];
                    row.push(seg.iter().map(|&v| v as f64).sum::<f64>() / l as f64);
                }
            }
            out.push(row);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `d × d`.
    pub sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    key: String,
    mu_bits: Vec<u64>,
    sigma_bits: Vec<u64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn to_file(&self, key: &str) -> StatsFile {
        StatsFile {
            key: key.to_string(),
            mu_bits: self.mu.iter().map(|v| v.to_bits()).collect(),
            sigma_bits: self.sigma.iter().map(|v| v.to_bits()).collect(),
        }
    }

    fn from_file(f: StatsFile) -> Result<Self> {
        let d = f.mu_bits.len();
        if f.sigma_bits.len() != d * d {
            return Err(Error::Format("stats file has inconsistent dimensions".into()));
        }
        Ok(GaussianStats {
            mu: f.mu_bits.into_iter().map(f64::from_bits).collect(),
            sigma: f.sigma_bits.into_iter().map(f64::from_bits).collect(),
        })
    }
}

/// Sample mean and unbiased (`n − 1`) covariance.
pub fn fit_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::Argument(format!("fit_stats needs at least 2 samples, got {}", features.len())));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Argument("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut sigma = vec![0.0; d * d];
    for f in features {
        let c: Vec<f64> = f.iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                sigma[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / (n - 1.0);
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma })
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the square root taken
/// from the eigenvalues of `Σa^½ Σb Σa^½` clipped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.sigma.len() != d * d || b.sigma.len() != d * d {
        return Err(Error::Argument(format!("dimension mismatch: {} vs {}", d, b.dim())));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = sqrt_psd(&a.sigma, d);
    let m = matmul(&matmul(&sa, &b.sigma, d), &sa, d);
    let (vals, _) = symmetric_eigen(&m, d);
    let tr_sqrt: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let trace_term = (trace(&a.sigma, d) + trace(&b.sigma, d) - 2.0 * tr_sqrt).max(0.0);
    Ok(mean_term + trace_term)
}

/// Mean over layers of the per-location squared distance between channel-normalized
/// feature vectors, averaged over locations.
pub fn perceptual_distance<F: FeatureMaps + ?Sized>(x: &ImageTensor, y: &ImageTensor, ext: &F) -> Result<f64> {
    Ok(perceptual_distances(std::slice::from_ref(x), std::slice::from_ref(y), ext)?[0])
}

pub fn perceptual_distances<F: FeatureMaps + ?Sized>(
    xs: &[ImageTensor],
    ys: &[ImageTensor],
    ext: &F,
) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!("{} inputs vs {} outputs", xs.len(), ys.len())));
    }
    if let Some((x, y)) = xs.iter().zip(ys).find(|(x, y)| !x.same_shape(y)) {
        return Err(Error::Argument(format!(
            "shape mismatch: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (cx, cy) in xs.chunks(32).zip(ys.chunks(32)) {
        let mx = ext.feature_maps(&ImageTensor::batch_to_chw(cx));
        let my = ext.feature_maps(&ImageTensor::batch_to_chw(cy));
        for i in 0..cx.len() {
            let mut total = 0.0;
            for (a, b) in mx.iter().zip(&my) {
                total += layer_distance(a, b, i);
            }
            out.push(total / mx.len() as f64);
        }
    }
    Ok(out)
}

fn layer_distance(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    let (_, c, h, w) = a.dims4();
    let l = h * w;
    let base = i * c * l;
    let (ad, bd) = (a.data(), b.data());
    let mut sum = 0.0;
    for p in 0..l {
        let norm = |d: &[f32]| {
            (0..c)
                .map(|ch| (d[base + ch * l + p] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                + 1e-10
        };
        let (na, nb) = (norm(ad), norm(bd));
        sum += (0..c)
            .map(|ch| (ad[base + ch * l + p] as f64 / na - bd[base + ch * l + p] as f64 / nb).powi(2))
            .sum::<f64>();
    }
    sum / l as f64
}

fn reference_key<D: Denoiser, F: FeatureMaps + ?Sized>(
    model: &D,
    vocab: &Vocabulary,
    spec: &GuidanceSpec,
    ext: &F,
) -> String {
    let mut h = Sha256::new();
    h.update(spec.mode.as_str());
    h.update(spec.t0.to_le_bytes());
    h.update((spec.n_samples as u64).to_le_bytes());
    h.update(spec.seed_base.to_le_bytes());
    h.update(spec.prompt.as_bytes());
    h.update(model.params().content_hash());
    h.update(vocab.frozen_hash());
    h.update(serde_json::to_vec(&vocab.learned()).unwrap_or_default());
    h.update(ext.content_hash());
    h.update(spec.guide_manifest.to_jsonl());
    hex::encode(h.finalize())
}

/// Gaussian stats of `spec.n_samples` guided samples (seeds `seed_base + i`, guide `i mod |guides|`).
/// Cached in `cache_dir` under a hash of everything that determines the result.
pub fn build_fid_reference<D: Denoiser, F: FeatureMaps + ?Sized>(
    model: &D,
    vocab: &Vocabulary,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    ext: &F,
    training_seeds: &HashSet<u64>,
    cache_dir: Option<&Path>,
) -> Result<GaussianStats> {
    spec.validate()?;
    let records: Vec<_> = (1..=spec.n_samples).map(|i| spec.record(i)).collect();
    if let Some(r) = records.iter().find(|r| training_seeds.contains(&r.seed)) {
        return Err(Error::Integrity(format!(
            "reference seed {} is also an augmentation-training seed",
            r.seed
        )));
    }
    let key = reference_key(model, vocab, spec, ext);
    let cache_path = cache_dir.map(|d| d.join(format!("ref_{}.json", &key[..16])));
    if let Some(p) = &cache_path {
        if let Ok(text) = fs::read_to_string(p) {
            let f: StatsFile = serde_json::from_str(&text)?;
            if f.key == key {
                return GaussianStats::from_file(f);
            }
        }
    }
    let guides = spec.guide_manifest.load_all()?;
    let mut samples = Vec::with_capacity(records.len());
    for chunk in records.chunks(16) {
        let jobs: Vec<(&ImageTensor, u64)> = chunk.iter().map(|r| (&guides[r.guide_index], r.seed)).collect();
        samples.extend(
            gis_batch(model, vocab, &jobs, spec.t0, &spec.prompt, sched)?
                .into_iter()
                .map(|s| s.quantized()),
        );
    }
    let stats = fit_stats(&pooled_features(ext, &samples))?;
    if let Some(p) = &cache_path {
        write_atomic(p, serde_json::to_string(&stats.to_file(&key))?.as_bytes())?;
    }
    Ok(stats)
}

/// Oracle-styled faces drawn from the reserved reference seed pool.
pub fn oracle_reference_images(root_seed: u64, n: usize, size: usize) -> Result<Vec<ImageTensor>> {
    (0..n as u64)
        .map(|j| gen_source_image(root_seed + REFERENCE_SEED_OFFSET + j, size).map(|f| apply_style_oracle(&f)))
        .collect()
}

pub fn oracle_reference<F: FeatureMaps + ?Sized>(ext: &F, root_seed: u64, n: usize, size: usize) -> Result<GaussianStats> {
    fit_stats(&pooled_features(ext, &oracle_reference_images(root_seed, n, size)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid_by_reference: BTreeMap<String, f64>,
    /// Mean input/output perceptual distance.
    pub mean_lpips: f64,
    pub median_lpips: f64,
    /// Median perceptual distance between each output and the oracle-styled input.
    pub median_oracle_distance: f64,
    pub n_eval: usize,
    pub extractor_hash: String,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Stylizes every input and scores the outputs. Returns the report and the outputs.
pub fn evaluate_images<S: Stylizer + ?Sized, F: FeatureMaps + ?Sized>(
    stylizer: &S,
    inputs: &[ImageTensor],
    references: &[(String, GaussianStats)],
    ext: &F,
) -> Result<(MetricReport, Vec<ImageTensor>)> {
    if inputs.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let outputs: Vec<ImageTensor> = stylizer
        .stylize_batch(inputs)?
        .into_iter()
        .map(|o| o.quantized())
        .collect();
    let lpips = perceptual_distances(inputs, &outputs, ext)?;
    let oracle: Vec<ImageTensor> = inputs.iter().map(apply_style_oracle).collect();
    let oracle_d = perceptual_distances(&outputs, &oracle, ext)?;
    let mut fid_by_reference = BTreeMap::new();
    if !references.is_empty() {
        let stats = fit_stats(&pooled_features(ext, &outputs))?;
        for (name, r) in references {
            fid_by_reference.insert(name.clone(), frechet_distance(&stats, r)?);
        }
    }
    let report = MetricReport {
        fid_by_reference,
        mean_lpips: lpips.iter().sum::<f64>() / lpips.len() as f64,
        median_lpips: median(&lpips),
        median_oracle_distance: median(&oracle_d),
        n_eval: inputs.len(),
        extractor_hash: ext.content_hash(),
    };
    let bad = report.fid_by_reference.values().chain([&report.mean_lpips]).any(|v| !v.is_finite() || *v < 0.0);
    if bad {
        return Err(Error::Numeric("metric report has a negative or non-finite value".into()));
    }
    Ok((report, outputs))
}

pub fn evaluate<S: Stylizer + ?Sized, F: FeatureMaps + ?Sized>(
    stylizer: &S,
    test_set: &DatasetManifest,
    references: &[(String, GaussianStats)],
    ext: &F,
) -> Result<MetricReport> {
    let inputs = test_set.load_all()?;
    Ok(evaluate_images(stylizer, &inputs, references, ext)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translator::IdentityStylizer;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
            }
        }
        s
    }

    fn random_stats(d: usize, rng: &mut ChaCha8Rng) -> GaussianStats {
        GaussianStats {
            mu: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            sigma: random_psd(d, rng),
        }
    }

    /// Independent route: Tr((Σa Σb)^½) from the (complex) eigenvalues of the
    /// non-symmetric product.
    fn oracle_fid(a: &GaussianStats, b: &GaussianStats) -> f64 {
        let d = a.dim();
        let sa = DMatrix::from_row_slice(d, d, &a.sigma);
        let sb = DMatrix::from_row_slice(d, d, &b.sigma);
        let tr_sqrt: f64 = (&sa * &sb)
            .complex_eigenvalues()
            .iter()
            .map(|z| z.sqrt().re)
            .sum();
        let dm: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
        dm + sa.trace() + sb.trace() - 2.0 * tr_sqrt
    }

    #[test]
    fn fit_stats_examples() {
        let s = fit_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mu, vec![1.0, 0.0]);
        assert_eq!(s.sigma, vec![2.0, 0.0, 0.0, 0.0]);
        let c = fit_stats(&vec![vec![3.0, -1.0]; 5]).unwrap();
        assert!(c.sigma.iter().all(|&v| v == 0.0));
        assert!(matches!(fit_stats(&[vec![1.0]]), Err(Error::Argument(_))));
    }

    #[test]
    fn fit_stats_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut g = f.clone();
        g.reverse();
        let (a, b) = (fit_stats(&f).unwrap(), fit_stats(&g).unwrap());
        for (x, y) in a.mu.iter().chain(&a.sigma).zip(b.mu.iter().chain(&b.sigma)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_identity_and_mean_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_stats(6, &mut rng);
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
        let mut b = a.clone();
        b.mu[0] += 1.2;
        b.mu[3] -= 1.6;
        assert!((frechet_distance(&a, &b).unwrap() - 4.0).abs() <= 1e-9);
    }

    #[test]
    fn frechet_matches_nonsymmetric_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_stats(4, &mut rng);
            let b = random_stats(4, &mut rng);
            let ours = frechet_distance(&a, &b).unwrap();
            let oracle = oracle_fid(&a, &b);
            assert!((ours - oracle).abs() <= 1e-6, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn frechet_dimension_mismatch() {
        let a = GaussianStats { mu: vec![0.0], sigma: vec![1.0] };
        let b = GaussianStats { mu: vec![0.0; 2], sigma: vec![1.0, 0.0, 0.0, 1.0] };
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn frechet_symmetric_and_bounded_below(seed in 0u64..10_000, d in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stats(d, &mut rng);
            let b = random_stats(d, &mut rng);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));
            let dm: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!(ab >= dm - 1e-9);
        }
    }

    /// Layer 1 is the image itself; layer 2 is the channel sum.
    struct ToyMaps;

    impl FeatureMaps for ToyMaps {
        fn feature_maps(&self, batch: &Tensor) -> Vec<Tensor> {
            let (n, c, h, w) = batch.dims4();
            let l = h * w;
            let mut sum = vec![0.0; n * l];
            for i in 0..n {
                for ch in 0..c {
                    for p in 0..l {
                        sum[i * l + p] += batch.data()[(i * c + ch) * l + p];
                    }
                }
            }
            vec![batch.clone(), Tensor::from_vec(&[n, 1, h, w], sum)]
        }

        fn content_hash(&self) -> String {
            "toy".into()
        }
    }

    #[test]
    fn perceptual_toy_case() {
        let x = ImageTensor::filled(4, 4, [1.0, 0.0, 0.0]);
        let mut y = ImageTensor::filled(4, 4, [0.0, 1.0, 0.0]);
        for p in 8..12 {
            y.set_pixel(p / 4, p % 4, [0.5, 0.0, 0.0]);
        }
        for p in 12..16 {
            y.set_pixel(p / 4, p % 4, [0.0, 0.0, -1.0]);
        }
        // Layer 1: 8 locations at 2, 4 at 0, 4 at 2 -> 1.5. Layer 2: only the last 4 flip sign -> 16/16.
        let d = perceptual_distance(&x, &y, &ToyMaps).unwrap();
        assert!((d - 1.25).abs() < 1e-9, "{d}");
        assert_eq!(perceptual_distance(&x, &x, &ToyMaps).unwrap(), 0.0);
        let small = ImageTensor::filled(2, 2, [0.0; 3]);
        assert!(matches!(perceptual_distance(&x, &small, &ToyMaps), Err(Error::Argument(_))));
    }

    #[test]
    fn perceptual_identity_and_symmetry_with_extractor() {
        let ext = FeatureExtractor::new(0);
        for s in 0..6 {
            let a = gen_source_image(s, 32).unwrap();
            let b = gen_source_image(s + 100, 32).unwrap();
            assert_eq!(perceptual_distance(&a, &a, &ext).unwrap(), 0.0);
            let ab = perceptual_distance(&a, &b, &ext).unwrap();
            let ba = perceptual_distance(&b, &a, &ext).unwrap();
            assert_eq!(ab, ba);
            assert!(ab > 0.0);
        }
    }

    #[test]
    fn pretraining_learns_attributes_and_freezes() {
        let opts = ExtractorTraining { n_images: 400, steps: 150, ..Default::default() };
        let (ext, losses) = FeatureExtractor::pretrain(&opts).unwrap();
        assert!(ext.is_frozen());
        let first: f32 = losses[..15].iter().sum::<f32>() / 15.0;
        let last: f32 = losses[losses.len() - 15..].iter().sum::<f32>() / 15.0;
        assert!(last < first, "{first} -> {last}");
        let held_out: Vec<u64> = (5000..5200).collect();
        assert!(ext.attribute_accuracy(&held_out, 32).unwrap() > 0.2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ext.ckpt");
        ext.save(&p).unwrap();
        let back = FeatureExtractor::load(&p).unwrap();
        assert_eq!(back.content_hash(), ext.content_hash());
        assert!(back.is_frozen());
    }

    #[test]
    fn pooled_features_have_documented_dimension() {
        let ext = FeatureExtractor::new(1);
        let imgs: Vec<_> = (0..3).map(|s| gen_source_image(s, 32).unwrap()).collect();
        let f = pooled_features(&ext, &imgs);
        assert_eq!(f.len(), 3);
        assert!(f.iter().all(|r| r.len() == FEATURE_DIM));
    }

    #[test]
    fn identity_stylizer_scores_zero_and_split_half_fid_is_smaller() {
        let ext = FeatureExtractor::new(2);
        let faces: Vec<_> = (0..16).map(|s| gen_source_image(TEST_OFFSET + s, 32).unwrap()).collect();
        let (rep, out) = evaluate_images(&IdentityStylizer, &faces, &[], &ext).unwrap();
        assert_eq!(rep.mean_lpips, 0.0);
        assert_eq!(rep.n_eval, 16);
        assert_eq!(out, faces);

        let refs = oracle_reference_images(0, 400, 32).unwrap();
        let h1 = fit_stats(&pooled_features(&ext, &refs[..200])).unwrap();
        let h2 = fit_stats(&pooled_features(&ext, &refs[200..])).unwrap();
        let src: Vec<_> = (0..200).map(|s| gen_source_image(s, 32).unwrap()).collect();
        let s = fit_stats(&pooled_features(&ext, &src)).unwrap();
        let within = frechet_distance(&h1, &h2).unwrap();
        let across = frechet_distance(&h1, &s).unwrap();
        assert!(within > 0.0 && within < across, "{within} vs {across}");
    }

    const TEST_OFFSET: u64 = crate::datagen::TEST_SEED_OFFSET;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
