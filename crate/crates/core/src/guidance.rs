//! Guided image synthesis (start the reverse chain from a noised guide image)
//! and the self/cross augmentation sets built from it.
//!
//! Draw order for one guided sample with `0 < start_t < n_steps`: the generator
//! seeded with the sample's seed first yields the `C·H·W` normals that noise
//! the guide to `start_t`, then one block per reverse step as in
//! [`crate::diffusion`]. With `start_t = n_steps` the guide is ignored and the
//! first block is the initial noise itself, so the output equals unconditional
//! sampling with the same seed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, run_chains, Chain, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::inversion::{PromptEmbedding, Vocabulary};
use crate::manifest::{write_atomic, DatasetManifest, ManifestEntry, Provenance, Split};

pub const DEFAULT_PROMPT: &str = "a portrait in the style of T_*";

/// Chains sampled together in one denoiser call during augmentation.
const GENERATION_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Guides are the style images themselves.
    #[serde(rename = "self")]
    SelfGuided,
    /// Guides are source-domain images.
    Cross,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::SelfGuided => "self",
            GuidanceMode::Cross => "cross",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            GuidanceMode::SelfGuided => Provenance::SelfAug,
            GuidanceMode::Cross => Provenance::CrossAug,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceSpec {
    pub t0: f64,
    pub prompt: String,
    pub mode: GuidanceMode,
    pub n_samples: usize,
    pub guide_manifest: DatasetManifest,
    /// Added to the sample index to form the seed; 0 gives `r_i = i`.
    pub seed_base: u64,
}

impl GuidanceSpec {
    pub fn new(mode: GuidanceMode, t0: f64, n_samples: usize, guides: DatasetManifest) -> Self {
        GuidanceSpec {
            t0,
            prompt: DEFAULT_PROMPT.to_string(),
            mode,
            n_samples,
            guide_manifest: guides,
            seed_base: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::Config(format!("guidance factor t0 = {} outside (0, 1]", self.t0)));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if self.guide_manifest.is_empty() {
            return Err(Error::Config("guide set is empty".into()));
        }
        Ok(())
    }

    /// Record for sample `i` (1-based).
    pub fn record(&self, i: usize) -> AugmentationRecord {
        AugmentationRecord {
            index: i,
            guide_index: i % self.guide_manifest.len(),
            t0: self.t0,
            seed: self.seed_base + i as u64,
            prompt: self.prompt.clone(),
            mode: self.mode,
            image_path: PathBuf::from("images").join(format!("{}_{i:06}.png", self.mode.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub index: usize,
    pub guide_index: usize,
    pub t0: f64,
    pub seed: u64,
    pub prompt: String,
    pub mode: GuidanceMode,
    /// Relative to the augmentation directory.
    pub image_path: PathBuf,
}

/// Reverse-chain start step for guidance factor `t0`: `round(t0 · n_steps)`
/// with halves rounded up, at least 1 when `t0 > 0`.
pub fn start_step(t0: f64, n_steps: usize) -> usize {
    if t0 <= 0.0 {
        return 0;
    }
    let s = (t0 * n_steps as f64 + 0.5).floor() as usize;
    s.clamp(1, n_steps)
}

fn guided_chain(
    guide: &ImageTensor,
    start_t: usize,
    cond: &PromptEmbedding,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Chain> {
    if start_t == sched.n_steps() {
        return Ok(Chain::from_noise(guide.data().len(), cond, seed, sched));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chw: Vec<f32> = StandardNormal.sample_iter(&mut rng).take(guide.data().len()).collect();
    let eps = ImageTensor::from_chw(
        &crate::tensor::Tensor::from_vec(&[1, guide.channels(), guide.height(), guide.width()], chw),
        0,
    );
    let x_start = add_noise(guide, start_t, &eps, sched)?;
    Ok(Chain::from_state(x_start.to_chw(), start_t, cond, rng))
}

fn check_guide<D: Denoiser>(model: &D, guide: &ImageTensor) -> Result<()> {
    let (c, h, w) = model.image_shape();
    if (guide.channels(), guide.height(), guide.width()) != (c, h, w) {
        return Err(Error::Argument(format!(
            "guide is {}x{}x{}, model expects {h}x{w}x{c}",
            guide.height(),
            guide.width(),
            guide.channels()
        )));
    }
    if guide.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Argument("guide values outside [-1, 1]".into()));
    }
    Ok(())
}

/// Guided synthesis of one image.
pub fn gis<D: Denoiser>(
    model: &D,
    vocab: &Vocabulary,
    guide: &ImageTensor,
    t0: f64,
    prompt: &str,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    let mut out = gis_batch(model, vocab, &[(guide, seed)], t0, prompt, sched)?;
    Ok(out.pop().unwrap())
}

/// Guided synthesis of several `(guide, seed)` pairs sharing `t0` and prompt.
/// Each output is identical to the corresponding single [`gis`] call.
pub fn gis_batch<D: Denoiser>(
    model: &D,
    vocab: &Vocabulary,
    jobs: &[(&ImageTensor, u64)],
    t0: f64,
    prompt: &str,
    sched: &NoiseSchedule,
) -> Result<Vec<ImageTensor>> {
    if !(0.0..=1.0).contains(&t0) {
        return Err(Error::Argument(format!("t0 = {t0} outside [0, 1]")));
    }
    for (g, _) in jobs {
        check_guide(model, g)?;
    }
    if t0 == 0.0 {
        return Ok(jobs.iter().map(|(g, _)| (*g).clone()).collect());
    }
    let cond = vocab.encode_prompt(prompt)?;
    let start_t = start_step(t0, sched.n_steps());
    let chains = jobs
        .iter()
        .map(|(g, seed)| guided_chain(g, start_t, &cond, *seed, sched))
        .collect::<Result<Vec<_>>>()?;
    Ok(run_chains(model, sched, chains, GENERATION_BATCH))
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn load_records(path: &Path) -> Result<Vec<AugmentationRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn save_records(path: &Path, records: &BTreeMap<usize, AugmentationRecord>) -> Result<()> {
    let mut s = String::new();
    for r in records.values() {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Outcome of [`build_aug_set`].
#[derive(Debug)]
pub struct AugSet {
    pub records: Vec<AugmentationRecord>,
    pub manifest: DatasetManifest,
    /// Number of images generated by this call; 0 when everything was already present.
    pub generated: usize,
}

/// Converts records to a dataset manifest rooted at `out_dir`.
pub fn records_manifest(records: &[AugmentationRecord], out_dir: &Path) -> DatasetManifest {
    let mut m = DatasetManifest::new(out_dir);
    m.entries = records
        .iter()
        .map(|r| ManifestEntry {
            image_path: r.image_path.clone(),
            split: Split::Train,
            seed: r.seed,
            provenance: r.mode.provenance(),
            t0: Some(r.t0),
            guide_index: Some(r.guide_index),
        })
        .collect();
    m
}

/// Emits `GIS(guide_k, t0, c, r_i)` for `i = 1..=N` with `k = i mod |guides|`
/// and `r_i = seed_base + i` into `out_dir`, skipping records whose image and
/// record line already exist. Progress is saved after every batch.
pub fn build_aug_set<D: Denoiser>(
    model: &D,
    vocab: &Vocabulary,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    out_dir: &Path,
) -> Result<AugSet> {
    spec.validate()?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut done: BTreeMap<usize, AugmentationRecord> = BTreeMap::new();
    for r in load_records(&records_path)? {
        let want = (1..=spec.n_samples).contains(&r.index).then(|| spec.record(r.index));
        if want.as_ref() == Some(&r) && out_dir.join(&r.image_path).exists() {
            done.insert(r.index, r);
        }
    }
    let todo: Vec<AugmentationRecord> = (1..=spec.n_samples)
        .filter(|i| !done.contains_key(i))
        .map(|i| spec.record(i))
        .collect();
    let mut guides: BTreeMap<usize, ImageTensor> = BTreeMap::new();
    let mut generated = 0;
    for chunk in todo.chunks(GENERATION_BATCH) {
        for r in chunk {
            if let std::collections::btree_map::Entry::Vacant(v) = guides.entry(r.guide_index) {
                let img = spec.guide_manifest.load_image(r.guide_index).map_err(|e| {
                    Error::Io {
                        path: spec.guide_manifest.resolve(&spec.guide_manifest.entries[r.guide_index]),
                        source: std::io::Error::other(format!("guide for record {}: {e}", r.index)),
                    }
                })?;
                v.insert(img);
            }
        }
        let jobs: Vec<(&ImageTensor, u64)> = chunk.iter().map(|r| (&guides[&r.guide_index], r.seed)).collect();
        let images = gis_batch(model, vocab, &jobs, spec.t0, &spec.prompt, sched)?;
        for (r, img) in chunk.iter().zip(images) {
            img.save_png(&out_dir.join(&r.image_path))?;
            done.insert(r.index, r.clone());
        }
        generated += chunk.len();
        save_records(&records_path, &done)?;
        log::debug!("{} aug t0={}: {}/{}", spec.mode.as_str(), spec.t0, done.len(), spec.n_samples);
    }
    if todo.is_empty() && !records_path.exists() {
        save_records(&records_path, &done)?;
    }
    let records: Vec<AugmentationRecord> = done.into_values().collect();
    let manifest = records_manifest(&records, out_dir);
    manifest.validate()?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(AugSet {
        records,
        manifest,
        generated,
    })
}

fn common_ancestor(paths: &[PathBuf]) -> PathBuf {
    let mut iter = paths.iter();
    let Some(first) = iter.next() else {
        return PathBuf::new();
    };
    let mut common: Vec<Component> = first.components().collect();
    for p in iter {
        let n = common
            .iter()
            .zip(p.components())
            .take_while(|(a, b)| **a == *b)
            .count();
        common.truncate(n);
    }
    common.iter().collect()
}

/// `T⁺ = T ∪ ⋃ self sets ∪ ⋃ cross sets`, rooted at the deepest common directory.
pub fn assemble_target_set(
    style: &DatasetManifest,
    self_sets: &[DatasetManifest],
    cross_sets: &[DatasetManifest],
) -> Result<DatasetManifest> {
    let parts: Vec<&DatasetManifest> = std::iter::once(style).chain(self_sets).chain(cross_sets).collect();
    let roots: Vec<PathBuf> = parts.iter().map(|m| absolute(&m.root)).collect();
    let root = common_ancestor(&roots);
    let mut out = DatasetManifest::new(&root);
    let mut seen = HashSet::new();
    for (part, part_root) in parts.iter().zip(&roots) {
        let mut part = (*part).clone();
        part.root = part_root.clone();
        for e in part.rebased(&root).entries {
            if !seen.insert(root.join(&e.image_path)) {
                return Err(Error::Integrity(format!(
                    "image {} appears in more than one input set",
                    e.image_path.display()
                )));
            }
            out.entries.push(e);
        }
    }
    out.validate()?;
    Ok(out)
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}
