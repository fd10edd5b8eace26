//! End-to-end orchestration over a run directory.
//!
//! Layout under the run root:
//!
//! ```text
//! config.json          copy of the experiment config
//! data/                source/style/test images and manifest.jsonl
//! checkpoints/         denoiser, extractor and one translator per variant
//! embeddings/          learned placeholder vectors
//! aug/<mode>_<t0>/     augmentation records, manifest and images
//! metrics/             one evaluation per variant, reference caches, ablation tables
//! gallery/             (input, output, oracle) contact sheets
//! logs/                loss trajectories and timings per stage
//! ```
//!
//! Every stage skips work whose artifact already exists, so an interrupted run
//! resumes at stage granularity (augmentation resumes per image).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ReferenceSpec};
use crate::datagen::{apply_corpus_style, apply_style_oracle, build_datasets, gen_source_image, CORPUS_SEED_OFFSET, CORPUS_STYLES, REFERENCE_SEED_OFFSET};
use crate::diffusion::{scaled_linear_schedule, train_denoiser, CaptionedImage, DenoiserConfig, NoiseSchedule, TrainDenoiserOptions, UNetDenoiser};
use crate::error::{Error, Result};
use crate::guidance::{assemble_target_set, build_aug_set, GuidanceMode, GuidanceSpec};
use crate::image::{contact_sheet, ImageTensor};
use crate::inversion::{invert_style, InversionOptions, LearnedEmbedding, PromptTemplateSet, Vocabulary};
use crate::manifest::{write_atomic, DatasetManifest, Provenance, Split};
use crate::metrics::{build_fid_reference, evaluate_images, oracle_reference, FeatureExtractor, GaussianStats, MetricReport};
use crate::translator::{train_translator, Generator, Stylizer, TrainTranslatorOptions};

pub const ORACLE_REFERENCE: &str = "FID-oracle";

/// Augmentation pool `j` draws its chain seeds from `root + j·POOL_SEED_STRIDE + i`,
/// so pools never share noise.
pub const POOL_SEED_STRIDE: u64 = 100_000;

/// Captioned images for denoiser pretraining: every corpus face rendered in every
/// corpus style, captioned from the template set with the style word filled in.
pub fn captioned_corpus(vocab: &Vocabulary, n_faces: usize, root_seed: u64, size: usize) -> Result<Vec<CaptionedImage>> {
    let templates = PromptTemplateSet::default();
    let t = templates.templates();
    let mut out = Vec::with_capacity(n_faces * CORPUS_STYLES.len());
    for j in 0..n_faces {
        let face = gen_source_image(root_seed + CORPUS_SEED_OFFSET + j as u64, size)?;
        for (si, style) in CORPUS_STYLES.iter().enumerate() {
            let prompt = PromptTemplateSet::fill(&t[(j + si) % t.len()], style);
            out.push(CaptionedImage {
                image: apply_corpus_style(&face, style)?,
                cond: vocab.encode_prompt(&prompt)?,
            });
        }
    }
    Ok(out)
}

/// One translator to train and evaluate: which augmentation pools feed the
/// target set and how many augmented images to draw from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// Augmented images added to the style set; `None` takes the whole selected pool.
    pub k: Option<usize>,
    pub use_self: bool,
    pub use_cross: bool,
    /// Restricts cross augmentation to these factors; `None` keeps all configured ones.
    pub cross_t0: Option<Vec<f64>>,
    /// Added to the root seed for translator initialization and sampling.
    pub seed_offset: u64,
}

impl Variant {
    pub fn combined(name: &str, k: Option<usize>) -> Self {
        Variant {
            name: name.into(),
            k,
            use_self: true,
            use_cross: true,
            cross_t0: None,
            seed_offset: 0,
        }
    }

    pub fn with_seed(mut self, offset: u64) -> Self {
        self.seed_offset = offset;
        if offset != 0 {
            self.name = format!("{}_s{offset}", self.name);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    AugSize,
    SelfVsCross,
    GuidanceFactors,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aug_size" => Ok(Preset::AugSize),
            "self_vs_cross" => Ok(Preset::SelfVsCross),
            "guidance_factors" => Ok(Preset::GuidanceFactors),
            other => Err(Error::Config(format!(
                "preset: unknown {other:?}; expected aug_size, self_vs_cross or guidance_factors"
            ))),
        }
    }
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::AugSize => "aug_size",
            Preset::SelfVsCross => "self_vs_cross",
            Preset::GuidanceFactors => "guidance_factors",
        }
    }

    pub fn variants(self, cfg: &ExperimentConfig) -> Vec<Variant> {
        match self {
            Preset::AugSize => {
                let pool = cfg.augmentation_pool();
                [0, 250, 1000, 5000]
                    .into_iter()
                    .filter(|&k| k <= pool)
                    .map(|k| Variant::combined(&format!("k{k}"), Some(k)))
                    .collect()
            }
            Preset::SelfVsCross => vec![
                Variant {
                    use_cross: false,
                    ..Variant::combined("self_only", None)
                },
                Variant {
                    use_self: false,
                    ..Variant::combined("cross_only", None)
                },
                Variant::combined("combined", None),
            ],
            Preset::GuidanceFactors => {
                let pick = |name: &str, lo: f64, hi: f64| Variant {
                    cross_t0: Some(
                        cfg.augment
                            .cross_t0
                            .iter()
                            .copied()
                            .filter(|t| (lo..=hi).contains(t))
                            .collect(),
                    ),
                    ..Variant::combined(name, None)
                };
                vec![
                    pick("cross_low", 0.0, 0.75),
                    pick("cross_high", 0.75, 1.0),
                    Variant::combined("combined", None),
                ]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugPool {
    pub mode: GuidanceMode,
    pub t0: f64,
    pub manifest: DatasetManifest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvaluationRecord {
    generator_hash: String,
    report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Augmented images in the variant's target set.
    pub n_augmented: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub preset: String,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "| variant | K | LPIPS |");
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push('\n');
        s.push_str(&"|---".repeat(3 + self.columns.len()));
        s.push_str("|\n");
        for r in &self.rows {
            let _ = write!(s, "| {} | {} | {:.4} |", r.variant, r.n_augmented, r.report.mean_lpips);
            for c in &self.columns {
                match r.report.fid_by_reference.get(c) {
                    Some(v) => {
                        let _ = write!(s, " {v:.4} |");
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// A small line chart of one metric across variants.
pub fn trend_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, h, pad) = (480.0, 260.0, 40.0);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let pt = |i: usize, v: f64| {
        let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
        let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
        (x, y)
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"13\">{title}</text>\n"
    );
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (x, y) = pt(i, v);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#2a6fb0\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let (x, y) = pt(i, v);
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"#2a6fb0\"/>");
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>", y - 8.0);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>", h - 12.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizeSummary {
    pub written: usize,
    pub failed: usize,
    pub images_per_sec: f64,
}

/// Stylizes every PNG in `in_dir` into `out_dir` under the same file name.
/// Unreadable files are logged and counted, not fatal.
pub fn stylize_dir<S: Stylizer + ?Sized>(stylizer: &S, in_dir: &Path, out_dir: &Path) -> Result<StylizeSummary> {
    let mut names: Vec<PathBuf> = fs::read_dir(in_dir)
        .map_err(|e| Error::io(in_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut inputs = Vec::new();
    let mut kept = Vec::new();
    let mut failed = 0;
    for p in &names {
        match ImageTensor::load_png(p) {
            Ok(img) => {
                inputs.push(img);
                kept.push(p);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                failed += 1;
            }
        }
    }
    let start = Instant::now();
    let outputs = stylizer.stylize_batch(&inputs)?;
    let secs = start.elapsed().as_secs_f64();
    for (p, img) in kept.iter().zip(&outputs) {
        img.save_png(&out_dir.join(p.file_name().expect("file path")))?;
    }
    Ok(StylizeSummary {
        written: outputs.len(),
        failed,
        images_per_sec: if secs > 0.0 { outputs.len() as f64 / secs } else { 0.0 },
    })
}

/// Median images per second of `stylize_batch` over `reps` timed passes.
pub fn stylize_throughput<S: Stylizer + ?Sized>(stylizer: &S, inputs: &[ImageTensor], reps: usize) -> Result<f64> {
    let mut rates = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        stylizer.stylize_batch(inputs)?;
        rates.push(inputs.len() as f64 / start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(crate::metrics::median(&rates))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    root: PathBuf,
}

impl Pipeline {
    /// Validates `cfg` and prepares the run directory. A directory created with a
    /// different config is refused.
    pub fn open(cfg: ExperimentConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        for sub in ["data", "checkpoints", "embeddings", "aug", "metrics", "gallery", "logs"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let cfg_path = root.join("config.json");
        if cfg_path.exists() {
            let existing = ExperimentConfig::load(&cfg_path)?;
            if existing != cfg {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration",
                    root.display()
                )));
            }
        } else {
            write_atomic(&cfg_path, cfg.to_json().as_bytes())?;
        }
        Ok(Pipeline {
            cfg,
            root: root.to_path_buf(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn denoiser_path(&self) -> PathBuf {
        self.path("checkpoints/denoiser.ckpt")
    }

    pub fn translator_path(&self, variant: &Variant) -> PathBuf {
        self.path(&format!("checkpoints/translator_{}.ckpt", variant.name))
    }

    fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        f().map_err(|e| e.in_stage(name))
    }

    pub fn datagen(&self) -> Result<DatasetManifest> {
        Self::stage("datagen", || {
            let d = &self.cfg.data;
            build_datasets(d.n_source, d.n_style, d.n_test, self.cfg.root_seed, self.cfg.resolution, &self.path("data"))
        })
    }

    fn data(&self) -> Result<DatasetManifest> {
        let p = self.path("data/manifest.jsonl");
        if p.exists() {
            DatasetManifest::load(&p)
        } else {
            self.datagen()
        }
    }

    pub fn source_train(&self) -> Result<DatasetManifest> {
        Ok(self.data()?.filter(|e| e.provenance == Provenance::Source && e.split == Split::Train))
    }

    pub fn style_set(&self) -> Result<DatasetManifest> {
        Ok(self.data()?.filter(|e| e.provenance == Provenance::Style))
    }

    pub fn test_set(&self) -> Result<DatasetManifest> {
        Ok(self.data()?.filter(|e| e.split == Split::Test))
    }

    /// The base vocabulary (placeholder slots at their initial values).
    pub fn base_vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::standard(self.cfg.diffusion.embed_dim, self.cfg.inversion.m, self.cfg.root_seed)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        scaled_linear_schedule(self.cfg.n_steps)
    }

    pub fn train_diffusion(&self) -> Result<(UNetDenoiser, NoiseSchedule)> {
        Self::stage("train-diffusion", || {
            let path = self.denoiser_path();
            if path.exists() {
                let (mut m, sched) = UNetDenoiser::load(&path)?;
                m.freeze();
                return Ok((m, sched));
            }
            let f = &self.cfg.diffusion;
            let vocab = self.base_vocabulary()?;
            let corpus = captioned_corpus(&vocab, f.corpus_faces, self.cfg.root_seed, self.cfg.resolution)?;
            let sched = self.schedule()?;
            let mut model = UNetDenoiser::new(
                DenoiserConfig {
                    resolution: self.cfg.resolution,
                    base_channels: f.base_channels,
                    cond_dim: f.embed_dim,
                    ..DenoiserConfig::default()
                },
                self.cfg.root_seed,
            );
            let start = Instant::now();
            let losses = train_denoiser(
                &mut model,
                &corpus,
                &sched,
                &TrainDenoiserOptions {
                    steps: f.steps,
                    batch: f.batch,
                    lr: f.lr,
                    seed: self.cfg.root_seed,
                    ema_decay: f.ema_decay,
                },
            )?;
            write_json(
                &self.path("logs/diffusion.json"),
                &serde_json::json!({ "losses": losses, "seconds": start.elapsed().as_secs_f64() }),
            )?;
            model.freeze();
            model.save(&path, &sched)?;
            Ok((model, sched))
        })
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        Self::stage("extractor", || {
            let path = self.path("checkpoints/extractor.ckpt");
            if path.exists() {
                return FeatureExtractor::load(&path);
            }
            let opts = crate::metrics::ExtractorTraining {
                seed: self.cfg.root_seed,
                ..self.cfg.metrics.extractor.clone()
            };
            let (ext, losses) = FeatureExtractor::pretrain(&opts)?;
            write_json(&self.path("logs/extractor.json"), &serde_json::json!({ "losses": losses }))?;
            ext.save(&path)?;
            Ok(ext)
        })
    }

    /// Vocabulary with the learned style vectors in place.
    pub fn invert(&self) -> Result<Vocabulary> {
        let (model, sched) = self.train_diffusion()?;
        Self::stage("invert", || {
            let path = self.path("embeddings/style_token.json");
            let mut vocab = self.base_vocabulary()?;
            if path.exists() {
                vocab.apply_learned(&LearnedEmbedding::load(&path)?)?;
                return Ok(vocab);
            }
            let style = self.style_set()?.load_all()?;
            let i = &self.cfg.inversion;
            let out = invert_style(
                &model,
                &vocab,
                &style,
                &PromptTemplateSet::default(),
                &sched,
                &InversionOptions {
                    iters: i.iters,
                    lr: i.lr,
                    seed: self.cfg.root_seed,
                },
            )?;
            write_json(&self.path("logs/inversion.json"), &serde_json::json!({ "losses": out.losses }))?;
            out.vocab.learned().save(&path)?;
            Ok(out.vocab)
        })
    }

    /// Builds (or resumes) every configured self and cross augmentation set.
    pub fn augment(&self) -> Result<Vec<AugPool>> {
        let (model, sched) = self.train_diffusion()?;
        let vocab = self.invert()?;
        Self::stage("augment", || {
            let style = self.style_set()?;
            let source = self.source_train()?;
            let a = &self.cfg.augment;
            let jobs = a
                .self_t0
                .iter()
                .map(|&t| (GuidanceMode::SelfGuided, t, a.self_samples, &style))
                .chain(a.cross_t0.iter().map(|&t| (GuidanceMode::Cross, t, a.cross_samples, &source)));
            let mut pools = Vec::new();
            let mut generated = 0;
            let start = Instant::now();
            for (j, (mode, t0, n, guides)) in jobs.enumerate() {
                let mut spec = GuidanceSpec::new(mode, t0, n, guides.clone());
                spec.seed_base = self.cfg.root_seed + j as u64 * POOL_SEED_STRIDE;
                let dir = self.path(&format!("aug/{}_{t0:.2}", mode.as_str()));
                let set = build_aug_set(&model, &vocab, &spec, &sched, &dir)?;
                generated += set.generated;
                pools.push(AugPool {
                    mode,
                    t0,
                    manifest: set.manifest,
                });
            }
            if generated > 0 {
                let per_image = start.elapsed().as_secs_f64() / generated as f64;
                let log_path = self.path("logs/augment.json");
                if !log_path.exists() {
                    write_json(
                        &log_path,
                        &serde_json::json!({ "generated": generated, "gis_seconds_per_image": per_image }),
                    )?;
                }
            }
            Ok(pools)
        })
    }

    /// Seeds used by augmentation training sets; reference sets must avoid them.
    fn training_seeds(pools: &[AugPool]) -> HashSet<u64> {
        pools.iter().flat_map(|p| p.manifest.seeds()).collect()
    }

    /// `T ∪ A_K`: the style set plus the first `K` images of a fixed permutation of
    /// the variant's augmentation pool. Smaller `K` gives a prefix of larger `K`.
    pub fn target_set(&self, variant: &Variant, pools: &[AugPool]) -> Result<DatasetManifest> {
        let style = self.style_set()?;
        let keep_cross = |t0: f64| {
            variant
                .cross_t0
                .as_ref()
                .is_none_or(|ts| ts.iter().any(|&t| (t - t0).abs() < 1e-9))
        };
        let self_sets: Vec<DatasetManifest> = pools
            .iter()
            .filter(|p| variant.use_self && p.mode == GuidanceMode::SelfGuided)
            .map(|p| p.manifest.clone())
            .collect();
        let cross_sets: Vec<DatasetManifest> = pools
            .iter()
            .filter(|p| variant.use_cross && p.mode == GuidanceMode::Cross && keep_cross(p.t0))
            .map(|p| p.manifest.clone())
            .collect();
        let full = assemble_target_set(&style, &self_sets, &cross_sets)?;
        let (orig, mut aug): (Vec<_>, Vec<_>) = full.entries.into_iter().partition(|e| !e.provenance.is_augmented());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.root_seed ^ 0x5eed_a065);
        aug.shuffle(&mut rng);
        if let Some(k) = variant.k {
            if k > aug.len() {
                return Err(Error::Config(format!(
                    "k = {k} exceeds the {} augmented images available to variant {}",
                    aug.len(),
                    variant.name
                )));
            }
            aug.truncate(k);
        }
        let mut out = DatasetManifest::new(&full.root);
        out.entries = orig.into_iter().chain(aug).collect();
        Ok(out)
    }

    pub fn train_translator(&self, variant: &Variant) -> Result<Generator> {
        let pools = if variant.k == Some(0) { Vec::new() } else { self.augment()? };
        Self::stage("train-translator", || {
            let path = self.translator_path(variant);
            if path.exists() {
                return Generator::load(&path);
            }
            let target = self.target_set(variant, &pools)?;
            target.save(&self.path(&format!("logs/target_{}.jsonl", variant.name)))?;
            let target_imgs = target.load_all()?;
            let source = self.source_train()?.load_all()?;
            let t = &self.cfg.translator;
            let start = Instant::now();
            let trained = train_translator(
                &t.model,
                &source,
                &target_imgs,
                &TrainTranslatorOptions {
                    iters: t.iters,
                    batch: t.batch,
                    seed: self.cfg.root_seed + variant.seed_offset,
                    checkpoint_every: 0,
                },
                None,
            )?;
            let log = &trained.log;
            write_json(
                &self.path(&format!("logs/translator_{}.json", variant.name)),
                &serde_json::json!({
                    "seconds": start.elapsed().as_secs_f64(),
                    "n_target": target_imgs.len(),
                    "loss_d": log.loss_d,
                    "loss_g_adv": log.loss_g_adv,
                    "loss_nce": log.loss_nce,
                    "loss_nce_idt": log.loss_nce_idt,
                }),
            )?;
            trained.generator.save(&path, t.iters)?;
            Ok(trained.generator)
        })
    }

    /// FID reference statistics by name, always including the oracle-style set.
    pub fn references(&self, ext: &FeatureExtractor) -> Result<Vec<(String, GaussianStats)>> {
        let m = &self.cfg.metrics;
        let mut out = vec![(
            ORACLE_REFERENCE.to_string(),
            oracle_reference(ext, self.cfg.root_seed, m.reference_size, self.cfg.resolution)?,
        )];
        if m.references.is_empty() {
            return Ok(out);
        }
        let (model, sched) = self.train_diffusion()?;
        let vocab = self.invert()?;
        let pools = self.augment()?;
        let training = Self::training_seeds(&pools);
        let cache = self.path("metrics/refs");
        fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
        for ReferenceSpec { name, mode, t0 } in &m.references {
            let guides = match mode {
                GuidanceMode::SelfGuided => self.style_set()?,
                GuidanceMode::Cross => self.source_train()?,
            };
            let mut spec = GuidanceSpec::new(*mode, *t0, m.reference_size, guides);
            spec.seed_base = self.cfg.root_seed + REFERENCE_SEED_OFFSET;
            let stats = build_fid_reference(&model, &vocab, &spec, &sched, ext, &training, Some(&cache))?;
            out.push((name.clone(), stats));
        }
        Ok(out)
    }

    pub fn evaluate(&self, variant: &Variant) -> Result<MetricReport> {
        let gen = self.train_translator(variant)?;
        let ext = self.extractor()?;
        Self::stage("evaluate", || {
            let path = self.path(&format!("metrics/{}.json", variant.name));
            let gen_hash = gen.param_hash();
            if let Ok(rec) = read_json::<EvaluationRecord>(&path) {
                if rec.generator_hash == gen_hash {
                    return Ok(rec.report);
                }
            }
            let refs = self.references(&ext)?;
            let inputs = self.test_set()?.load_all()?;
            let (report, outputs) = evaluate_images(&gen, &inputs, &refs, &ext)?;
            let g = self.cfg.metrics.gallery_size.min(inputs.len());
            if g > 0 {
                let rows = vec![
                    inputs[..g].to_vec(),
                    outputs[..g].to_vec(),
                    inputs[..g].iter().map(apply_style_oracle).collect(),
                ];
                if let Some(sheet) = contact_sheet(&rows) {
                    sheet.save_png(&self.path(&format!("gallery/{}.png", variant.name)))?;
                }
            }
            let ips = stylize_throughput(&gen, &inputs, 3)?;
            write_json(
                &self.path(&format!("logs/evaluate_{}.json", variant.name)),
                &serde_json::json!({ "stylize_images_per_sec": ips }),
            )?;
            write_json(
                &path,
                &EvaluationRecord {
                    generator_hash: gen_hash,
                    report: report.clone(),
                },
            )?;
            Ok(report)
        })
    }

    /// The variant `pipeline` trains: everything, or `K` images when configured.
    pub fn default_variant(&self) -> Variant {
        match self.cfg.augment.k {
            Some(k) => Variant::combined(&format!("k{k}"), Some(k)),
            None => Variant::combined("ours", None),
        }
    }

    /// datagen → train-diffusion → invert → augment → train-translator → evaluate.
    pub fn run(&self) -> Result<MetricReport> {
        self.datagen()?;
        let v = self.default_variant();
        self.evaluate(&v)
    }

    pub fn ablate(&self, preset: Preset) -> Result<AblationTable> {
        self.datagen()?;
        let variants = preset.variants(&self.cfg);
        let pools = self.augment()?;
        let mut rows = Vec::new();
        for v in &variants {
            let n_aug = self.target_set(v, &pools)?.entries.iter().filter(|e| e.provenance.is_augmented()).count();
            rows.push(AblationRow {
                variant: v.name.clone(),
                n_augmented: n_aug,
                report: self.evaluate(v)?,
            });
        }
        let mut columns: Vec<String> = self.cfg.metrics.references.iter().map(|r| r.name.clone()).collect();
        columns.push(ORACLE_REFERENCE.into());
        let table = AblationTable {
            preset: preset.as_str().into(),
            columns,
            rows,
        };
        let stem = format!("metrics/ablation_{}", preset.as_str());
        write_json(&self.path(&format!("{stem}.json")), &table)?;
        write_atomic(&self.path(&format!("{stem}.md")), table.to_markdown().as_bytes())?;
        let labels: Vec<String> = table.rows.iter().map(|r| r.variant.clone()).collect();
        let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        series.insert("LPIPS".into(), table.rows.iter().map(|r| r.report.mean_lpips).collect());
        for c in &table.columns {
            let vals = table.rows.iter().map(|r| r.report.fid_by_reference.get(c).copied().unwrap_or(f64::NAN));
            series.insert(c.clone(), vals.collect());
        }
        for (name, vals) in series {
            let svg = trend_svg(&format!("{name} ({})", preset.as_str()), &labels, &vals);
            write_atomic(&self.path(&format!("{stem}_{name}.svg")), svg.as_bytes())?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_count() {
        let cfg = ExperimentConfig::default();
        assert_eq!(Preset::from_str("self_vs_cross").unwrap().variants(&cfg).len(), 3);
        let ks: Vec<_> = Preset::AugSize.variants(&cfg).iter().map(|v| v.k).collect();
        assert_eq!(ks, vec![Some(0), Some(250), Some(1000), Some(5000)]);
        let g = Preset::GuidanceFactors.variants(&cfg);
        assert_eq!(g[0].cross_t0, Some(vec![0.6, 0.7]));
        assert_eq!(g[1].cross_t0, Some(vec![0.8, 0.9]));
        assert!(matches!(Preset::from_str("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn markdown_table_has_one_row_per_variant() {
        let mut fid = BTreeMap::new();
        fid.insert("FID-oracle".to_string(), 1.5);
        let report = MetricReport {
            fid_by_reference: fid,
            mean_lpips: 0.25,
            median_lpips: 0.2,
            median_oracle_distance: 0.1,
            n_eval: 4,
            extractor_hash: "x".into(),
        };
        let t = AblationTable {
            preset: "aug_size".into(),
            columns: vec!["FID-S-0.6".into(), "FID-oracle".into()],
            rows: vec![
                AblationRow { variant: "k0".into(), n_augmented: 0, report: report.clone() },
                AblationRow { variant: "k250".into(), n_augmented: 250, report },
            ],
        };
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| k250 | 250 | 0.2500 | - | 1.5000 |"));
        let svg = trend_svg("LPIPS", &["a".into(), "b".into()], &[0.3, 0.2]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn corpus_covers_every_style_once_per_face() {
        let vocab = Vocabulary::standard(16, 4, 0).unwrap();
        let c = captioned_corpus(&vocab, 3, 0, 32).unwrap();
        assert_eq!(c.len(), 3 * CORPUS_STYLES.len());
        assert_eq!(c[1].image, apply_style_oracle(&c[0].image));
    }
}
