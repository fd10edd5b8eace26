//! One JSON file configures a whole experiment. Every field has a desk-scale
//! default; where the original full-scale setup used a different value it is
//! noted beside the field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SUPPORTED_SIZES;
use crate::error::{Error, Result};
use crate::guidance::GuidanceMode;
use crate::metrics::ExtractorTraining;
use crate::translator::TranslatorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    /// Full scale: 256.
    pub resolution: usize,
    /// Reverse-diffusion steps of the sampler.
    pub n_steps: usize,
    pub data: DataConfig,
    pub diffusion: DiffusionSettings,
    pub inversion: InversionSettings,
    pub augment: AugmentSettings,
    pub translator: TranslatorSettings,
    pub metrics: MetricSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source faces for translator training and cross-augmentation guides.
    /// Full scale: 10000 guides drawn from FFHQ.
    pub n_source: usize,
    pub n_style: usize,
    /// Full scale: 500 test faces.
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    /// Faces in the captioned pretraining corpus; each appears once per corpus style.
    pub corpus_faces: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub ema_decay: f32,
    pub base_channels: usize,
    /// Token embedding width, shared by vocabulary and denoiser conditioning.
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSettings {
    /// Learnable vectors behind the placeholder token. Full scale: 8.
    pub m: usize,
    /// Batch size is 1, as at full scale.
    pub iters: usize,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSettings {
    /// Guidance factors for self augmentation. Full scale: {0.8}.
    pub self_t0: Vec<f64>,
    /// Samples per self factor. Full scale: 10000.
    pub self_samples: usize,
    /// Guidance factors for cross augmentation. Full scale: {0.6, 0.7, 0.8, 0.9}.
    pub cross_t0: Vec<f64>,
    /// Samples per cross factor. Full scale: 10000.
    pub cross_samples: usize,
    /// Augmented images added to the style set; `None` uses all of them.
    /// Full scale: 50000.
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorSettings {
    pub model: TranslatorConfig,
    /// Full scale: 150000.
    pub iters: usize,
    /// Full scale: 4.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub name: String,
    pub mode: GuidanceMode,
    pub t0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Samples per FID reference set.
    pub reference_size: usize,
    /// Guided reference sets; an oracle-style reference is always added.
    pub references: Vec<ReferenceSpec>,
    pub extractor: ExtractorTraining,
    /// Test faces shown in each evaluation's contact sheet.
    pub gallery_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            root_seed: 0,
            resolution: 32,
            n_steps: 100,
            data: DataConfig::default(),
            diffusion: DiffusionSettings::default(),
            inversion: InversionSettings::default(),
            augment: AugmentSettings::default(),
            translator: TranslatorSettings::default(),
            metrics: MetricSettings::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_source: 1000,
            n_style: 150,
            n_test: 100,
        }
    }
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        DiffusionSettings {
            corpus_faces: 600,
            steps: 6000,
            batch: 16,
            lr: 2e-3,
            ema_decay: 0.999,
            base_channels: 16,
            embed_dim: 16,
        }
    }
}

impl Default for InversionSettings {
    fn default() -> Self {
        InversionSettings {
            m: 4,
            iters: 5000,
            lr: 1.0,
        }
    }
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            self_t0: vec![0.8],
            self_samples: 1000,
            cross_t0: vec![0.6, 0.7, 0.8, 0.9],
            cross_samples: 1000,
            k: None,
        }
    }
}

impl Default for TranslatorSettings {
    fn default() -> Self {
        TranslatorSettings {
            model: TranslatorConfig::default(),
            iters: 2000,
            batch: 4,
        }
    }
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            name: "FID-S-0.6".into(),
            mode: GuidanceMode::SelfGuided,
            t0: 0.6,
        }
    }
}

impl Default for MetricSettings {
    fn default() -> Self {
        let r = |name: &str, mode, t0| ReferenceSpec {
            name: name.into(),
            mode,
            t0,
        };
        MetricSettings {
            reference_size: 1000,
            references: vec![
                r("FID-S-0.6", GuidanceMode::SelfGuided, 0.6),
                r("FID-S-0.8", GuidanceMode::SelfGuided, 0.8),
                r("FID-C-0.8", GuidanceMode::Cross, 0.8),
            ],
            extractor: ExtractorTraining::default(),
            gallery_size: 8,
        }
    }
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {msg}")))
    }
}

fn check_factors(field: &str, t0s: &[f64]) -> Result<()> {
    for &t in t0s {
        check(t > 0.0 && t <= 1.0, field, &format!("guidance factor {t} outside (0, 1]"))?;
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field against the preconditions of the stage that consumes it.
    pub fn validate(&self) -> Result<()> {
        check(
            SUPPORTED_SIZES.contains(&self.resolution),
            "resolution",
            &format!("must be one of {SUPPORTED_SIZES:?}"),
        )?;
        check(self.n_steps >= 1, "n_steps", "must be at least 1")?;
        let d = &self.data;
        check(d.n_source >= 1, "data.n_source", "must be at least 1")?;
        check(d.n_style >= 1, "data.n_style", "must be at least 1")?;
        check(d.n_test >= 2, "data.n_test", "must be at least 2")?;
        check(
            (d.n_source as u64) < crate::datagen::STYLE_SEED_OFFSET,
            "data.n_source",
            "exceeds the source seed pool",
        )?;
        let f = &self.diffusion;
        check(f.corpus_faces >= 1, "diffusion.corpus_faces", "must be at least 1")?;
        check(f.batch >= 1, "diffusion.batch", "must be at least 1")?;
        check(f.lr > 0.0 && f.lr.is_finite(), "diffusion.lr", "must be positive")?;
        check((0.0..1.0).contains(&f.ema_decay), "diffusion.ema_decay", "must lie in [0, 1)")?;
        check(f.base_channels >= 1, "diffusion.base_channels", "must be at least 1")?;
        check(f.embed_dim >= 1, "diffusion.embed_dim", "must be at least 1")?;
        let i = &self.inversion;
        check(i.m >= 1, "inversion.m", "must be at least 1")?;
        check(i.lr > 0.0 && i.lr.is_finite(), "inversion.lr", "must be positive")?;
        let a = &self.augment;
        check_factors("augment.self_t0", &a.self_t0)?;
        check_factors("augment.cross_t0", &a.cross_t0)?;
        check(
            a.self_t0.is_empty() || a.self_samples >= 1,
            "augment.self_samples",
            "must be at least 1",
        )?;
        check(
            a.cross_t0.is_empty() || a.cross_samples >= 1,
            "augment.cross_samples",
            "must be at least 1",
        )?;
        let stride = crate::pipeline::POOL_SEED_STRIDE;
        check(
            a.self_samples < stride as usize && a.cross_samples < stride as usize,
            "augment",
            &format!("at most {} samples per guidance factor", stride - 1),
        )?;
        check(
            ((a.self_t0.len() + a.cross_t0.len()) as u64) * stride <= crate::datagen::REFERENCE_SEED_OFFSET,
            "augment",
            "too many guidance factors for the seed layout",
        )?;
        let t = &self.translator;
        t.model.validate()?;
        check(
            t.model.resolution == self.resolution,
            "translator.model.resolution",
            "must equal resolution",
        )?;
        check(t.batch >= 1, "translator.batch", "must be at least 1")?;
        let m = &self.metrics;
        check(m.reference_size >= 2, "metrics.reference_size", "must be at least 2")?;
        for r in &m.references {
            check_factors("metrics.references", &[r.t0])?;
            check(!r.name.is_empty(), "metrics.references", "names must be non-empty")?;
        }
        check(m.extractor.resolution == self.resolution, "metrics.extractor.resolution", "must equal resolution")?;
        check(m.extractor.n_images >= 1 && m.extractor.batch >= 1, "metrics.extractor", "needs images and a batch")?;
        Ok(())
    }

    /// Total augmented images the configuration generates.
    pub fn augmentation_pool(&self) -> usize {
        self.augment.self_t0.len() * self.augment.self_samples + self.augment.cross_t0.len() * self.augment.cross_samples
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.augmentation_pool(), 5000);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"root_seed": 7, "data": {"n_style": 20}}"#).unwrap();
        assert_eq!(c.root_seed, 7);
        assert_eq!(c.data.n_style, 20);
        assert_eq!(c.data.n_source, DataConfig::default().n_source);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"resolutoin": 32}"#).is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.resolution = 48;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("resolution"), "{e}");

        let mut c = ExperimentConfig::default();
        c.augment.cross_t0 = vec![0.6, 1.5];
        assert!(c.validate().unwrap_err().to_string().contains("augment.cross_t0"));

        let mut c = ExperimentConfig::default();
        c.data.n_test = 0;
        assert!(c.validate().unwrap_err().to_string().contains("data.n_test"));
    }

    #[test]
    fn pools_must_fit_their_seed_ranges() {
        let mut c = ExperimentConfig::default();
        c.augment.self_samples = crate::pipeline::POOL_SEED_STRIDE as usize;
        assert!(c.validate().unwrap_err().to_string().contains("augment"));
        c.augment.self_samples = crate::pipeline::POOL_SEED_STRIDE as usize - 1;
        c.validate().unwrap();
    }
}
