//! Fixtures shared by the benches: untrained models at the desk resolution.
//! Inference cost does not depend on the weights, so no training is needed.

use styleaug_core::datagen::gen_source_image;
use styleaug_core::diffusion::{scaled_linear_schedule, DenoiserConfig, NoiseSchedule, UNetDenoiser};
use styleaug_core::inversion::Vocabulary;
use styleaug_core::translator::{Generator, TranslatorConfig};
use styleaug_core::ImageTensor;

pub const RESOLUTION: usize = 32;
pub const N_STEPS: usize = 100;

pub struct Fixture {
    pub denoiser: UNetDenoiser,
    pub vocab: Vocabulary,
    pub sched: NoiseSchedule,
    pub generator: Generator,
    pub faces: Vec<ImageTensor>,
}

pub fn fixture(n_faces: usize) -> Fixture {
    let denoiser = UNetDenoiser::new(DenoiserConfig::default(), 0);
    let cond_dim = DenoiserConfig::default().cond_dim;
    Fixture {
        denoiser,
        vocab: Vocabulary::standard(cond_dim, 4, 0).expect("vocabulary"),
        sched: scaled_linear_schedule(N_STEPS).expect("schedule"),
        generator: Generator::new(TranslatorConfig::default(), 0).expect("generator"),
        faces: (0..n_faces as u64)
            .map(|s| gen_source_image(s, RESOLUTION).expect("face"))
            .collect(),
    }
}
