//! Procedural stand-ins for a face dataset and a small style set.
//!
//! Faces are flat-shaded ellipses with two eyes and a mouth on a flat
//! background, fully determined by a seed. The style set is produced by a fixed
//! stylizer ([`apply_style_oracle`]) so the target style is known exactly.

use std::f32::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{from_u8, to_u8, ImageTensor};
use crate::manifest::{DatasetManifest, ManifestEntry, Provenance, Split};

pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];

/// Seed offsets that keep the source, style, test, metric-reference and corpus pools disjoint.
pub const STYLE_SEED_OFFSET: u64 = 1_000_000;
pub const TEST_SEED_OFFSET: u64 = 2_000_000;
pub const REFERENCE_SEED_OFFSET: u64 = 3_000_000;
/// Faces behind the captioned denoiser pretraining corpus.
pub const CORPUS_SEED_OFFSET: u64 = 4_000_000;

/// Number of classes in the synthetic attribute task (5 background-hue bins × 2 pose signs).
pub const ATTRIBUTE_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub seed: u64,
    pub head_hue: f32,
    pub bg_hue: f32,
    /// Horizontal eye/mouth shift in pixels.
    pub pose_offset: f32,
    /// Head height as a fraction of image height.
    pub face_scale: f32,
}

impl FaceParams {
    pub fn from_seed(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_shift = size as f32 / 8.0;
        FaceParams {
            seed,
            head_hue: rng.random_range(0.0..TAU),
            bg_hue: rng.random_range(0.0..TAU),
            pose_offset: rng.random_range(-max_shift..=max_shift),
            face_scale: rng.random_range(0.5..=0.9),
        }
    }

    pub fn attribute_label(&self) -> usize {
        let bin = ((self.bg_hue / TAU) * 5.0).floor().clamp(0.0, 4.0) as usize;
        bin * 2 + usize::from(self.pose_offset >= 0.0)
    }
}

fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "resolution {size} unsupported; expected one of {SUPPORTED_SIZES:?}"
        )))
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h / TAU).rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Colour in [0, 1] of the face at continuous position `(px, py)`.
fn shade(p: &FaceParams, size: f32, px: f32, py: f32) -> [f32; 3] {
    let ry = p.face_scale * size / 2.0;
    let rx = 0.78 * ry;
    let cx = size / 2.0 + 0.5 * p.pose_offset;
    let cy = size / 2.0 + 0.04 * size;
    let dx = (px - cx) / rx;
    let dy = (py - cy) / ry;
    if dx * dx + dy * dy > 1.0 {
        return hsv(p.bg_hue, 0.55, 0.75);
    }
    let fx = cx + 0.5 * p.pose_offset;
    let eye_r = (0.16 * rx).max(1.0);
    let eye_y = cy - 0.22 * ry;
    for side in [-1.0, 1.0] {
        let ex = fx + side * 0.38 * rx;
        if (px - ex).powi(2) + (py - eye_y).powi(2) <= eye_r * eye_r {
            return [0.08, 0.08, 0.12];
        }
    }
    let mx = (px - fx) / (0.42 * rx);
    let my = (py - (cy + 0.45 * ry)) / (0.1 * ry).max(0.9);
    if mx * mx + my * my <= 1.0 {
        return [0.55, 0.12, 0.15];
    }
    let v = 0.95 - 0.25 * dy.max(0.0);
    hsv(p.head_hue, 0.45, v)
}

/// Renders the face for `params` with 2×2 supersampling, snapped to the 8-bit grid.
pub fn render_face(params: &FaceParams, size: usize) -> ImageTensor {
    let s = size as f32;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    let c = shade(params, s, x as f32 + sx, y as f32 + sy);
                    for k in 0..3 {
                        acc[k] += c[k] / 4.0;
                    }
                }
            }
            for v in acc {
                data.push(from_u8((v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    ImageTensor::new(size, size, 3, data)
}

pub fn gen_source_image(seed: u64, size: usize) -> Result<ImageTensor> {
    check_size(size)?;
    Ok(render_face(&FaceParams::from_seed(seed, size), size))
}

/// The fixed palette of the target style; index 0 is the ink used for edges.
pub const PALETTE_U8: [[u8; 3]; 8] = [
    [22, 18, 30],
    [246, 228, 192],
    [240, 162, 118],
    [208, 78, 70],
    [46, 150, 146],
    [42, 62, 122],
    [232, 190, 64],
    [132, 172, 108],
];

/// Minimum colour distance (in [-1, 1] RGB units) between neighbouring palette
/// regions that draws an ink edge.
pub const EDGE_THRESHOLD: f64 = 0.9;

pub fn palette() -> [[f64; 3]; 8] {
    PALETTE_U8.map(|c| c.map(from_u8))
}

fn nearest_palette(pal: &[[f64; 3]; 8], px: [f64; 3]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in pal.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (px[k] - c[k]).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Deterministic target stylizer: nearest-colour quantization to [`PALETTE_U8`]
/// plus a one-pixel ink edge wherever the right or lower neighbour belongs to a
/// non-ink region whose colour differs by more than [`EDGE_THRESHOLD`].
///
/// Ink pixels never trigger edges, which makes the map idempotent.
pub fn apply_style_oracle(img: &ImageTensor) -> ImageTensor {
    let pal = palette();
    let (h, w) = (img.height(), img.width());
    let labels: Vec<usize> = (0..h * w)
        .map(|i| nearest_palette(&pal, img.pixel(i / w, i % w)))
        .collect();
    let mut out = ImageTensor::filled(h, w, pal[0]);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let mut edge = false;
            for (ny, nx) in [(y, x + 1), (y + 1, x)] {
                if ny < h && nx < w {
                    let nl = labels[ny * w + nx];
                    if nl != 0 && dist(pal[nl], pal[l]) > EDGE_THRESHOLD {
                        edge = true;
                    }
                }
            }
            if !edge {
                out.set_pixel(y, x, pal[l]);
            }
        }
    }
    out
}

/// Style words of the captioned corpus the denoiser is pretrained on. The
/// corpus stands in for the broad prior of a large text-to-image model, so it
/// includes the target style under its own word ("poster") next to unrelated
/// looks.
pub const CORPUS_STYLES: [&str; 5] = ["photo", "poster", "sketch", "negative", "pastel"];

/// Renders `img` in one of the [`CORPUS_STYLES`].
pub fn apply_corpus_style(img: &ImageTensor, style: &str) -> Result<ImageTensor> {
    let map = |f: &dyn Fn([f64; 3]) -> [f64; 3]| {
        let mut out = img.clone();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let px = f(img.pixel(y, x)).map(|v| from_u8(to_u8(v)));
                out.set_pixel(y, x, px);
            }
        }
        out
    };
    Ok(match style {
        "photo" => img.clone(),
        "poster" => apply_style_oracle(img),
        "sketch" => map(&|p| {
            let lum = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            let level = ((lum + 1.0) / 2.0 * 3.0).round() / 3.0 * 2.0 - 1.0;
            [level; 3]
        }),
        "negative" => map(&|p| p.map(|v| -v)),
        "pastel" => map(&|p| p.map(|v| 0.5 * v + 0.5)),
        other => return Err(Error::Argument(format!("unknown corpus style {other:?}"))),
    })
}

pub fn image_file_name(provenance: Provenance, seed: u64) -> String {
    format!("{}_{seed}.png", provenance.as_str())
}

/// Writes an image unless an identical file is already present.
pub(crate) fn write_if_changed(img: &ImageTensor, path: &Path) -> Result<bool> {
    if path.exists() {
        if let Ok(existing) = ImageTensor::load_png(path) {
            if existing == img.quantized() {
                return Ok(false);
            }
        }
    }
    img.save_png(path)?;
    Ok(true)
}

/// Generates source (train), style (train) and source (test) images under
/// `out_dir/images` and writes `out_dir/manifest.jsonl`.
pub fn build_datasets(
    n_source: usize,
    n_style: usize,
    n_test: usize,
    root_seed: u64,
    size: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    check_size(size)?;
    let mut manifest = DatasetManifest::new(out_dir);
    let groups = [
        (Provenance::Source, Split::Train, 0, n_source),
        (Provenance::Style, Split::Train, STYLE_SEED_OFFSET, n_style),
        (Provenance::Source, Split::Test, TEST_SEED_OFFSET, n_test),
    ];
    for (prov, split, offset, count) in groups {
        for j in 0..count as u64 {
            let seed = root_seed + offset + j;
            let face = gen_source_image(seed, size)?;
            let img = if prov == Provenance::Style {
                apply_style_oracle(&face)
            } else {
                face
            };
            let rel = Path::new("images").join(image_file_name(prov, seed));
            write_if_changed(&img, &out_dir.join(&rel))?;
            manifest.entries.push(ManifestEntry {
                image_path: rel,
                split,
                seed,
                provenance: prov,
                t0: None,
                guide_index: None,
            });
        }
    }
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
