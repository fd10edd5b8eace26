//! `ImageTensor`: an H×W×C image with values in [-1, 1], plus lossless PNG I/O.
//!
//! Pixels are stored on disk as 8-bit RGB. Values produced by the generators in
//! this crate sit on the 8-bit grid `q / 127.5 − 1`, so they round-trip exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, 3, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * self.channels;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn clamp(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// Snaps every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| from_u8(to_u8(v))).collect();
        Self::new(self.height, self.width, self.channels, data)
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.data[(y * w + x) * c + ch] as f32;
                }
            }
        }
        Tensor::from_vec(&[1, c, h, w], out)
    }

    /// Builds an image from sample `index` of an NCHW batch.
    pub fn from_chw(t: &Tensor, index: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        let src = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(y * w + x) * c + ch] = src[ch * h * w + y * w + x] as f64;
                }
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn batch_to_chw(images: &[ImageTensor]) -> Tensor {
        let parts: Vec<Tensor> = images.iter().map(|i| i.to_chw()).collect();
        Tensor::stack(&parts)
    }

    /// Writes an 8-bit RGB PNG via a temporary file, so readers never see a partial image.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        assert_eq!(self.channels, 3, "png writer expects RGB");
        let img_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(img_err)?;
            let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
            writer.write_image_data(&bytes).map_err(img_err)?;
            writer.finish().map_err(img_err)?;
        }
        crate::manifest::write_atomic(path, &buf)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img_err = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| img_err("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| img_err(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(img_err(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let data: Vec<f64> = match info.color_type {
            png::ColorType::Rgb => bytes.iter().map(|&b| from_u8(b)).collect(),
            png::ColorType::Rgba => bytes
                .chunks(4)
                .flat_map(|p| [from_u8(p[0]), from_u8(p[1]), from_u8(p[2])])
                .collect(),
            png::ColorType::Grayscale => bytes
                .iter()
                .flat_map(|&b| [from_u8(b); 3])
                .collect(),
            other => return Err(img_err(format!("unsupported color type {other:?}"))),
        };
        Ok(Self::new(h, w, 3, data))
    }
}

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

/// Tiles rows of images into one sheet with a 1-pixel dark gutter.
pub fn contact_sheet(rows: &[Vec<ImageTensor>]) -> Option<ImageTensor> {
    let first = rows.first()?.first()?;
    let (h, w) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max()?;
    let sheet_h = rows.len() * (h + 1) + 1;
    let sheet_w = cols * (w + 1) + 1;
    let mut sheet = ImageTensor::filled(sheet_h, sheet_w, [-1.0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    sheet.set_pixel(1 + r * (h + 1) + y, 1 + c * (w + 1) + x, img.pixel(y, x));
                }
            }
        }
    }
    Some(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values_survive_png() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| from_u8((i * 17 % 256) as u8)).collect();
        let img = ImageTensor::new(4, 5, 3, data);
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageTensor::load_png(&p).unwrap(), img);
    }

    #[test]
    fn every_byte_level_round_trips() {
        for q in 0..=255u8 {
            assert_eq!(to_u8(from_u8(q)), q);
        }
    }

    #[test]
    fn chw_layout_inverts() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 32.0).collect();
        let img = ImageTensor::new(2, 3, 3, data);
        assert_eq!(ImageTensor::from_chw(&img.to_chw(), 0), img);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = ImageTensor::load_png(Path::new("/nonexistent/q.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
