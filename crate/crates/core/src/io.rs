//! 8-bit RGB images and their on-disk formats.
//!
//! Two formats are supported, chosen by file extension:
//!
//! * `.png`: 8-bit RGB PNG.
//! * `.rgb`: one line of JSON (`{"format":"rgb8","width":W,"height":H}`)
//!   terminated by `\n`, followed by `W*H*3` interleaved RGB bytes. Meant for
//!   images too large to be practical as PNG.
//!
//! Pixels map to tensor values via `x / 127.5 - 1` and back via
//! `round(clamp((x + 1) * 127.5, 0, 255))`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    format: String,
    width: usize,
    height: usize,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(KinError::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Rgb8Image {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Rgb8Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[1, 3, H, W]` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Tensor::wrap([1, 3, self.height, self.width], out)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if b != 1 || c != 3 {
            return Err(KinError::Shape(format!(
                "expected a [1, 3, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        let hw = h * w;
        let src = t.data();
        let mut data = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for ch in 0..3 {
                data.push(to_u8(src[ch * hw + i]));
            }
        }
        Ok(Rgb8Image {
            width: w,
            height: h,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_raw(path) {
            return Self::load_raw(path);
        }
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_raw(path) {
            return self.save_raw(path);
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| KinError::Shape("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    fn load_raw(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: RawHeader = serde_json::from_str(line.trim_end())?;
        if header.format != "rgb8" {
            return Err(KinError::Format(format!(
                "unsupported raw format `{}`",
                header.format
            )));
        }
        let mut data = vec![0u8; header.width * header.height * 3];
        reader.read_exact(&mut data)?;
        if reader.read(&mut [0u8; 1])? != 0 {
            return Err(KinError::Format("trailing bytes after raw pixels".into()));
        }
        Self::new(header.width, header.height, data)
    }

    fn save_raw(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = RawHeader {
            format: "rgb8".into(),
            width: self.width,
            height: self.height,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }
}

fn is_raw(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("rgb"))
}

/// Left-to-right brightness gradient with opposing red and blue ramps and
/// mild seeded texture. Used for benchmarks and seam experiments.
pub fn synthetic_gradient(width: usize, height: usize, seed: u64) -> Rgb8Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = width.saturating_sub(1).max(1) as f32;
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let row = 40.0 * y as f32 / height.max(1) as f32;
        for x in 0..width {
            let t = x as f32 / span;
            let noise: f32 = rng.random_range(-12.0..12.0);
            let px = [
                30.0 + 200.0 * t + noise,
                60.0 + 120.0 * t + row + noise,
                220.0 - 160.0 * t + noise,
            ];
            data.extend(px.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Rgb8Image {
        width,
        height,
        data,
    }
}

/// Gray left-to-right ramp from 30 to 230 with +-4 seeded texture.
pub fn brightness_gradient(width: usize, height: usize, seed: u64) -> Rgb8Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = width.saturating_sub(1).max(1) as f32;
    let mut data = Vec::with_capacity(width * height * 3);
    for _ in 0..height {
        for x in 0..width {
            let v = 30.0 + 200.0 * x as f32 / span + rng.random_range(-4.0f32..4.0);
            data.extend([v.round().clamp(0.0, 255.0) as u8; 3]);
        }
    }
    Rgb8Image {
        width,
        height,
        data,
    }
}

pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_convention() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(5.0), 255);
        for v in 0..=255u8 {
            let img = Rgb8Image::new(1, 1, vec![v, v, v]).unwrap();
            assert_eq!(Rgb8Image::from_tensor(&img.to_tensor()).unwrap(), img);
        }
    }

    #[test]
    fn planar_layout() {
        let img = Rgb8Image::from_fn(2, 1, |x, _| [x as u8 * 255, 0, 255]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), [1, 3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, -1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn synthetic_gradient_is_seeded_and_increasing() {
        let a = synthetic_gradient(64, 8, 3);
        assert_eq!(a, synthetic_gradient(64, 8, 3));
        assert_ne!(a, synthetic_gradient(64, 8, 4));
        let mean_r = |x0: usize| -> f64 {
            (0..8).flat_map(|y| (x0..x0 + 8).map(move |x| (x, y)))
                .map(|(x, y)| a.pixel(x, y)[0] as f64)
                .sum::<f64>() / 64.0
        };
        assert!(mean_r(56) > mean_r(0) + 100.0);
    }

    #[test]
    fn brightness_gradient_is_gray() {
        let a = brightness_gradient(32, 4, 1);
        assert_eq!(a, brightness_gradient(32, 4, 1));
        for y in 0..4 {
            let [r, g, b] = a.pixel(0, y);
            assert!(r == g && g == b && (26..=34).contains(&r));
            assert!((226..=234).contains(&a.pixel(31, y)[0]));
        }
    }

    #[test]
    fn png_and_raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rgb8Image::from_fn(5, 3, |x, y| [(x * 40) as u8, (y * 70) as u8, 9]);
        for name in ["a.png", "a.rgb"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(Rgb8Image::load(&p).unwrap(), img);
        }
        let raw = std::fs::read(dir.path().join("a.rgb")).unwrap();
        let nl = raw.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(raw.len() - nl - 1, 5 * 3 * 3);
    }
}
