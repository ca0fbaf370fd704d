use std::path::Path;

use image::{imageops, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square grayscale image with values nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Shape(format!("{} pixels for a {size}x{size} image", pixels.len())));
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self { size, pixels: vec![value; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.size + x]
    }

    /// `[1, 1, size, size]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.size, self.size], self.pixels.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 || s[2] != s[3] {
            return Err(Error::Shape(format!("expected [1, 1, S, S], got {s:?}")));
        }
        Self::new(s[2], t.data().to_vec())
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn hflip(&self) -> Image {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                out[y * n + x] = self.pixels[y * n + (n - 1 - x)];
            }
        }
        Image { size: n, pixels: out }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_u8(size: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(size, bytes.iter().map(|&b| from_byte(b)).collect())
    }

    /// Bilinear resize. The filter works on [0, 1] intensities, so values are
    /// mapped there and back.
    pub fn resized(&self, size: usize) -> Image {
        if size == self.size {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.size as u32,
            self.size as u32,
            self.pixels.iter().map(|&v| ((v + 1.0) * 0.5) as f32).collect(),
        )
        .expect("buffer sized from image");
        let out = imageops::resize(&buf, size as u32, size as u32, imageops::FilterType::Triangle);
        Image { size, pixels: out.into_raw().into_iter().map(|v| f64::from(v) * 2.0 - 1.0).collect() }
    }

    /// Quantizes to 8-bit and back, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Image {
        Image { size: self.size, pixels: self.pixels.iter().map(|&v| from_byte(to_byte(v))).collect() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.size as u32, self.size as u32, self.to_u8()).expect("buffer sized from image");
        buf.save(path).map_err(|e| Error::ImageRead { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Loads any readable image as grayscale, resized to `size` and mapped to [-1, 1].
    pub fn load(path: &Path, size: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::ImageRead { path: path.to_path_buf(), reason: e.to_string() })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let square = if w != h {
            let s = w.min(h);
            imageops::crop_imm(&gray, (w - s) / 2, (h - s) / 2, s, s).to_image()
        } else {
            gray
        };
        let native = Image::from_u8(square.width() as usize, square.as_raw())?;
        Ok(native.resized(size))
    }
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}
