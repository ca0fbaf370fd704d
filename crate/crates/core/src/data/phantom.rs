//! Speckle phantoms: a desk-scale stand-in for breast ultrasound images.
//!
//! Each image is a tissue intensity map multiplied by Rayleigh speckle. Benign
//! cases carry one smooth hypoechoic ellipse, malignant cases one spiculated
//! hypoechoic region with posterior shadowing, and normal cases only layered
//! tissue bands.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, Image, Manifest, ManifestMeta, Sample};
use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Speckle grain size in pixels.
    pub speckle_scale: f64,
    /// Mean echo level inside lesions, in [0, 1].
    pub lesion_intensity: f64,
    /// Mean echo level of surrounding tissue, in [0, 1].
    pub background_intensity: f64,
    /// Benign ellipse semi-axis range, as a fraction of the image side.
    pub benign_axes: (f64, f64),
    /// Malignant core radius range, as a fraction of the image side.
    pub malignant_radius: (f64, f64),
    pub malignant_spikes: (usize, usize),
    /// Relative spike length range.
    pub malignant_irregularity: (f64, f64),
    pub normal_bands: (usize, usize),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            speckle_scale: 1.0,
            lesion_intensity: 0.15,
            background_intensity: 0.6,
            benign_axes: (0.12, 0.25),
            malignant_radius: (0.10, 0.17),
            malignant_spikes: (5, 9),
            malignant_irregularity: (0.3, 0.7),
            normal_bands: (3, 6),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("phantom config: {m}")));
        if self.image_size < 16 {
            return bad("image_size must be >= 16");
        }
        if !(self.speckle_scale > 0.0) {
            return bad("speckle_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.lesion_intensity) || !(0.0..=1.0).contains(&self.background_intensity) {
            return bad("intensities must lie in [0, 1]");
        }
        let ranges = [self.benign_axes, self.malignant_radius, self.malignant_irregularity];
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi)) {
            return bad("real-valued ranges must be positive and non-empty");
        }
        let counts = [self.malignant_spikes, self.normal_bands];
        if counts.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return bad("count ranges must be positive and non-empty");
        }
        Ok(())
    }
}

pub fn generate_phantom(label: ClassLabel, config: &PhantomConfig, seed: u64) -> Result<Image> {
    Ok(generate_phantom_with_mask(label, config, seed)?.0)
}

/// Phantom plus its ground-truth lesion mask (all false for normal tissue).
pub fn generate_phantom_with_mask(label: ClassLabel, config: &PhantomConfig, seed: u64) -> Result<(Image, Vec<bool>)> {
    config.validate()?;
    let n = config.image_size;
    let mut rng = seeds::rng(seeds::derive_seed(config.seed, &format!("phantom/{label}/{seed}")));

    // Low-frequency tissue heterogeneity shared by all classes.
    let waves: Vec<(f64, f64, f64)> =
        (0..2).map(|_| (rng.random_range(1.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0 * PI))).collect();
    let bands = (
        rng.random_range(config.normal_bands.0..=config.normal_bands.1) as f64,
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let center = (0.5 + rng.random_range(-0.12..0.12), 0.5 + rng.random_range(-0.10..0.10));

    let lesion = match label {
        ClassLabel::Normal => Lesion::None,
        ClassLabel::Benign => Lesion::Ellipse {
            a: rng.random_range(config.benign_axes.0..=config.benign_axes.1),
            b: rng.random_range(config.benign_axes.0..=config.benign_axes.1),
            angle: rng.random_range(0.0..PI),
        },
        ClassLabel::Malignant => {
            let spikes = rng.random_range(config.malignant_spikes.0..=config.malignant_spikes.1);
            Lesion::Spiculated {
                radius: rng.random_range(config.malignant_radius.0..=config.malignant_radius.1),
                spikes: (0..spikes)
                    .map(|_| {
                        (
                            rng.random_range(0.0..2.0 * PI),
                            rng.random_range(config.malignant_irregularity.0..=config.malignant_irregularity.1),
                        )
                    })
                    .collect(),
                wobble: rng.random_range(0.0..2.0 * PI),
                texture: (0..3)
                    .map(|_| (rng.random_range(5.0..10.0), rng.random_range(5.0..10.0), rng.random_range(0.0..2.0 * PI)))
                    .collect(),
            }
        }
    };

    // Rayleigh speckle with unit mean, one draw per grain.
    let sigma = (2.0 / PI).sqrt();
    let grains = (n as f64 / config.speckle_scale).ceil().max(1.0) as usize;
    let speckle: Vec<f64> = (0..grains * grains)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            sigma * (-2.0 * u.ln()).sqrt()
        })
        .collect();

    let mut pixels = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64;
            let v = (y as f64 + 0.5) / n as f64;
            let mut tissue = 1.0;
            for &(fu, fv, ph) in &waves {
                tissue += 0.04 * (2.0 * PI * (fu * u + fv * v) + ph).sin();
            }
            tissue *= 1.0 - 0.12 * v;
            if label == ClassLabel::Normal {
                let (k, m, p1, p2) = bands;
                tissue *= 1.0 + 0.2 * (2.0 * PI * k * (v + 0.03 * (2.0 * PI * m * u + p2).sin()) + p1).sin();
            }
            let mut value = config.background_intensity * tissue;
            let (inside, lesion_value, shadow) = lesion.evaluate(u, v, center, config.lesion_intensity);
            value *= shadow;
            value = value * (1.0 - inside) + lesion_value * inside;
            mask[y * n + x] = inside > 0.5;

            let gy = ((y as f64 / config.speckle_scale) as usize).min(grains - 1);
            let gx = ((x as f64 / config.speckle_scale) as usize).min(grains - 1);
            let intensity = (value * speckle[gy * grains + gx]).clamp(0.0, 1.0);
            pixels[y * n + x] = 2.0 * intensity - 1.0;
        }
    }
    Ok((Image::new(n, pixels)?, mask))
}

enum Lesion {
    None,
    Ellipse { a: f64, b: f64, angle: f64 },
    Spiculated { radius: f64, spikes: Vec<(f64, f64)>, wobble: f64, texture: Vec<(f64, f64, f64)> },
}

impl Lesion {
    /// Returns (membership in [0, 1], lesion echo level, posterior gain on tissue).
    fn evaluate(&self, u: f64, v: f64, c: (f64, f64), level: f64) -> (f64, f64, f64) {
        let (du, dv) = (u - c.0, v - c.1);
        match self {
            Lesion::None => (0.0, 0.0, 1.0),
            Lesion::Ellipse { a, b, angle } => {
                let (s, co) = angle.sin_cos();
                let (p, q) = (du * co + dv * s, -du * s + dv * co);
                let r = ((p / a).powi(2) + (q / b).powi(2)).sqrt();
                // Posterior acoustic enhancement below smooth fluid-like lesions.
                let width = a.max(*b);
                let enhance = if dv > 0.0 && du.abs() < width {
                    1.0 + 0.5 * (1.0 - (du.abs() / width).powi(2)) * (dv / 0.1).min(1.0)
                } else {
                    1.0
                };
                (sigmoid((1.0 - r) / 0.06), level, enhance)
            }
            Lesion::Spiculated { radius, spikes, wobble, texture } => {
                let rho = (du * du + dv * dv).sqrt();
                let theta = dv.atan2(du);
                let mut boundary = 1.0 + 0.15 * (3.0 * theta + wobble).sin();
                for &(t, amp) in spikes {
                    boundary += amp * (theta - t).cos().max(0.0).powi(16);
                }
                let inside = sigmoid((1.0 - rho / (radius * boundary)) / 0.02);
                let mut tex = 0.0;
                for &(fu, fv, ph) in texture {
                    tex += (2.0 * PI * (fu * u + fv * v) + ph).sin() / texture.len() as f64;
                }
                let lesion_value = (level * (1.0 + 0.8 * tex)).max(0.0);
                let shadow = if dv > 0.0 && du.abs() < *radius {
                    let edge = 1.0 - (du.abs() / radius).powi(2);
                    1.0 - 0.7 * edge * (dv / 0.1).min(1.0)
                } else {
                    1.0
                };
                (inside, lesion_value, shadow)
            }
        }
    }
}

/// A fully in-memory phantom dataset with the given per-class counts. Images are
/// held at 8-bit precision so they equal their PNG round trip.
/// Generation is parallel across images and yields the same set as a sequential run.
pub fn phantom_manifest(counts: [usize; 3], config: &PhantomConfig) -> Result<Manifest> {
    config.validate()?;
    let jobs: Vec<(ClassLabel, usize)> = ClassLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&label, n)| (0..n).map(move |i| (label, i)))
        .collect();
    let images: Vec<Result<Image>> =
        jobs.par_iter().map(|&(label, i)| generate_phantom(label, config, i as u64)).collect();
    let mut samples = Vec::with_capacity(jobs.len());
    for ((label, i), img) in jobs.into_iter().zip(images) {
        samples.push(Sample::real(format!("images/{label}_{i:04}.png"), label, Some(Arc::new(img?.quantized()))));
    }
    Ok(Manifest::new(
        samples,
        ManifestMeta {
            source: "phantom".into(),
            creation_seed: config.seed,
            image_size: config.image_size,
            warnings: vec![],
        },
    ))
}
