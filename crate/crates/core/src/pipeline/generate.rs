//! Hybrid text2img → img2img generation.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::PromptEncoder;
use crate::data::{prompt_for_label, ClassLabel, Image, DEFAULT_TI_TOKEN};
use crate::diffusion::{img2img_sample, text2img_sample, EpsPredictor, NoiseSchedule, SamplerSettings};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub use_ti: bool,
    pub use_img2img: bool,
    pub strength: f64,
    pub sampler_steps: usize,
    pub guidance: f64,
    pub seed_base: u64,
    pub ti_token: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            use_ti: false,
            use_img2img: false,
            strength: 0.3,
            sampler_steps: 50,
            guidance: 1.0,
            seed_base: 0,
            ti_token: DEFAULT_TI_TOKEN.into(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidArgument(format!("strength {} outside [0, 1]", self.strength)));
        }
        if self.sampler_steps == 0 {
            return Err(Error::InvalidArgument("sampler_steps must be >= 1".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::InvalidArgument("guidance must be finite".into()));
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerSettings {
        SamplerSettings { steps: self.sampler_steps, guidance: self.guidance }
    }
}

/// Provenance of one synthetic image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub label: ClassLabel,
    pub seed: u64,
    pub prompt: String,
    /// Digest of the 8-bit text2img output.
    pub text2img_digest: String,
    /// Digest of the 8-bit img2img output, when that stage ran.
    pub img2img_digest: Option<String>,
    /// Path of the written image, relative to the output manifest root.
    pub path: Option<String>,
}

/// Memo of text2img outputs keyed by (prompt, seed, sampler settings), so arms
/// that differ only in the refinement stage share their first stage.
#[derive(Default)]
pub struct Text2ImgCache {
    images: Mutex<HashMap<(String, u64, usize, u64), Image>>,
}

impl Text2ImgCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn digest_image(img: &Image) -> String {
    seeds::digest_hex(&img.to_u8())
}

/// Generates `count` images of `label`. Image `i` uses seed `seed_base + i`.
/// Outputs are quantized to 8 bits so they equal their PNG round trip.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_generate(
    model: &dyn EpsPredictor,
    encoder: &PromptEncoder,
    schedule: &NoiseSchedule,
    image_size: usize,
    label: ClassLabel,
    count: usize,
    config: &GenerationConfig,
    cache: Option<&Text2ImgCache>,
) -> Result<(Vec<Image>, Vec<GenerationRecord>)> {
    config.validate()?;
    let prompt = prompt_for_label(label, config.use_ti, &config.ti_token)?;
    let cond = encoder.encode(&prompt)?;
    let settings = config.sampler();
    let results: Vec<Result<(Image, GenerationRecord)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed_base + i as u64;
            let key = (prompt.clone(), seed, settings.steps, settings.guidance.to_bits());
            let cached = cache.and_then(|c| c.images.lock().expect("cache lock").get(&key).cloned());
            let stage1 = match cached {
                Some(img) => img,
                None => {
                    let img = text2img_sample(model, &cond, schedule, image_size, settings, seed)?.quantized();
                    if let Some(c) = cache {
                        c.images.lock().expect("cache lock").insert(key, img.clone());
                    }
                    img
                }
            };
            let mut record = GenerationRecord {
                label,
                seed,
                prompt: prompt.clone(),
                text2img_digest: digest_image(&stage1),
                img2img_digest: None,
                path: None,
            };
            let out = if config.use_img2img {
                let refined = img2img_sample(model, &stage1, &cond, schedule, config.strength, settings, seed)?.quantized();
                record.img2img_digest = Some(digest_image(&refined));
                refined
            } else {
                stage1
            };
            Ok((out, record))
        })
        .collect();
    let mut images = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for r in results {
        let (img, rec) = r?;
        images.push(img);
        records.push(rec);
    }
    Ok((images, records))
}
