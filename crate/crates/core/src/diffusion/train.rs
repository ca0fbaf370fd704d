use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{denoising_loss_with_dropout, Checkpoint, DenoiserModel, DiffusionItem, NoiseSchedule};
use crate::adapters::PromptEncoder;
use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{LORA_A_SUFFIX, LORA_B_SUFFIX};
use crate::seeds;

/// Which parameters an optimizer may touch. Frozen parameters are never updated
/// regardless of the selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    All,
    Nothing,
    /// Only LoRA factors.
    Lora,
    /// Parameters whose name starts with any of the prefixes.
    Prefixes(Vec<String>),
}

impl ParamSelector {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamSelector::All => true,
            ParamSelector::Nothing => false,
            ParamSelector::Lora => name.ends_with(LORA_A_SUFFIX) || name.ends_with(LORA_B_SUFFIX),
            ParamSelector::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub trainable: ParamSelector,
    /// Probability of replacing the conditioning with zeros (for guidance).
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            trainable: ParamSelector::All,
            cond_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidArgument(format!("cond_dropout {} outside [0, 1)", self.cond_dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Minibatches of one epoch: a seeded permutation cut into `batch_size` chunks.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seeds::derive_seed(seed, &format!("epoch{epoch}"))));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Optimizes `model` in place on pre-encoded items.
pub fn train_on_items(
    model: &mut DenoiserModel,
    items: &[DiffusionItem],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("no training items".into()));
    }
    let selector = config.trainable.clone();
    let trainable = move |n: &str| selector.matches(n);
    let mut opt = Adam::new(config.learning_rate);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(items.len(), config.batch_size, config.seed, epoch);
        for idx in &batches {
            let batch: Vec<DiffusionItem> = idx.iter().map(|&i| items[i].clone()).collect();
            let step_seed = seeds::derive_seed(config.seed, &format!("step{}", report.steps));
            let out = denoising_loss_with_dropout(model, &batch, schedule, step_seed, &trainable, config.cond_dropout)?;
            opt.step(&mut model.weights, &out.grads);
            total += out.loss;
            report.steps += 1;
        }
        let mean = total / batches.len() as f64;
        log::debug!("diffusion epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Encodes the train split of `manifest` into diffusion items.
pub fn encode_items(manifest: &Manifest, encoder: &PromptEncoder) -> Result<Vec<DiffusionItem>> {
    let train: Vec<_> = manifest.split_samples(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("manifest train split is empty".into()));
    }
    for s in &train {
        encoder.check_prompt(&s.prompt)?;
    }
    let mut cache = std::collections::BTreeMap::new();
    let mut items = Vec::with_capacity(train.len());
    for s in train {
        let cond = match cache.get(&s.prompt) {
            Some(c) => Clone::clone(c),
            None => {
                let c = encoder.encode(&s.prompt)?;
                cache.insert(s.prompt.clone(), c.clone());
                c
            }
        };
        items.push(DiffusionItem { image: manifest.image(s)?.to_tensor(), cond });
    }
    Ok(items)
}

/// Trains a copy of `model` on the manifest's train split and returns the checkpoint.
pub fn train_diffusion(
    model: &DenoiserModel,
    manifest: &Manifest,
    encoder: &PromptEncoder,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    if manifest.image_size() != model.config.image_size {
        return Err(Error::Shape(format!(
            "manifest images are {}px, model expects {}px",
            manifest.image_size(),
            model.config.image_size
        )));
    }
    let items = encode_items(manifest, encoder)?;
    let mut trained = model.clone();
    let report = train_on_items(&mut trained, &items, schedule, config)?;
    let digest_src = serde_json::to_vec(&(config, schedule.params, &model.config))?;
    let ck = Checkpoint { model: trained, schedule: schedule.params, config_digest: seeds::digest_hex(&digest_src) };
    Ok((ck, report))
}
