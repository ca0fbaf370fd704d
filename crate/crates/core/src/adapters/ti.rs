//! Textual inversion: optimize only the rows of one learned token against the
//! denoising objective of a frozen denoiser.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{token_param, PromptEncoder, TokenEmbedding};
use crate::data::{prompt_for_label, Manifest, Split, DEFAULT_TI_TOKEN};
use crate::diffusion::{forward_diffuse, noise_draw, DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::Adam;
use crate::params::{Binder, Weights};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiConfig {
    pub token: String,
    pub init_source: String,
    pub n_vec: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TiConfig {
    fn default() -> Self {
        Self {
            token: DEFAULT_TI_TOKEN.into(),
            init_source: "image".into(),
            n_vec: 1,
            steps: 500,
            learning_rate: 5e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vec == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("ti n_vec and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("ti learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A training image and the prompt (containing the token) it is paired with.
#[derive(Clone, Debug)]
pub struct TiItem {
    pub image: Tensor,
    pub prompt: String,
}

/// Train-split images paired with their class prompts in token mode.
pub fn ti_items(manifest: &Manifest, token: &str) -> Result<Vec<TiItem>> {
    manifest
        .split_samples(Split::Train)
        .map(|s| Ok(TiItem { image: manifest.image(s)?.to_tensor(), prompt: prompt_for_label(s.label, true, token)? }))
        .collect()
}

/// Denoising loss over `items` and its gradient with respect to the token rows.
pub fn ti_loss(
    model: &DenoiserModel,
    encoder: &PromptEncoder,
    items: &[TiItem],
    schedule: &NoiseSchedule,
    seed: u64,
    token: &str,
) -> Result<(f64, Tensor)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let name = token_param(token);
    let rows = encoder.weights.get(&name).ok_or_else(|| Error::UnregisteredToken(token.to_string()))?;
    let selector = |n: &str| n == name;
    let parts: Vec<Result<(f64, Tensor)>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let (t, eps, _) = noise_draw(seed, i, schedule.steps(), item.image.shape(), 0.0);
            let x_t = forward_diffuse(&item.image, t, &eps, schedule)?;
            let mut g = Graph::new();
            let mut eb = Binder::new(&encoder.weights, &selector);
            let mut mb = Binder::frozen(&model.weights);
            let cond = encoder.encode_graph(&mut g, &mut eb, &item.prompt)?;
            let x = g.constant(x_t);
            let pred = model.forward(&mut g, &mut mb, x, t, cond);
            let loss = g.mse(pred, eps);
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss);
            let grad = eb.collect(&mut grads).remove(&name).unwrap_or_else(|| Tensor::zeros(rows.shape()));
            Ok((value, grad))
        })
        .collect();
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(rows.shape());
    for p in parts {
        let (l, g) = p?;
        loss += l / n;
        grad.add_scaled(&g, 1.0 / n);
    }
    Ok((loss, grad))
}

/// Loss value only; same noise draws as [`ti_loss`].
pub fn ti_loss_value(
    model: &DenoiserModel,
    encoder: &PromptEncoder,
    items: &[TiItem],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, item) in items.iter().enumerate() {
        let (t, eps, _) = noise_draw(seed, i, schedule.steps(), item.image.shape(), 0.0);
        let x_t = forward_diffuse(&item.image, t, &eps, schedule)?;
        let pred = model.predict(&x_t, t, &encoder.encode(&item.prompt)?);
        total += pred.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.numel() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Learns the rows of `config.token` (already registered in `encoder`) with the
/// model and every other encoder parameter held fixed. Returns the learned
/// embedding and the per-step losses.
pub fn train_textual_inversion(
    model: &DenoiserModel,
    encoder: &PromptEncoder,
    items: &[TiItem],
    schedule: &NoiseSchedule,
    config: &TiConfig,
) -> Result<(TokenEmbedding, Vec<f64>)> {
    config.validate()?;
    let token = config.token.as_str();
    let mut emb = encoder.token_embedding(token)?;
    if !items.iter().any(|it| it.prompt.split_whitespace().any(|w| w == token)) {
        return Err(Error::TokenNotInPrompts(token.to_string()));
    }
    for it in items {
        encoder.check_prompt(&it.prompt)?;
    }
    let name = token_param(token);
    let mut working = encoder.clone();
    let mut store = Weights::new();
    store.insert(name.clone(), emb.vectors.clone());
    let mut opt = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let mut rng = seeds::rng(seeds::derive_seed(config.seed, "ti-batches"));
    for step in 0..config.steps {
        let batch: Vec<TiItem> =
            (0..config.batch_size).map(|_| items[rng.random_range(0..items.len())].clone()).collect();
        let step_seed = seeds::derive_seed(config.seed, &format!("ti-step{step}"));
        let (loss, grad) = ti_loss(model, &working, &batch, schedule, step_seed, token)?;
        opt.step(&mut store, &BTreeMap::from([(name.clone(), grad)]));
        *working.weights.get_mut(&name).expect("registered") = store.get(&name).expect("inserted").clone();
        losses.push(loss);
    }
    emb.vectors = store.get(&name).expect("inserted").clone();
    Ok((emb, losses))
}
