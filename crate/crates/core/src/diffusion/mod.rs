//! Pixel-space conditional diffusion: schedules, the ε-predictor, the denoising
//! objective, training, and DDIM text2img / img2img samplers.

mod checkpoint;
mod sample;
mod schedule;
mod train;
mod unet;

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{sum_grads, Binder};
use crate::seeds;
use crate::tensor::Tensor;

pub use self::checkpoint::Checkpoint;
pub use self::sample::{ddim_timesteps, img2img_sample, text2img_sample, SamplerSettings};
pub use self::schedule::{diffuse_with_alpha_bar, forward_diffuse, make_schedule, NoiseSchedule, ScheduleParams};
pub(crate) use self::train::epoch_batches;
pub use self::train::{encode_items, train_diffusion, train_on_items, ParamSelector, TrainConfig, TrainReport};
pub use self::unet::{timestep_embedding, DenoiserModel, UNetConfig};

/// Anything that predicts the noise in `x_t`.
pub trait EpsPredictor: Sync {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Tensor;
}

impl EpsPredictor for DenoiserModel {
    fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Tensor {
        self.predict(x_t, t, cond)
    }
}

/// One training example: a `[1, 1, S, S]` image and its `[1, d_c]` conditioning.
#[derive(Clone, Debug)]
pub struct DiffusionItem {
    pub image: Tensor,
    pub cond: Tensor,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Noise draw for batch item `index`: a step uniform in `[1, T]`, standard-normal
/// noise, and whether the conditioning is dropped (probability `cond_dropout`).
pub fn noise_draw(seed: u64, index: usize, steps: usize, shape: &[usize], cond_dropout: f64) -> (usize, Tensor, bool) {
    let mut rng = seeds::rng(seeds::derive_seed(seed, &format!("item{index}")));
    let t = rng.random_range(1..=steps);
    let eps = Tensor::randn(shape, 1.0, &mut rng);
    let drop = cond_dropout > 0.0 && rng.random::<f64>() < cond_dropout;
    (t, eps, drop)
}

/// Mean over the batch of `‖eps − ε̂(forward_diffuse(x0, t, eps), t, cond)‖²`
/// (per-pixel mean), with gradients for every parameter the selector admits.
pub fn denoising_loss(
    model: &DenoiserModel,
    batch: &[DiffusionItem],
    schedule: &NoiseSchedule,
    rng_seed: u64,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<LossOutput> {
    denoising_loss_with_dropout(model, batch, schedule, rng_seed, trainable, 0.0)
}

pub(crate) fn denoising_loss_with_dropout(
    model: &DenoiserModel,
    batch: &[DiffusionItem],
    schedule: &NoiseSchedule,
    rng_seed: u64,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    cond_dropout: f64,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let (t, eps, drop) = noise_draw(rng_seed, i, schedule.steps(), item.image.shape(), cond_dropout);
            let x_t = forward_diffuse(&item.image, t, &eps, schedule)?;
            let cond = if drop { Tensor::zeros(item.cond.shape()) } else { item.cond.clone() };
            let mut g = Graph::new();
            let mut b = Binder::new(&model.weights, trainable);
            let x = g.constant(x_t);
            let c = g.constant(cond);
            let pred = model.forward(&mut g, &mut b, x, t, c);
            let loss = g.mse(pred, eps);
            let value = g.value(loss).data()[0];
            let mut grads = g.backward(loss);
            Ok((value, b.collect(&mut grads)))
        })
        .collect();
    let mut losses = Vec::with_capacity(parts.len());
    let mut grads = Vec::with_capacity(parts.len());
    for p in parts {
        let (l, g) = p?;
        losses.push(l);
        grads.push(g);
    }
    let n = batch.len() as f64;
    Ok(LossOutput { loss: losses.iter().sum::<f64>() / n, grads: sum_grads(grads, 1.0 / n) })
}

/// Loss value only, for any predictor, using the same noise draws as [`denoising_loss`].
pub fn denoising_loss_value(
    model: &dyn EpsPredictor,
    batch: &[DiffusionItem],
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let (t, eps, _) = noise_draw(rng_seed, i, schedule.steps(), item.image.shape(), 0.0);
        let x_t = forward_diffuse(&item.image, t, &eps, schedule)?;
        let pred = model.predict_eps(&x_t, t, &item.cond);
        total += pred.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.numel() as f64;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Knows the clean image, so it recovers the injected noise exactly.
    struct Oracle<'a> {
        x0: &'a Tensor,
        schedule: &'a NoiseSchedule,
    }

    impl EpsPredictor for Oracle<'_> {
        fn predict_eps(&self, x_t: &Tensor, t: usize, _cond: &Tensor) -> Tensor {
            let ab = self.schedule.alpha_bar(t);
            let data = x_t
                .data()
                .iter()
                .zip(self.x0.data())
                .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Tensor::new(x_t.shape().to_vec(), data).unwrap()
        }
    }

    fn tiny() -> (DenoiserModel, Vec<DiffusionItem>, NoiseSchedule) {
        let cfg = UNetConfig { image_size: 8, patch: 2, widths: vec![2], emb_dim: 2, cond_dim: 2, groups: 1 };
        let model = DenoiserModel::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let item = DiffusionItem {
            image: Tensor::randn(&[1, 1, 8, 8], 0.5, &mut rng),
            cond: Tensor::randn(&[1, 2], 1.0, &mut rng),
        };
        (model, vec![item], make_schedule(50, 1e-3, 0.05).unwrap())
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let (_, batch, schedule) = tiny();
        let oracle = Oracle { x0: &batch[0].image, schedule: &schedule };
        let loss = denoising_loss_value(&oracle, &batch, &schedule, 9).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn loss_is_nonnegative_and_matches_value_path() {
        let (model, batch, schedule) = tiny();
        let all = |_: &str| true;
        let out = denoising_loss(&model, &batch, &schedule, 5, &all).unwrap();
        assert!(out.loss >= 0.0);
        let v = denoising_loss_value(&model, &batch, &schedule, 5).unwrap();
        assert!((out.loss - v).abs() < 1e-12);
        assert!(denoising_loss(&model, &[], &schedule, 5, &all).is_err());
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let (mut model, batch, schedule) = tiny();
        assert!(model.num_params() <= 500, "{} params", model.num_params());
        let all = |_: &str| true;
        let out = denoising_loss(&model, &batch, &schedule, 21, &all).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for name in model.weights.names() {
            let n = model.weights.get(&name).unwrap().numel();
            for i in 0..n {
                let orig = model.weights.get(&name).unwrap().data()[i];
                model.weights.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let plus = denoising_loss_value(&model, &batch, &schedule, 21).unwrap();
                model.weights.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let minus = denoising_loss_value(&model, &batch, &schedule, 21).unwrap();
                model.weights.get_mut(&name).unwrap().data_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = out.grads[&name].data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a:e} vs fd {fd:e}");
            }
        }
        assert!(worst < 1e-4);
    }
}
