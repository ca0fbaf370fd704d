//! Deterministic (η = 0) DDIM samplers.

use serde::{Deserialize, Serialize};

use super::{forward_diffuse, EpsPredictor, NoiseSchedule};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    /// Classifier-free guidance scale; 1 disables the unconditional pass.
    pub guidance: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 50, guidance: 1.0 }
    }
}

/// Uniformly strided sub-sequence `floor((i+1)·T/steps)` for `i in 0..steps`, ascending, ending at `T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("sampler steps {steps} must be in [1, {total}]")));
    }
    Ok((0..steps).map(|i| (i + 1) * total / steps).collect())
}

fn guided_eps(model: &dyn EpsPredictor, x: &Tensor, t: usize, cond: &Tensor, guidance: f64) -> Tensor {
    let eps_c = model.predict_eps(x, t, cond);
    if guidance == 1.0 {
        return eps_c;
    }
    let eps_u = model.predict_eps(x, t, &Tensor::zeros(cond.shape()));
    let data = eps_u.data().iter().zip(eps_c.data()).map(|(u, c)| u + guidance * (c - u)).collect();
    Tensor::from_parts(eps_c.shape().to_vec(), data)
}

/// Runs the reverse process through `seq` (descending, first entry is the start step) down to 0.
fn ddim_reverse(
    model: &dyn EpsPredictor,
    mut x: Tensor,
    seq: &[usize],
    cond: &Tensor,
    schedule: &NoiseSchedule,
    guidance: f64,
) -> Tensor {
    for (i, &t) in seq.iter().enumerate() {
        let t_prev = seq.get(i + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let eps = guided_eps(model, &x, t, cond, guidance);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (xv, e) in x.data_mut().iter_mut().zip(eps.data()) {
            let x0 = ((*xv - sn * e) / sa).clamp(-1.0, 1.0);
            let e = (*xv - sa * x0) / sn;
            *xv = pa * x0 + pn * e;
        }
    }
    for v in x.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    x
}

fn check_cond(cond: &Tensor) -> Result<()> {
    if cond.shape().len() != 2 || cond.shape()[0] != 1 {
        return Err(Error::Shape(format!("conditioning must be [1, d], got {:?}", cond.shape())));
    }
    Ok(())
}

/// Generates an `image_size`² image from seeded Gaussian noise.
pub fn text2img_sample(
    model: &dyn EpsPredictor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    image_size: usize,
    settings: SamplerSettings,
    seed: u64,
) -> Result<Image> {
    check_cond(cond)?;
    let mut seq = ddim_timesteps(schedule.steps(), settings.steps)?;
    seq.reverse();
    let mut rng = seeds::rng(seeds::derive_seed(seed, "text2img"));
    let x = Tensor::randn(&[1, 1, image_size, image_size], 1.0, &mut rng);
    Image::from_tensor(&ddim_reverse(model, x, &seq, cond, schedule, settings.guidance))
}

/// Partially noises `source` to `t* = round(strength·T)` and denoises it back.
pub fn img2img_sample(
    model: &dyn EpsPredictor,
    source: &Image,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    strength: f64,
    settings: SamplerSettings,
    seed: u64,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("strength {strength} outside [0, 1]")));
    }
    check_cond(cond)?;
    let total = schedule.steps();
    let sub = ddim_timesteps(total, settings.steps)?;
    if strength == 1.0 {
        return text2img_sample(model, cond, schedule, source.size(), settings, seed);
    }
    let t_star = (strength * total as f64).round() as usize;
    if t_star == 0 {
        return Ok(source.clone());
    }
    let mut seq = vec![t_star];
    seq.extend(sub.iter().rev().copied().filter(|&t| t < t_star));
    let mut rng = seeds::rng(seeds::derive_seed(seed, "img2img"));
    let x0 = source.to_tensor();
    let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
    let x = forward_diffuse(&x0, t_star, &eps, schedule)?;
    Image::from_tensor(&ddim_reverse(model, x, &seq, cond, schedule, settings.guidance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    struct Identity;
    impl EpsPredictor for Identity {
        fn predict_eps(&self, x_t: &Tensor, _t: usize, _cond: &Tensor) -> Tensor {
            x_t.clone()
        }
    }

    /// Predicts a constant image shifted by the conditioning mean.
    struct Shift;
    impl EpsPredictor for Shift {
        fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Tensor {
            let c = cond.data().iter().sum::<f64>();
            let data = x_t.data().iter().map(|v| 0.5 * v + 0.01 * c + 1e-3 * t as f64).collect();
            Tensor::new(x_t.shape().to_vec(), data).unwrap()
        }
    }

    fn cond() -> Tensor {
        Tensor::new(vec![1, 2], vec![0.3, -0.1]).unwrap()
    }

    #[test]
    fn timesteps_are_strided_and_bounded() {
        assert_eq!(ddim_timesteps(200, 4).unwrap(), vec![50, 100, 150, 200]);
        assert_eq!(ddim_timesteps(10, 3).unwrap(), vec![3, 6, 10]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert!(ddim_timesteps(5, 6).is_err());
        assert!(ddim_timesteps(5, 0).is_err());
    }

    #[test]
    fn single_step_identity_oracle_matches_closed_form() {
        let s = make_schedule(20, 0.01, 0.2).unwrap();
        let settings = SamplerSettings { steps: 1, guidance: 1.0 };
        let out = text2img_sample(&Identity, &cond(), &s, 4, settings, 7).unwrap();
        let mut rng = seeds::rng(seeds::derive_seed(7, "text2img"));
        let z = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let ab = s.alpha_bar(20);
        let c = (1.0 - (1.0 - ab).sqrt()) / ab.sqrt();
        for (o, zv) in out.pixels().iter().zip(z.data()) {
            let expect = (c * zv).clamp(-1.0, 1.0);
            assert!((o - expect).abs() < 1e-12, "{o} vs {expect}");
        }
    }

    #[test]
    fn outputs_are_clamped_and_sized() {
        let s = make_schedule(30, 1e-3, 0.1).unwrap();
        let img = text2img_sample(&Shift, &cond(), &s, 8, SamplerSettings { steps: 6, guidance: 2.0 }, 1).unwrap();
        assert_eq!(img.size(), 8);
        assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(text2img_sample(&Shift, &cond(), &s, 8, SamplerSettings { steps: 31, guidance: 1.0 }, 1).is_err());
    }

    #[test]
    fn img2img_boundaries() {
        let s = make_schedule(30, 1e-3, 0.1).unwrap();
        let settings = SamplerSettings { steps: 10, guidance: 1.0 };
        let src = text2img_sample(&Shift, &cond(), &s, 8, settings, 3).unwrap();
        assert_eq!(img2img_sample(&Shift, &src, &cond(), &s, 0.0, settings, 9).unwrap(), src);
        // round(0.01 · 30) = 0 is still the identity
        assert_eq!(img2img_sample(&Shift, &src, &cond(), &s, 0.01, settings, 9).unwrap(), src);
        let full = img2img_sample(&Shift, &src, &cond(), &s, 1.0, settings, 9).unwrap();
        assert_eq!(full, text2img_sample(&Shift, &cond(), &s, 8, settings, 9).unwrap());
        let a = img2img_sample(&Shift, &src, &cond(), &s, 0.3, settings, 9).unwrap();
        assert_eq!(a, img2img_sample(&Shift, &src, &cond(), &s, 0.3, settings, 9).unwrap());
        assert_ne!(a, src);
        assert!(img2img_sample(&Shift, &src, &cond(), &s, 1.5, settings, 9).is_err());
        assert!(img2img_sample(&Shift, &src, &cond(), &s, -0.1, settings, 9).is_err());
    }
}
