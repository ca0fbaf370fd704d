use busaug_core::adapters::{EncoderConfig, PromptEncoder};
use busaug_core::data::{phantom_manifest, split_stratified, PhantomConfig};
use busaug_core::diffusion::{
    forward_diffuse, make_schedule, train_diffusion, DenoiserModel, ParamSelector, TrainConfig, UNetConfig,
};
use busaug_core::eval::{fid, fid_stats, matrix_sqrt_psd};
use busaug_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_unet() -> DenoiserModel {
    let cfg = UNetConfig { image_size: 16, patch: 2, widths: vec![8, 8], emb_dim: 8, cond_dim: 8, groups: 4 };
    DenoiserModel::new(cfg, 12).unwrap()
}

fn with_random_adapters(model: &DenoiserModel, rng: &mut ChaCha8Rng) -> DenoiserModel {
    let mut m = model.clone();
    let targets = m.config.default_lora_targets();
    m.weights.attach_lora(&targets, 4, 4.0, 3).unwrap();
    for t in &targets {
        let b = m.weights.get_mut(&format!("{t}.lora_b")).unwrap();
        let shape = b.shape().to_vec();
        *b = Tensor::randn(&shape, 0.1, rng);
    }
    m
}

#[test]
fn fresh_adapters_are_transparent() {
    let model = small_unet();
    let mut adapted = model.clone();
    adapted.weights.attach_lora(&model.config.default_lora_targets(), 4, 4.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1, 250, 999] {
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let c = Tensor::randn(&[1, 8], 1.0, &mut rng);
        assert_eq!(adapted.predict(&x, t, &c), model.predict(&x, t, &c));
    }
}

#[test]
fn merged_model_matches_adapted_model_on_100_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let adapted = with_random_adapters(&small_unet(), &mut rng);
    let mut merged = adapted.clone();
    merged.weights.merge_lora().unwrap();
    assert!(merged.weights.adapters().is_empty());
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let c = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let t = rng.random_range(1..=1000);
        worst = worst.max(adapted.predict(&x, t, &c).max_abs_diff(&merged.predict(&x, t, &c)));
    }
    assert!(worst < 1e-5, "max abs diff {worst:e}");
    assert!(merged.weights.merge_lora().is_err());
}

#[test]
fn adapter_training_leaves_the_base_bit_identical() {
    let m = split_stratified(&phantom_manifest([4, 4, 4], &PhantomConfig { image_size: 16, ..Default::default() }).unwrap(), 0.8, 1)
        .unwrap();
    let enc = PromptEncoder::new(EncoderConfig { embed_dim: 8, hidden_dim: 8, cond_dim: 8 }, 2).unwrap();
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let mut model = small_unet();
    model.weights.attach_lora(&model.config.default_lora_targets(), 2, 2.0, 9).unwrap();
    // Even an "everything" selector must not move frozen base tensors.
    for sel in [ParamSelector::Lora, ParamSelector::All] {
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 1e-2, trainable: sel, ..Default::default() };
        let (ck, _) = train_diffusion(&model, &m, &enc, &schedule, &cfg).unwrap();
        assert_eq!(ck.model.weights.base(), model.weights.base());
        assert_ne!(ck.model.weights.adapters(), model.weights.adapters());
    }
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    // A·Aᵀ with a random rank up to d, so singular cases appear too.
    let k = rng.random_range(1..=d);
    let a = Tensor::randn(&[d, k], rng.random_range(0.1..3.0), rng);
    a.matmul(&a.transpose2()).unwrap()
}

#[test]
fn matrix_sqrt_reconstructs_100_random_psd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let d = rng.random_range(1..=12);
        let m = random_psd(d, &mut rng);
        let s = matrix_sqrt_psd(&m).unwrap();
        let err = s.matmul(&s).unwrap().max_abs_diff(&m);
        let scale = m.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-6 * (1.0 + scale), "d={d}: {err:e} vs scale {scale}");
    }
}

fn gaussian_features(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[n, d], 1.0, rng);
    t.data_mut().iter_mut().for_each(|v| *v += shift);
    t
}

#[test]
fn frechet_distance_oracles() {
    let stats = |mu: f64, var: f64| busaug_core::eval::FidStats {
        mu: Tensor::new(vec![1], vec![mu]).unwrap(),
        sigma: Tensor::new(vec![1, 1], vec![var]).unwrap(),
        n: 10,
    };
    // (0 − 2)² + 1 + 1 − 2·√(1·1)
    assert!((fid(&stats(0.0, 1.0), &stats(2.0, 1.0)).unwrap() - 4.0).abs() < 1e-6);
    // Univariate closed form (μ₁−μ₂)² + (σ₁−σ₂)².
    let got = fid(&stats(1.0, 4.0), &stats(-0.5, 0.25)).unwrap();
    assert!((got - (1.5f64.powi(2) + 1.5f64.powi(2))).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = fid_stats(&gaussian_features(50, 6, 0.0, &mut rng)).unwrap();
    assert!(fid(&s, &s).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_distance_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 5;
    let a = gaussian_features(40, d, 0.0, &mut rng);
    let b = gaussian_features(40, d, 0.7, &mut rng);
    // Orthogonal Q from Gram-Schmidt on a random matrix.
    let r = Tensor::randn(&[d, d], 1.0, &mut rng);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v: Vec<f64> = r.data()[i * d..(i + 1) * d].to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / norm).collect());
    }
    let q = Tensor::new(vec![d, d], q.concat()).unwrap();
    let before = fid(&fid_stats(&a).unwrap(), &fid_stats(&b).unwrap()).unwrap();
    let after = fid(&fid_stats(&a.matmul(&q).unwrap()).unwrap(), &fid_stats(&b.matmul(&q).unwrap()).unwrap()).unwrap();
    assert!((before - after).abs() < 1e-4, "{before} vs {after}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreases(steps in 2usize..2000, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let hi = (lo + span).min(0.99);
        let s = make_schedule(steps, lo, hi).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), steps);
        for w in ab.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn forward_diffusion_is_linear(seed in any::<u64>(), t in 1usize..=1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, 1, 4, 4];
        let (x1, x2, e1, e2) = (
            Tensor::randn(&shape, 1.0, &mut rng),
            Tensor::randn(&shape, 1.0, &mut rng),
            Tensor::randn(&shape, 1.0, &mut rng),
            Tensor::randn(&shape, 1.0, &mut rng),
        );
        let mix = |u: &Tensor, v: &Tensor| {
            let mut m = u.scale(a);
            m.add_scaled(v, b);
            m
        };
        let lhs = forward_diffuse(&mix(&x1, &x2), t, &mix(&e1, &e2), &s).unwrap();
        let rhs = mix(&forward_diffuse(&x1, t, &e1, &s).unwrap(), &forward_diffuse(&x2, t, &e2, &s).unwrap());
        prop_assert_eq!(lhs.shape(), &shape[..]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = fid_stats(&gaussian_features(12, 4, 0.0, &mut rng)).unwrap();
        let b = fid_stats(&gaussian_features(12, 4, shift, &mut rng)).unwrap();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
    }
}
