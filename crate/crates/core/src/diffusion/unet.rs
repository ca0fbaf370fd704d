//! Conditional U-Net ε-predictor.
//!
//! The image is folded into `patch²` channels (space-to-depth) before the first
//! convolution and unfolded after the last one. Each residual block modulates its
//! second normalization with a scale and shift projected from the sum of the
//! timestep embedding and the projected conditioning vector. The output adds
//! `(1 + s)·x_t` to the network branch, with the scalar `s` projected from the
//! same embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Weights};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Channel width per resolution level, top first.
    pub widths: Vec<usize>,
    pub emb_dim: usize,
    pub cond_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { image_size: 64, patch: 4, widths: vec![32, 64, 64], emb_dim: 32, cond_dim: 32, groups: 4 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("unet config: {m}")));
        if self.widths.is_empty() {
            return bad("at least one level required".into());
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("patch {} must divide image size {}", self.patch, self.image_size));
        }
        let inner = self.image_size / self.patch;
        if !inner.is_multiple_of(1 << (self.widths.len() - 1)) {
            return bad(format!("{} levels do not fit a {inner}px grid", self.widths.len()));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return bad(format!("widths {:?} not divisible by {} groups", self.widths, self.groups));
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) || self.cond_dim == 0 {
            return bad("emb_dim must be even and positive, cond_dim positive".into());
        }
        Ok(())
    }

    /// Names of the conditioning-projection and mid-block dense maps.
    pub fn default_lora_targets(&self) -> Vec<String> {
        let mut t = vec!["cond_proj.weight".to_string(), "mid.proj.weight".to_string()];
        for block in self.block_names() {
            t.push(format!("{block}.emb_scale.weight"));
            t.push(format!("{block}.emb_shift.weight"));
        }
        t.sort();
        t
    }

    fn block_names(&self) -> Vec<String> {
        let n = self.widths.len();
        let mut names: Vec<String> = (0..n).map(|i| format!("down.{i}")).collect();
        names.push("mid.res".into());
        names.extend((0..n).map(|i| format!("up.{i}")));
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub config: UNetConfig,
    pub weights: Weights,
}

fn conv_init(w: &mut Weights, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
    w.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng));
    w.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn dense_init(w: &mut Weights, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let std = gain / (cin as f64).sqrt();
    w.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin], std, rng));
    w.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn block_init(w: &mut Weights, name: &str, cin: usize, cout: usize, emb: usize, rng: &mut ChaCha8Rng) {
    conv_init(w, &format!("{name}.conv1"), cin, cout, 3, 1.0, rng);
    conv_init(w, &format!("{name}.conv2"), cout, cout, 3, 0.5, rng);
    dense_init(w, &format!("{name}.emb_scale"), emb, cout, 0.5, rng);
    dense_init(w, &format!("{name}.emb_shift"), emb, cout, 0.5, rng);
    if cin != cout {
        dense_init(w, &format!("{name}.skip"), cin, cout, 1.0, rng);
    }
}

/// Sinusoidal embedding of a diffusion step, `[1, dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

impl DenoiserModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, "unet-init"));
        let mut w = Weights::new();
        let p2 = config.patch * config.patch;
        let e = config.emb_dim;
        dense_init(&mut w, "time.l1", e, e, 1.0, &mut rng);
        dense_init(&mut w, "time.l2", e, e, 1.0, &mut rng);
        dense_init(&mut w, "cond_proj", config.cond_dim, e, 1.0, &mut rng);
        conv_init(&mut w, "conv_in", p2, config.widths[0], 3, 1.0, &mut rng);
        let mut ch = config.widths[0];
        for (i, &width) in config.widths.iter().enumerate() {
            block_init(&mut w, &format!("down.{i}"), ch, width, e, &mut rng);
            ch = width;
        }
        block_init(&mut w, "mid.res", ch, ch, e, &mut rng);
        dense_init(&mut w, "mid.proj", ch, ch, 0.5, &mut rng);
        for i in (0..config.widths.len()).rev() {
            let width = config.widths[i];
            block_init(&mut w, &format!("up.{i}"), ch + width, width, e, &mut rng);
            ch = width;
        }
        conv_init(&mut w, "conv_out", ch, p2, 3, 0.1, &mut rng);
        // Gate starts closed (1 + s = 0) and learns to open toward the pure-noise identity.
        w.insert("out_skip.weight".to_string(), Tensor::zeros(&[1, e]));
        w.insert("out_skip.bias".to_string(), Tensor::full(&[1], -1.0));
        Ok(Self { config, weights: w })
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    fn res_block(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var, emb: Var) -> Var {
        let groups = self.config.groups;
        let h = g.group_norm(x, gcd_groups(g.value(x).shape()[1], groups));
        let h = g.silu(h);
        let h = b.conv(g, &format!("{name}.conv1"), h);
        let h = g.group_norm(h, groups);
        let scale = b.dense(g, &format!("{name}.emb_scale"), emb);
        let shift = b.dense(g, &format!("{name}.emb_shift"), emb);
        let h = g.channel_affine(h, scale, shift);
        let h = g.silu(h);
        let h = b.conv(g, &format!("{name}.conv2"), h);
        let skip = if b.weights().get(&format!("{name}.skip.weight")).is_some() {
            b.dense(g, &format!("{name}.skip"), x)
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Builds ε̂(x_t, t, cond) for `x: [1, 1, S, S]` and `cond: [1, cond_dim]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, t: usize, cond: Var) -> Var {
        let cfg = &self.config;
        let temb = g.constant(timestep_embedding(t, cfg.emb_dim));
        let h = b.dense(g, "time.l1", temb);
        let h = g.silu(h);
        let temb = b.dense(g, "time.l2", h);
        let cemb = b.dense(g, "cond_proj", cond);
        let emb = g.add(temb, cemb);
        let emb = g.silu(emb);

        let folded = g.pixel_unshuffle(x, cfg.patch);
        let mut h = b.conv(g, "conv_in", folded);
        let levels = cfg.widths.len();
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.res_block(g, b, &format!("down.{i}"), h, emb);
            skips.push(h);
            if i + 1 < levels {
                h = g.avg_pool2(h);
            }
        }
        h = self.res_block(g, b, "mid.res", h, emb);
        let p = b.dense(g, "mid.proj", h);
        h = g.add(h, p);
        for i in (0..levels).rev() {
            if i + 1 < levels {
                h = g.upsample2(h);
            }
            h = g.concat(&[h, skips[i]], 1);
            h = self.res_block(g, b, &format!("up.{i}"), h, emb);
        }
        let h = g.group_norm(h, cfg.groups);
        let h = g.silu(h);
        let out = b.conv(g, "conv_out", h);
        let out = g.pixel_shuffle(out, cfg.patch);
        let gate = b.dense(g, "out_skip", emb);
        let zero = g.constant(Tensor::zeros(&[1, 1]));
        let skip = g.channel_affine(x, gate, zero);
        g.add(out, skip)
    }

    /// Inference-only prediction with all parameters frozen.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.weights);
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, &mut b, x, t, c);
        g.value(out).clone()
    }
}

// Folded inputs can have fewer channels than the configured group count.
fn gcd_groups(channels: usize, groups: usize) -> usize {
    let (mut a, mut b) = (channels, groups);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
