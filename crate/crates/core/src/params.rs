//! Named parameter storage, graph binding, and the LoRA attachment points shared by
//! every model in the crate.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const LORA_A_SUFFIX: &str = ".lora_a";
pub const LORA_B_SUFFIX: &str = ".lora_b";

/// Low-rank delta `(alpha / rank) · B · A` on a frozen 2-D weight `W: d × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target_name: String,
    pub rank: usize,
    pub alpha: f64,
    /// `rank × k`
    pub a: Tensor,
    /// `d × rank`, zero at attachment.
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `(alpha / rank) · B · A`.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("adapter shapes are validated at attach").scale(self.scaling())
    }
}

/// Parameters of one model plus any attached LoRA adapters.
///
/// Names are hierarchical (`down.0.conv1.weight`); adapter factors are addressed
/// as `<target>.lora_a` / `<target>.lora_b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    params: BTreeMap<String, Tensor>,
    adapters: BTreeMap<String, LoraAdapter>,
    frozen: BTreeSet<String>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn base(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter> {
        &self.adapters
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    /// Removes a base parameter (and its frozen flag).
    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.params.remove(name)
    }

    /// All trainable-addressable names: base parameters, then adapter factors.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        for t in self.adapters.keys() {
            names.push(format!("{t}{LORA_A_SUFFIX}"));
            names.push(format!("{t}{LORA_B_SUFFIX}"));
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum::<usize>()
            + self.adapters.values().map(|a| a.a.numel() + a.b.numel()).sum::<usize>()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        if let Some(t) = self.params.get(name) {
            return Some(t);
        }
        if let Some(target) = name.strip_suffix(LORA_A_SUFFIX) {
            return self.adapters.get(target).map(|a| &a.a);
        }
        if let Some(target) = name.strip_suffix(LORA_B_SUFFIX) {
            return self.adapters.get(target).map(|a| &a.b);
        }
        None
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if self.params.contains_key(name) {
            return self.params.get_mut(name);
        }
        if let Some(target) = name.strip_suffix(LORA_A_SUFFIX) {
            return self.adapters.get_mut(target).map(|a| &mut a.a);
        }
        if let Some(target) = name.strip_suffix(LORA_B_SUFFIX) {
            return self.adapters.get_mut(target).map(|a| &mut a.b);
        }
        None
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Attaches zero-initialized adapters to the named 2-D weights and freezes every
    /// base parameter.
    pub fn attach_lora(&mut self, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be >= 1".into()));
        }
        let mut staged = Vec::with_capacity(targets.len());
        for target in targets {
            let w = self.params.get(target).ok_or_else(|| Error::UnknownParameter(target.clone()))?;
            if w.shape().len() != 2 {
                return Err(Error::Shape(format!("LoRA target `{target}` is not 2-D: {:?}", w.shape())));
            }
            let (d, k) = (w.shape()[0], w.shape()[1]);
            if rank > d.min(k) {
                return Err(Error::RankTooLarge { target: target.clone(), rank, rows: d, cols: k });
            }
            staged.push((target.clone(), d, k));
        }
        for (i, (target, d, k)) in staged.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let a = Tensor::randn(&[rank, k], 1.0 / (k as f64).sqrt(), &mut rng);
            let b = Tensor::zeros(&[d, rank]);
            self.adapters.insert(target.clone(), LoraAdapter { target_name: target, rank, alpha, a, b });
        }
        let base: Vec<String> = self.params.keys().cloned().collect();
        self.frozen.extend(base);
        Ok(())
    }

    /// Installs previously trained adapters (e.g. loaded from an adapter file).
    pub fn install_adapters(&mut self, adapters: Vec<LoraAdapter>) -> Result<()> {
        for a in &adapters {
            let w = self.require(&a.target_name)?;
            let (d, k) = (w.shape()[0], w.shape()[1]);
            if a.a.shape() != [a.rank, k] || a.b.shape() != [d, a.rank] {
                return Err(Error::Shape(format!("adapter for `{}` does not fit {d}x{k}", a.target_name)));
            }
        }
        for a in adapters {
            self.adapters.insert(a.target_name.clone(), a);
        }
        let base: Vec<String> = self.params.keys().cloned().collect();
        self.frozen.extend(base);
        Ok(())
    }

    /// Bakes every adapter into its base weight and removes the adapters.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::NoAdapters);
        }
        for (target, adapter) in std::mem::take(&mut self.adapters) {
            let delta = adapter.delta();
            let w = self.params.get_mut(&target).ok_or(Error::UnknownParameter(target))?;
            w.add_scaled(&delta, 1.0);
        }
        self.frozen.clear();
        Ok(())
    }
}

/// Binds parameters of a [`Weights`] into a [`Graph`] on first use.
pub struct Binder<'a> {
    weights: &'a Weights,
    trainable: &'a dyn Fn(&str) -> bool,
    vars: BTreeMap<String, Var>,
}

pub fn nothing_trainable(_: &str) -> bool {
    false
}

impl<'a> Binder<'a> {
    pub fn new(weights: &'a Weights, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { weights, trainable, vars: BTreeMap::new() }
    }

    pub fn frozen(weights: &'a Weights) -> Self {
        Self::new(weights, &nothing_trainable)
    }

    pub fn weights(&self) -> &Weights {
        self.weights
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self.weights.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let trainable = (self.trainable)(name) && !self.weights.is_frozen(name);
        let v = g.leaf(t.clone(), trainable);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// `x ↦ W·x (+ LoRA) + b` along axis 1, for `<prefix>.weight` / `<prefix>.bias`.
    pub fn dense(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let wname = format!("{prefix}.weight");
        let w = self.param(g, &wname);
        let mut y = g.dense(x, w);
        if let Some(adapter) = self.weights.adapters.get(&wname) {
            let scaling = adapter.scaling();
            let a = self.param(g, &format!("{wname}{LORA_A_SUFFIX}"));
            let b = self.param(g, &format!("{wname}{LORA_B_SUFFIX}"));
            let ax = g.dense(x, a);
            let bax = g.dense(ax, b);
            let delta = g.scale(bax, scaling);
            y = g.add(y, delta);
        }
        let bname = format!("{prefix}.bias");
        if self.weights.get(&bname).is_some() {
            let b = self.param(g, &bname);
            y = g.add_bias(y, b);
        }
        y
    }

    pub fn conv(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = self.param(g, &format!("{prefix}.weight"));
        let y = g.conv2d(x, w);
        let bname = format!("{prefix}.bias");
        if self.weights.get(&bname).is_some() {
            let b = self.param(g, &bname);
            g.add_bias(y, b)
        } else {
            y
        }
    }

    /// Collects gradients of every trainable bound parameter.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if (self.trainable)(name) && !self.weights.is_frozen(name) {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.weights.get(name).expect("bound").shape()));
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Sums per-item gradient maps in order; the order is fixed so results are reproducible.
pub fn sum_grads(parts: Vec<BTreeMap<String, Tensor>>, scale: f64) -> BTreeMap<String, Tensor> {
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            match total.get_mut(&name) {
                Some(t) => t.add_scaled(&g, scale),
                None => {
                    total.insert(name, g.scale(scale));
                }
            }
        }
    }
    total
}
