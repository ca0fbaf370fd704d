//! Reduced residual CNN for three-way lesion classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::path::Path;

use super::metrics::{compute_metrics, MetricsReport};
use crate::data::{ClassLabel, Image, Manifest, Split};
use crate::container::Container;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::optim::Adam;
use crate::params::{sum_grads, Binder, Weights};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Side length the input is average-pooled to before the stem.
    pub input_size: usize,
    /// Channels of the stem and of each residual stage.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { input_size: 32, widths: vec![8, 16, 32], groups: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub weights: Weights,
    /// Pixel normalization `(x − mean) / std`, fitted on the training images.
    pub norm: (f64, f64),
}

fn conv_init(w: &mut Weights, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    w.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, rng));
    w.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

#[derive(Serialize, Deserialize)]
struct SavedHeader {
    config: ClassifierConfig,
    norm: (f64, f64),
}

impl ClassifierModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SavedHeader { config: self.config.clone(), norm: self.norm };
        let tensors = self.weights.base().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        Container::new("classifier", &header, tensors)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("classifier")?;
        let header: SavedHeader = c.header_as()?;
        let mut model = Self::new(header.config)?;
        model.norm = header.norm;
        for (name, t) in c.tensors {
            match model.weights.get(&name) {
                Some(r) if r.shape() == t.shape() => model.weights.insert(name, t),
                _ => return Err(Error::ArchitectureMismatch(format!("classifier parameter `{name}`"))),
            }
        }
        Ok(model)
    }

    pub fn new(config: ClassifierConfig) -> Result<Self> {
        if config.widths.is_empty() || config.groups == 0 || config.widths.iter().any(|w| w % config.groups != 0) {
            return Err(Error::InvalidArgument(format!("bad classifier widths {:?}", config.widths)));
        }
        if !config.input_size.is_multiple_of(1 << (config.widths.len() - 1)) {
            return Err(Error::InvalidArgument("input size too small for the number of stages".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(config.seed, "classifier-init"));
        let mut w = Weights::new();
        conv_init(&mut w, "stem", 1, config.widths[0], &mut rng);
        let mut ch = config.widths[0];
        for (i, &width) in config.widths.iter().enumerate() {
            conv_init(&mut w, &format!("stage.{i}.conv1"), ch, width, &mut rng);
            conv_init(&mut w, &format!("stage.{i}.conv2"), width, width, &mut rng);
            if ch != width {
                let std = (1.0 / ch as f64).sqrt();
                w.insert(format!("stage.{i}.skip.weight"), Tensor::randn(&[width, ch], std, &mut rng));
            }
            ch = width;
        }
        let std = (1.0 / ch as f64).sqrt();
        w.insert("head.weight", Tensor::randn(&[ClassLabel::ALL.len(), ch], std, &mut rng));
        w.insert("head.bias", Tensor::zeros(&[ClassLabel::ALL.len()]));
        Ok(Self { config, weights: w, norm: (0.0, 1.0) })
    }

    fn prepare(&self, image: &Image) -> Tensor {
        let img = if image.size() == self.config.input_size { image.clone() } else { image.resized(self.config.input_size) };
        let (m, s) = self.norm;
        let data = img.pixels().iter().map(|v| (v - m) / s).collect();
        Tensor::from_parts(vec![1, 1, img.size(), img.size()], data)
    }

    /// Pooled penultimate features `[1, C]`.
    fn features(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let groups = self.config.groups;
        let h = b.conv(g, "stem", x);
        let h = g.group_norm(h, groups);
        let mut h = g.relu(h);
        for i in 0..self.config.widths.len() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            let r = b.conv(g, &format!("stage.{i}.conv1"), h);
            let r = g.group_norm(r, groups);
            let r = g.relu(r);
            let r = b.conv(g, &format!("stage.{i}.conv2"), r);
            let r = g.group_norm(r, groups);
            let skip_name = format!("stage.{i}.skip");
            let skip = if b.weights().get(&format!("{skip_name}.weight")).is_some() { b.dense(g, &skip_name, h) } else { h };
            let sum = g.add(r, skip);
            h = g.relu(sum);
        }
        g.global_avg_pool(h)
    }

    fn logits(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let f = self.features(g, b, x);
        b.dense(g, "head", f)
    }

    /// Class probabilities for one image.
    pub fn predict_proba(&self, image: &Image) -> Vec<f64> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.weights);
        let x = g.constant(self.prepare(image));
        let z = self.logits(&mut g, &mut b, x);
        softmax_rows(g.value(z).data(), ClassLabel::ALL.len())
    }

    /// Penultimate (pooled) feature vector for one image.
    pub fn embed(&self, image: &Image) -> Vec<f64> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.weights);
        let x = g.constant(self.prepare(image));
        let f = self.features(&mut g, &mut b, x);
        g.value(f).data().to_vec()
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("validated non-empty")
    }
}

fn labeled_images(manifest: &Manifest, split: Split) -> Result<Vec<(Image, usize)>> {
    manifest.split_samples(split).map(|s| Ok(((*manifest.image(s)?).clone(), s.label.index()))).collect()
}

/// Trains from `init` on the train split with cross-entropy, random horizontal
/// flips (p = 0.5) and pixel normalization fitted on the training images.
pub fn train_classifier_from(
    init: &ClassifierModel,
    manifest: &Manifest,
    config: &TrainConfig,
) -> Result<ClassifierModel> {
    config.validate()?;
    let train = labeled_images(manifest, Split::Train)?;
    for label in ClassLabel::ALL {
        if !train.iter().any(|(_, y)| *y == label.index()) {
            return Err(Error::MissingClass(label.to_string()));
        }
    }
    let mut model = init.clone();
    let mut model_norm = fit_norm(&train);
    if config.epochs == 0 {
        model_norm = init.norm;
    }
    model.norm = model_norm;
    let selector = config.trainable.clone();
    let trainable = move |n: &str| selector.matches(n);
    let mut opt = Adam::new(config.learning_rate);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = crate::diffusion::epoch_batches(train.len(), config.batch_size, config.seed, epoch);
        for idx in &batches {
            let step_seed = seeds::derive_seed(config.seed, &format!("cls-step{step}"));
            let parts: Vec<(f64, _)> = idx
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = seeds::rng(seeds::derive_seed(step_seed, &format!("item{j}")));
                    let (img, y) = &train[i];
                    let img = if rng.random::<f64>() < 0.5 { img.hflip() } else { img.clone() };
                    let mut g = Graph::new();
                    let mut b = Binder::new(&model.weights, &trainable);
                    let x = g.constant(model.prepare(&img));
                    let z = model.logits(&mut g, &mut b, x);
                    let loss = g.cross_entropy(z, &[*y]);
                    let value = g.value(loss).data()[0];
                    let mut grads = g.backward(loss);
                    (value, b.collect(&mut grads))
                })
                .collect();
            let n = parts.len() as f64;
            let mut grads = Vec::with_capacity(parts.len());
            for (l, g) in parts {
                total += l / n;
                grads.push(g);
            }
            opt.step(&mut model.weights, &sum_grads(grads, 1.0 / n));
            step += 1;
        }
        log::debug!("classifier epoch {epoch}: loss {:.4}", total / batches.len() as f64);
    }
    Ok(model)
}

fn fit_norm(train: &[(Image, usize)]) -> (f64, f64) {
    let count = train.iter().map(|(i, _)| i.pixels().len()).sum::<usize>() as f64;
    let mean = train.iter().flat_map(|(i, _)| i.pixels()).sum::<f64>() / count;
    let var = train.iter().flat_map(|(i, _)| i.pixels()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    (mean, var.sqrt().max(1e-6))
}

/// Trains a freshly initialized classifier (seeded from `config.seed`).
pub fn train_classifier(manifest: &Manifest, config: &TrainConfig) -> Result<ClassifierModel> {
    let init = ClassifierModel::new(ClassifierConfig { seed: config.seed, ..Default::default() })?;
    train_classifier_from(&init, manifest, config)
}

/// Metrics of `model` on one split of `manifest`.
pub fn evaluate_classifier(model: &ClassifierModel, manifest: &Manifest, split: Split) -> Result<MetricsReport> {
    let data = labeled_images(manifest, split)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("no {split:?} samples to evaluate")));
    }
    let probs: Vec<Vec<f64>> = data.par_iter().map(|(img, _)| model.predict_proba(img)).collect();
    let labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    compute_metrics(&probs.concat(), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{phantom_manifest, split_stratified, PhantomConfig};

    fn toy() -> Manifest {
        let pc = PhantomConfig { image_size: 32, ..Default::default() };
        split_stratified(&phantom_manifest([6, 5, 5], &pc).unwrap(), 0.75, 2).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = ClassifierModel::new(ClassifierConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let t = Tensor::randn(&[1, 1, 64, 64], 1.0, &mut rng);
            let p = m.predict_proba(&Image::from_tensor(&t).unwrap());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epochs_is_identity_and_training_is_seeded() {
        let m = toy();
        let init = ClassifierModel::new(ClassifierConfig::default()).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert_eq!(train_classifier_from(&init, &m, &cfg).unwrap(), init);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let a = train_classifier(&m, &cfg).unwrap();
        assert_eq!(a, train_classifier(&m, &cfg).unwrap());
        assert_ne!(a.weights, init.weights);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.bin");
        a.save(&path).unwrap();
        assert_eq!(ClassifierModel::load(&path).unwrap(), a);
    }

    #[test]
    fn missing_class_is_an_error() {
        let mut m = toy();
        m.samples.retain(|s| s.label != ClassLabel::Normal);
        assert!(matches!(train_classifier(&m, &TrainConfig::default()), Err(Error::MissingClass(_))));
    }
}
