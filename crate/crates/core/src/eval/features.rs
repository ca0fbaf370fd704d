//! Feature extractors for FID.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::ClassifierModel;
use crate::container::Container;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Binder, Weights};
use crate::seeds;
use crate::tensor::Tensor;

/// Fixed output gain so that FID values land in a readable range.
pub const FEATURE_GAIN: f64 = 100.0;

/// Frozen random convolutional network; features are the per-channel mean and
/// standard deviation of its last activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomConvNet {
    pub seed: u64,
    pub input_size: usize,
    widths: Vec<usize>,
    weights: Weights,
}

impl RandomConvNet {
    pub fn new(seed: u64, input_size: usize) -> Self {
        let widths = vec![8, 16, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, "fid-features"));
        let mut w = Weights::new();
        let mut cin = 1;
        for (i, &c) in widths.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            w.insert(format!("conv{i}.weight"), Tensor::randn(&[c, cin, 3, 3], std, &mut rng));
            w.insert(format!("conv{i}.bias"), Tensor::randn(&[c], 0.1, &mut rng));
            cin = c;
        }
        Self { seed, input_size, widths, weights: w }
    }

    pub fn dim(&self) -> usize {
        2 * self.widths.last().expect("non-empty")
    }

    pub fn features(&self, image: &Image) -> Vec<f64> {
        let img = if image.size() == self.input_size { image.clone() } else { image.resized(self.input_size) };
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.weights);
        let mut h = g.constant(img.to_tensor());
        for i in 0..self.widths.len() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = b.conv(&mut g, &format!("conv{i}"), h);
            h = g.relu(h);
        }
        let v = g.value(h);
        let c = v.shape()[1];
        let inner = v.numel() / c;
        let mut means = Vec::with_capacity(c);
        let mut stds = Vec::with_capacity(c);
        for ch in v.data().chunks(inner) {
            let m = ch.iter().sum::<f64>() / inner as f64;
            let var = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / inner as f64;
            means.push(m);
            stds.push(var.sqrt());
        }
        means.extend(stds);
        means.iter().map(|v| v * FEATURE_GAIN).collect()
    }
}

/// Feature vectors keyed by image identity, loaded from a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub extractor: String,
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    extractor: String,
    dim: usize,
    keys: Vec<String>,
}

impl FeatureTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        let keys: Vec<String> = self.rows.keys().cloned().collect();
        let data: Vec<f64> = self.rows.values().flat_map(|r| r.iter().copied()).collect();
        let t = Tensor::new(vec![keys.len(), self.dim], data)?;
        let header = FeatureHeader { extractor: self.extractor.clone(), dim: self.dim, keys };
        Container::new("features", &header, vec![("features".into(), t)])?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind("features")?;
        let h: FeatureHeader = c.header_as()?;
        let (_, t) = c.tensors.into_iter().next().ok_or_else(|| Error::Format("feature file has no matrix".into()))?;
        if t.shape() != [h.keys.len(), h.dim] {
            return Err(Error::Format(format!("feature matrix {:?} does not match header", t.shape())));
        }
        let rows = h.keys.into_iter().zip(t.data().chunks(h.dim.max(1)).map(<[f64]>::to_vec)).collect();
        Ok(Self { extractor: h.extractor, dim: h.dim, rows })
    }
}

#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    RandomConv(RandomConvNet),
    ClassifierPenultimate(Box<ClassifierModel>),
    Precomputed(FeatureTable),
}

impl FeatureExtractor {
    /// The default extractor: a seeded random conv net at 64×64.
    pub fn default_random(seed: u64) -> Self {
        FeatureExtractor::RandomConv(RandomConvNet::new(seed, 64))
    }

    pub fn name(&self) -> String {
        match self {
            FeatureExtractor::RandomConv(n) => format!("random-conv(seed={})", n.seed),
            FeatureExtractor::ClassifierPenultimate(_) => "classifier-penultimate".into(),
            FeatureExtractor::Precomputed(t) => format!("precomputed({})", t.extractor),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::RandomConv(n) => n.dim(),
            FeatureExtractor::ClassifierPenultimate(m) => m.feature_dim(),
            FeatureExtractor::Precomputed(t) => t.dim,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        true
    }
}

/// `[n, d_f]` features for keyed images. Keys are only consulted by the
/// precomputed provider.
pub fn extract_features(images: &[(String, &Image)], extractor: &FeatureExtractor) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to extract features from".into()));
    }
    let d = extractor.dim();
    let rows: Vec<Result<Vec<f64>>> = images
        .par_iter()
        .map(|(key, img)| match extractor {
            FeatureExtractor::RandomConv(net) => Ok(net.features(img)),
            FeatureExtractor::ClassifierPenultimate(m) => Ok(m.embed(img)),
            FeatureExtractor::Precomputed(t) => {
                t.rows.get(key).cloned().ok_or_else(|| Error::MissingFeature(key.clone()))
            }
        })
        .collect();
    let mut data = Vec::with_capacity(images.len() * d);
    for r in rows {
        data.extend(r?);
    }
    Tensor::new(vec![images.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imgs() -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..3).map(|_| Image::from_tensor(&Tensor::randn(&[1, 1, 64, 64], 0.5, &mut rng)).unwrap().quantized()).collect()
    }

    #[test]
    fn random_conv_is_deterministic_and_row_wise() {
        let ims = imgs();
        let ex = FeatureExtractor::default_random(4);
        let keyed = vec![("a".to_string(), &ims[0]), ("b".to_string(), &ims[1]), ("a2".to_string(), &ims[0])];
        let f = extract_features(&keyed, &ex).unwrap();
        assert_eq!(f.shape(), &[3, 32]);
        assert_eq!(f, extract_features(&keyed, &FeatureExtractor::default_random(4)).unwrap());
        assert_eq!(f.data()[..32], f.data()[64..]);
        assert_ne!(f.data()[..32], f.data()[32..64]);
    }

    #[test]
    fn precomputed_round_trip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = (0..4).map(|i| (format!("img{i}.png"), Tensor::randn(&[5], 1.0, &mut rng).into_data())).collect();
        let table = FeatureTable { extractor: "inception-v3".into(), dim: 5, rows };
        let p = dir.path().join("f.bin");
        table.save(&p).unwrap();
        let back = FeatureTable::load(&p).unwrap();
        assert_eq!(back, table);
        let ims = imgs();
        let ex = FeatureExtractor::Precomputed(back);
        let f = extract_features(&[("img2.png".into(), &ims[0])], &ex).unwrap();
        assert_eq!(f.data(), &table.rows["img2.png"][..]);
        let err = extract_features(&[("nope.png".into(), &ims[0])], &ex).unwrap_err();
        assert!(matches!(err, Error::MissingFeature(k) if k == "nope.png"));
    }
}
