//! LoRA adapters, the prompt encoder, and textual inversion of a learned token.

mod encoder;
mod ti;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diffusion::DenoiserModel;
use crate::error::{Error, Result};
use crate::params::{LoraAdapter, Weights};

pub use self::encoder::{template_vocabulary, token_param, EncoderConfig, PromptEncoder, TokenEmbedding, EMBEDDING};
pub use self::ti::{ti_items, ti_loss, ti_loss_value, train_textual_inversion, TiConfig, TiItem};

/// Models whose parameters can carry LoRA adapters.
pub trait Adaptable {
    fn weights(&self) -> &Weights;
    fn weights_mut(&mut self) -> &mut Weights;

    fn attach_lora(&mut self, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<()> {
        self.weights_mut().attach_lora(targets, rank, alpha, seed)
    }

    fn merge_lora(&mut self) -> Result<()> {
        self.weights_mut().merge_lora()
    }
}

impl Adaptable for DenoiserModel {
    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }
}

impl Adaptable for PromptEncoder {
    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    fn attach_lora(&mut self, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<()> {
        PromptEncoder::attach_lora(self, targets, rank, alpha, seed)
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    target: String,
    rank: usize,
    alpha: f64,
}

pub fn save_adapters(weights: &Weights, path: &Path) -> Result<()> {
    if weights.adapters().is_empty() {
        return Err(Error::NoAdapters);
    }
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (i, a) in weights.adapters().values().enumerate() {
        entries.push(AdapterEntry { target: a.target_name.clone(), rank: a.rank, alpha: a.alpha });
        tensors.push((format!("{i}.a"), a.a.clone()));
        tensors.push((format!("{i}.b"), a.b.clone()));
    }
    Container::new("adapter", &entries, tensors)?.save(path)
}

pub fn load_adapters(path: &Path) -> Result<Vec<LoraAdapter>> {
    let c = Container::load(path)?;
    c.expect_kind("adapter")?;
    let entries: Vec<AdapterEntry> = c.header_as()?;
    if c.tensors.len() != 2 * entries.len() {
        return Err(Error::Format("adapter tensor count does not match header".into()));
    }
    let mut tensors = c.tensors.into_iter();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let (_, a) = tensors.next().expect("counted");
        let (_, b) = tensors.next().expect("counted");
        out.push(LoraAdapter { target_name: e.target, rank: e.rank, alpha: e.alpha, a, b });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TokenHeader {
    token: String,
    init_source: String,
}

pub fn save_token(emb: &TokenEmbedding, path: &Path) -> Result<()> {
    let header = TokenHeader { token: emb.token.clone(), init_source: emb.init_source.clone() };
    Container::new("token", &header, vec![("vectors".into(), emb.vectors.clone())])?.save(path)
}

pub fn read_token(path: &Path) -> Result<TokenEmbedding> {
    let c = Container::load(path)?;
    c.expect_kind("token")?;
    let header: TokenHeader = c.header_as()?;
    let (_, vectors) = c.tensors.into_iter().next().ok_or_else(|| Error::Format("token file has no vectors".into()))?;
    Ok(TokenEmbedding { token: header.token, vectors, init_source: header.init_source })
}

/// Reads a token file and registers the token into `encoder`.
pub fn load_token(path: &Path, encoder: &mut PromptEncoder) -> Result<TokenEmbedding> {
    let emb = read_token(path)?;
    encoder.install_token(emb.clone())?;
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffusion::UNetConfig;
    use crate::tensor::Tensor;

    #[test]
    fn adapter_and_token_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = UNetConfig { image_size: 8, widths: vec![4], emb_dim: 4, cond_dim: 3, groups: 2, patch: 2 };
        let mut m = DenoiserModel::new(cfg.clone(), 0).unwrap();
        m.attach_lora(&cfg.default_lora_targets(), 2, 2.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for a in m.weights.adapters().keys().cloned().collect::<Vec<_>>() {
            let b = m.weights.get_mut(&format!("{a}.lora_b")).unwrap();
            *b = Tensor::randn(b.shape(), 1.0, &mut rng);
        }
        let p = dir.path().join("lora.bin");
        save_adapters(&m.weights, &p).unwrap();
        let loaded = load_adapters(&p).unwrap();
        assert_eq!(loaded, m.weights.adapters().values().cloned().collect::<Vec<_>>());

        let mut fresh = DenoiserModel::new(cfg, 0).unwrap();
        fresh.weights.install_adapters(loaded).unwrap();
        assert_eq!(fresh, m);

        let mut enc = PromptEncoder::new(EncoderConfig::default(), 0).unwrap();
        let emb = enc.register_token("<ultrasound>", "image", 1).unwrap();
        let tp = dir.path().join("tok.bin");
        save_token(&emb, &tp).unwrap();
        let mut other = PromptEncoder::new(EncoderConfig::default(), 0).unwrap();
        assert_eq!(load_token(&tp, &mut other).unwrap(), emb);
        assert_eq!(other, enc);
        assert!(matches!(load_token(&tp, &mut other), Err(Error::DuplicateToken(_))));
    }

    #[test]
    fn saving_without_adapters_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(save_adapters(&Weights::new(), &dir.path().join("x")), Err(Error::NoAdapters)));
    }
}
