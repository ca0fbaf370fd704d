//! Bag-of-words prompt encoder: token embeddings, mean pooling, and a two-layer
//! projection to the conditioning dimension.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{prompt_for_label, ClassLabel, DEFAULT_TI_TOKEN};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Weights};
use crate::seeds;
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "embedding";
const TOKEN_PREFIX: &str = "token.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cond_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 32, hidden_dim: 64, cond_dim: 32 }
    }
}

/// A learned pseudo-word: `n_vec` embedding rows that stand in for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedding {
    pub token: String,
    /// `n_vec × embed_dim`
    pub vectors: Tensor,
    pub init_source: String,
}

impl TokenEmbedding {
    pub fn n_vec(&self) -> usize {
        self.vectors.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Piece {
    Word(usize),
    Learned(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    pub config: EncoderConfig,
    vocab: BTreeMap<String, usize>,
    learned: BTreeMap<String, String>,
    pub weights: Weights,
}

/// Parameter name holding the rows of a learned token.
pub fn token_param(token: &str) -> String {
    format!("{TOKEN_PREFIX}{token}")
}

fn normalize_word(word: &str) -> String {
    word.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Words of the six class prompt templates, excluding the TI placeholder.
pub fn template_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for label in ClassLabel::ALL {
        for ti in [false, true] {
            let prompt = prompt_for_label(label, ti, DEFAULT_TI_TOKEN).expect("default token is non-empty");
            for w in prompt.split_whitespace().filter(|&w| w != DEFAULT_TI_TOKEN) {
                let w = normalize_word(w);
                if !w.is_empty() && !words.contains(&w) {
                    words.push(w);
                }
            }
        }
    }
    words.sort();
    words
}

impl PromptEncoder {
    /// Randomly initialized encoder over the template vocabulary.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::with_vocabulary(config, &template_vocabulary(), seed)
    }

    pub fn with_vocabulary(config: EncoderConfig, words: &[String], seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden_dim == 0 || config.cond_dim == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be positive".into()));
        }
        let mut vocab = BTreeMap::new();
        for w in words {
            let n = normalize_word(w);
            if n.is_empty() || vocab.contains_key(&n) {
                return Err(Error::InvalidArgument(format!("bad or duplicate vocabulary word `{w}`")));
            }
            let next = vocab.len();
            vocab.insert(n, next);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, "encoder-init"));
        let (e, h, c) = (config.embed_dim, config.hidden_dim, config.cond_dim);
        let mut weights = Weights::new();
        weights.insert(EMBEDDING, Tensor::randn(&[vocab.len(), e], 1.0, &mut rng));
        weights.insert("proj1.weight", Tensor::randn(&[h, e], (2.0 / e as f64).sqrt(), &mut rng));
        weights.insert("proj1.bias", Tensor::zeros(&[h]));
        weights.insert("proj2.weight", Tensor::randn(&[c, h], (1.0 / h as f64).sqrt(), &mut rng));
        weights.insert("proj2.bias", Tensor::zeros(&[c]));
        Ok(Self { config, vocab, learned: BTreeMap::new(), weights })
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocab
    }

    pub fn has_token(&self, token: &str) -> bool {
        self.learned.contains_key(token)
    }

    pub fn learned_tokens(&self) -> impl Iterator<Item = &str> {
        self.learned.keys().map(String::as_str)
    }

    /// Embedding row of a base vocabulary word.
    pub fn word_embedding(&self, word: &str) -> Option<Vec<f64>> {
        let &i = self.vocab.get(&normalize_word(word))?;
        let e = self.config.embed_dim;
        Some(self.weights.get(EMBEDDING).expect("embedding table").data()[i * e..(i + 1) * e].to_vec())
    }

    fn tokenize(&self, prompt: &str, strict: bool) -> Result<Vec<Piece>> {
        let mut pieces = Vec::new();
        let mut unknown = Vec::new();
        for raw in prompt.split_whitespace() {
            if self.learned.contains_key(raw) {
                pieces.push(Piece::Learned(raw.to_string()));
                continue;
            }
            if raw.len() > 2 && raw.starts_with('<') && raw.ends_with('>') {
                unknown.push(raw.to_string());
                continue;
            }
            let w = normalize_word(raw);
            if w.is_empty() {
                continue;
            }
            match self.vocab.get(&w) {
                Some(&i) => pieces.push(Piece::Word(i)),
                None => unknown.push(raw.to_string()),
            }
        }
        if strict && !unknown.is_empty() {
            return Err(Error::UnknownTokens(unknown.join(", ")));
        }
        if pieces.is_empty() {
            return Err(Error::UnknownTokens(format!("no known tokens in `{prompt}`")));
        }
        Ok(pieces)
    }

    /// Fails if any word of `prompt` is outside the vocabulary and registered tokens.
    pub fn check_prompt(&self, prompt: &str) -> Result<()> {
        self.tokenize(prompt, true).map(|_| ())
    }

    /// Builds the conditioning vector `[1, cond_dim]` inside a graph.
    pub fn encode_graph(&self, g: &mut Graph, b: &mut Binder, prompt: &str) -> Result<Var> {
        let pieces = self.tokenize(prompt, true)?;
        let mut rows = Vec::with_capacity(pieces.len());
        for p in &pieces {
            rows.push(match p {
                Piece::Word(i) => {
                    let table = b.param(g, EMBEDDING);
                    g.gather(table, &[*i])
                }
                Piece::Learned(t) => b.param(g, &token_param(t)),
            });
        }
        let stacked = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
        let pooled = g.mean_rows(stacked);
        let h = b.dense(g, "proj1", pooled);
        let h = g.silu(h);
        Ok(b.dense(g, "proj2", h))
    }

    /// Conditioning vector for a prompt; unknown words are an error.
    pub fn encode(&self, prompt: &str) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.weights);
        let out = self.encode_graph(&mut g, &mut b, prompt)?;
        Ok(g.value(out).clone())
    }

    /// Adds a learnable token initialized from a vocabulary word or, with
    /// `init_source = "mean"`, from the column-wise mean of the base table.
    pub fn register_token(&mut self, token: &str, init_source: &str, n_vec: usize) -> Result<TokenEmbedding> {
        if n_vec == 0 {
            return Err(Error::InvalidArgument("n_vec must be >= 1".into()));
        }
        let e = self.config.embed_dim;
        let row = if init_source == "mean" {
            let table = self.weights.get(EMBEDDING).expect("embedding table");
            let v = self.vocab.len() as f64;
            let mut mean = vec![0.0; e];
            for r in table.data().chunks(e) {
                mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= v);
            mean
        } else {
            self.word_embedding(init_source)
                .ok_or_else(|| Error::UnknownTokens(format!("init word `{init_source}`")))?
        };
        let data = (0..n_vec).flat_map(|_| row.iter().copied()).collect();
        let emb = TokenEmbedding {
            token: token.to_string(),
            vectors: Tensor::new(vec![n_vec, e], data)?,
            init_source: init_source.to_string(),
        };
        self.install_token(emb.clone())?;
        Ok(emb)
    }

    /// Registers a token with given vectors (e.g. loaded from a token file).
    pub fn install_token(&mut self, emb: TokenEmbedding) -> Result<()> {
        let token = emb.token.trim();
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad token `{}`", emb.token)));
        }
        if self.learned.contains_key(token) || self.vocab.contains_key(token) {
            return Err(Error::DuplicateToken(token.to_string()));
        }
        if emb.vectors.shape().len() != 2 || emb.vectors.shape()[1] != self.config.embed_dim || emb.n_vec() == 0 {
            return Err(Error::Shape(format!(
                "token vectors {:?} do not match embedding dimension {}",
                emb.vectors.shape(),
                self.config.embed_dim
            )));
        }
        self.weights.insert(token_param(token), emb.vectors);
        self.learned.insert(token.to_string(), emb.init_source);
        Ok(())
    }

    /// Replaces the rows of an already registered token.
    pub fn set_token_vectors(&mut self, emb: &TokenEmbedding) -> Result<()> {
        let rows = self.weights.get_mut(&token_param(&emb.token)).ok_or_else(|| Error::UnregisteredToken(emb.token.clone()))?;
        if rows.shape() != emb.vectors.shape() {
            return Err(Error::Shape(format!("token rows {:?} vs {:?}", rows.shape(), emb.vectors.shape())));
        }
        *rows = emb.vectors.clone();
        Ok(())
    }

    /// Current rows of a registered token.
    pub fn token_embedding(&self, token: &str) -> Result<TokenEmbedding> {
        let init_source = self.learned.get(token).ok_or_else(|| Error::UnregisteredToken(token.to_string()))?;
        Ok(TokenEmbedding {
            token: token.to_string(),
            vectors: self.weights.get(&token_param(token)).expect("registered").clone(),
            init_source: init_source.clone(),
        })
    }

    /// Attaches LoRA adapters to encoder maps. Learned token rows stay trainable.
    pub fn attach_lora(&mut self, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<()> {
        self.weights.attach_lora(targets, rank, alpha, seed)?;
        for t in self.learned.keys() {
            self.weights.unfreeze(&token_param(t));
        }
        Ok(())
    }
}
