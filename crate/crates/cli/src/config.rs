//! Flat `section.key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must appear
//! in [`SCHEMA`]; missing keys keep their defaults. [`echo`] writes the full
//! resolved configuration in the same format, and parsing it again yields the
//! same tree.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use busaug_core::pipeline::{DataSource, ExperimentConfig, FeatureSource};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: `{k}`: {}", self.message),
            (None, Some(k)) => write!(f, "`{k}`: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> Result<(), String>;

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    get: Getter,
    set: Setter,
}

fn int(v: &str) -> Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn positive(v: &str) -> Result<usize, String> {
    match int(v)? {
        0 => Err("must be >= 1".into()),
        n => Ok(n),
    }
}

fn u64_(v: &str) -> Result<u64, String> {
    v.parse().map_err(|_| format!("expected an unsigned integer, got `{v}`"))
}

fn real(v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a number, got `{v}`"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err("must be finite".into())
    }
}

fn in_range(v: &str, lo: f64, hi: f64) -> Result<f64, String> {
    let x = real(v)?;
    if (lo..=hi).contains(&x) {
        Ok(x)
    } else {
        Err(format!("must be in [{lo}, {hi}], got {x}"))
    }
}

fn positive_real(v: &str) -> Result<f64, String> {
    let x = real(v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("must be > 0, got {x}"))
    }
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| positive(p.trim())).collect()
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

macro_rules! key {
    ($name:literal, $help:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Key {
            name: $name,
            help: $help,
            get: |$c: &ExperimentConfig| $get,
            set: |$m: &mut ExperimentConfig, $v: &str| -> Result<(), String> {
                $set;
                Ok(())
            },
        }
    };
}

/// Every accepted key, in echo order.
pub static SCHEMA: &[Key] = &[
    key!("seed", "root seed; every stage seed derives from it", |c| c.seed.to_string(), |c, v| c.seed = u64_(v)?),
    key!("data.source", "phantom | busi | manifest", |c| match c.data.source {
        DataSource::Phantom => "phantom".into(),
        DataSource::Busi => "busi".into(),
        DataSource::Manifest => "manifest".into(),
    }, |c, v| c.data.source = match v {
        "phantom" => DataSource::Phantom,
        "busi" => DataSource::Busi,
        "manifest" => DataSource::Manifest,
        _ => return Err(format!("expected phantom, busi or manifest, got `{v}`")),
    }),
    key!("data.path", "BUSI root or manifest file (busi/manifest sources)", |c| show_path(&c.data.path), |c, v| c.data.path = path(v)),
    key!("data.counts", "phantom images per class: benign,malignant,normal", |c| show_list(&c.data.counts), |c, v| {
        let l = list(v)?;
        c.data.counts = l.try_into().map_err(|_| "expected three counts".to_string())?;
    }),
    key!("data.train_fraction", "stratified train fraction, in (0, 1)", |c| c.data.train_fraction.to_string(), |c, v| {
        let x = real(v)?;
        if !(x > 0.0 && x < 1.0) {
            return Err(format!("must be in (0, 1), got {x}"));
        }
        c.data.train_fraction = x;
    }),
    key!("data.image_size", "image side in pixels", |c| c.data.phantom.image_size.to_string(), |c, v| {
        let n = positive(v)?;
        c.data.phantom.image_size = n;
        c.diffusion.unet.image_size = n;
    }),
    key!("data.speckle_scale", "phantom speckle grain size in pixels", |c| c.data.phantom.speckle_scale.to_string(), |c, v| c.data.phantom.speckle_scale = positive_real(v)?),
    key!("data.lesion_intensity", "phantom lesion echo level, in [0, 1]", |c| c.data.phantom.lesion_intensity.to_string(), |c, v| c.data.phantom.lesion_intensity = in_range(v, 0.0, 1.0)?),
    key!("data.background_intensity", "phantom tissue echo level, in [0, 1]", |c| c.data.phantom.background_intensity.to_string(), |c, v| c.data.phantom.background_intensity = in_range(v, 0.0, 1.0)?),
    key!("encoder.embed_dim", "token embedding width", |c| c.encoder.embed_dim.to_string(), |c, v| c.encoder.embed_dim = positive(v)?),
    key!("encoder.hidden_dim", "prompt encoder hidden width", |c| c.encoder.hidden_dim.to_string(), |c, v| c.encoder.hidden_dim = positive(v)?),
    key!("encoder.cond_dim", "conditioning vector width", |c| c.encoder.cond_dim.to_string(), |c, v| {
        let n = positive(v)?;
        c.encoder.cond_dim = n;
        c.diffusion.unet.cond_dim = n;
    }),
    key!("unet.patch", "space-to-depth factor", |c| c.diffusion.unet.patch.to_string(), |c, v| c.diffusion.unet.patch = positive(v)?),
    key!("unet.widths", "channels per resolution level", |c| show_list(&c.diffusion.unet.widths), |c, v| c.diffusion.unet.widths = list(v)?),
    key!("unet.emb_dim", "timestep embedding width, even", |c| c.diffusion.unet.emb_dim.to_string(), |c, v| c.diffusion.unet.emb_dim = positive(v)?),
    key!("unet.groups", "group-norm groups", |c| c.diffusion.unet.groups.to_string(), |c, v| c.diffusion.unet.groups = positive(v)?),
    key!("schedule.steps", "diffusion steps T", |c| c.diffusion.schedule.steps.to_string(), |c, v| c.diffusion.schedule.steps = positive(v)?),
    key!("schedule.beta_min", "first beta", |c| c.diffusion.schedule.beta_min.to_string(), |c, v| c.diffusion.schedule.beta_min = positive_real(v)?),
    key!("schedule.beta_max", "last beta", |c| c.diffusion.schedule.beta_max.to_string(), |c, v| c.diffusion.schedule.beta_max = positive_real(v)?),
    key!("pretrain.learning_rate", "base denoiser learning rate", |c| c.diffusion.pretrain.learning_rate.to_string(), |c, v| c.diffusion.pretrain.learning_rate = positive_real(v)?),
    key!("pretrain.batch_size", "base denoiser batch size", |c| c.diffusion.pretrain.batch_size.to_string(), |c, v| c.diffusion.pretrain.batch_size = positive(v)?),
    key!("pretrain.epochs", "base denoiser epochs", |c| c.diffusion.pretrain.epochs.to_string(), |c, v| c.diffusion.pretrain.epochs = int(v)?),
    key!("pretrain.cond_dropout", "probability of training with empty conditioning", |c| c.diffusion.pretrain.cond_dropout.to_string(), |c, v| c.diffusion.pretrain.cond_dropout = in_range(v, 0.0, 1.0)?),
    key!("finetune.learning_rate", "LoRA learning rate", |c| c.diffusion.finetune.learning_rate.to_string(), |c, v| c.diffusion.finetune.learning_rate = positive_real(v)?),
    key!("finetune.batch_size", "LoRA batch size", |c| c.diffusion.finetune.batch_size.to_string(), |c, v| c.diffusion.finetune.batch_size = positive(v)?),
    key!("finetune.epochs", "LoRA epochs", |c| c.diffusion.finetune.epochs.to_string(), |c, v| c.diffusion.finetune.epochs = int(v)?),
    key!("finetune.cond_dropout", "probability of training with empty conditioning", |c| c.diffusion.finetune.cond_dropout.to_string(), |c, v| c.diffusion.finetune.cond_dropout = in_range(v, 0.0, 1.0)?),
    key!("lora.rank", "adapter rank", |c| c.lora.rank.to_string(), |c, v| c.lora.rank = positive(v)?),
    key!("lora.alpha", "adapter scale numerator (scale = alpha / rank)", |c| c.lora.alpha.to_string(), |c, v| c.lora.alpha = real(v)?),
    key!("lora.targets", "comma-separated weight names; empty uses the defaults", |c| c.lora.targets.join(","), |c, v| {
        c.lora.targets = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    }),
    key!("ti.token", "learned token, written as <word>", |c| c.ti.token.clone(), |c, v| {
        if !(v.len() > 2 && v.starts_with('<') && v.ends_with('>')) {
            return Err(format!("expected a token like <ultrasound>, got `{v}`"));
        }
        c.ti.token = v.to_string();
        c.generate.ti_token = v.to_string();
    }),
    key!("ti.init_source", "word the token starts from, or `mean`", |c| c.ti.init_source.clone(), |c, v| c.ti.init_source = v.to_string()),
    key!("ti.n_vec", "vectors per token", |c| c.ti.n_vec.to_string(), |c, v| c.ti.n_vec = positive(v)?),
    key!("ti.steps", "optimization steps", |c| c.ti.steps.to_string(), |c, v| c.ti.steps = int(v)?),
    key!("ti.learning_rate", "embedding learning rate", |c| c.ti.learning_rate.to_string(), |c, v| c.ti.learning_rate = positive_real(v)?),
    key!("ti.batch_size", "images per step", |c| c.ti.batch_size.to_string(), |c, v| c.ti.batch_size = positive(v)?),
    key!("generate.strength", "img2img denoising strength, in [0, 1]", |c| c.generate.strength.to_string(), |c, v| c.generate.strength = in_range(v, 0.0, 1.0)?),
    key!("generate.sampler_steps", "DDIM steps", |c| c.generate.sampler_steps.to_string(), |c, v| c.generate.sampler_steps = positive(v)?),
    key!("generate.guidance", "classifier-free guidance scale; 1 disables it", |c| c.generate.guidance.to_string(), |c, v| c.generate.guidance = real(v)?),
    key!("generate.seed_base", "seed of the first synthetic image", |c| c.generate.seed_base.to_string(), |c, v| c.generate.seed_base = u64_(v)?),
    key!("augment.target", "images per class after augmentation; 0 = largest train class + 1", |c| c.target_per_class.unwrap_or(0).to_string(), |c, v| {
        let n = int(v)?;
        c.target_per_class = (n > 0).then_some(n);
    }),
    key!("classifier.learning_rate", "Adam learning rate", |c| c.classifier.learning_rate.to_string(), |c, v| c.classifier.learning_rate = positive_real(v)?),
    key!("classifier.batch_size", "batch size", |c| c.classifier.batch_size.to_string(), |c, v| c.classifier.batch_size = positive(v)?),
    key!("classifier.epochs", "epochs", |c| c.classifier.epochs.to_string(), |c, v| c.classifier.epochs = int(v)?),
    key!("classifier.input_size", "side the input is pooled to", |c| c.classifier_arch.input_size.to_string(), |c, v| c.classifier_arch.input_size = positive(v)?),
    key!("classifier.widths", "stem and stage channels", |c| show_list(&c.classifier_arch.widths), |c, v| c.classifier_arch.widths = list(v)?),
    key!("classifier.groups", "group-norm groups", |c| c.classifier_arch.groups.to_string(), |c, v| c.classifier_arch.groups = positive(v)?),
    key!("eval.features", "random_conv | classifier | precomputed", |c| match c.eval.features {
        FeatureSource::RandomConv => "random_conv".into(),
        FeatureSource::Classifier => "classifier".into(),
        FeatureSource::Precomputed => "precomputed".into(),
    }, |c, v| c.eval.features = match v {
        "random_conv" => FeatureSource::RandomConv,
        "classifier" => FeatureSource::Classifier,
        "precomputed" => FeatureSource::Precomputed,
        _ => return Err(format!("expected random_conv, classifier or precomputed, got `{v}`")),
    }),
    key!("eval.feature_file", "feature file for precomputed features", |c| show_path(&c.eval.feature_file), |c, v| c.eval.feature_file = path(v)),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

/// Applies one `key = value` assignment.
pub fn set(config: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let k = find_key(key).ok_or_else(|| ConfigError {
        line: None,
        key: Some(key.to_string()),
        message: "unknown key".into(),
    })?;
    (k.set)(config, value).map_err(|message| ConfigError { line: None, key: Some(key.to_string()), message })
}

/// Parses configuration text on top of the defaults and validates the result.
pub fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut config = ExperimentConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |e: ConfigError| ConfigError { line: Some(i + 1), ..e };
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
            line: Some(i + 1),
            key: None,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(at(ConfigError { line: None, key: Some(key.into()), message: "set more than once".into() }));
        }
        set(&mut config, key, value.trim()).map_err(at)?;
    }
    validate(&config)?;
    Ok(config)
}

pub fn validate(config: &ExperimentConfig) -> Result<(), ConfigError> {
    config.validate().map_err(|e| ConfigError { line: None, key: None, message: e.to_string() })
}

pub fn parse_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        key: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_str(&text)
}

/// The full resolved configuration, one key per line with its description.
pub fn echo(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    for k in SCHEMA {
        out.push_str(&format!("# {}\n{} = {}\n", k.help, k.name, (k.get)(config)));
    }
    out
}
