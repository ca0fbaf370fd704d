//! The five-arm experiment: baseline plus four generation variants.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::{augment_manifest, train_counts, AugmentationRun, OutputDir};
use super::generate::{GenerationConfig, Text2ImgCache};
use crate::adapters::{
    save_adapters, save_token, ti_items, train_textual_inversion, EncoderConfig, PromptEncoder, TiConfig,
    TokenEmbedding,
};
use crate::data::{ingest_busi, phantom_manifest, split_stratified, Image, Manifest, PhantomConfig, Split};
use crate::diffusion::{
    train_diffusion, Checkpoint, DenoiserModel, NoiseSchedule, ParamSelector, ScheduleParams, TrainConfig, UNetConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_classifier, extract_features, fid, fid_stats, train_classifier_from, ClassifierConfig, ClassifierModel,
    FeatureExtractor, FeatureTable, MetricsReport,
};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentArm {
    Baseline,
    Sd,
    SdImg2img,
    SdTi,
    SdTiImg2img,
}

impl ExperimentArm {
    pub const ALL: [ExperimentArm; 5] = [
        ExperimentArm::Baseline,
        ExperimentArm::Sd,
        ExperimentArm::SdImg2img,
        ExperimentArm::SdTi,
        ExperimentArm::SdTiImg2img,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentArm::Baseline => "baseline",
            ExperimentArm::Sd => "sd",
            ExperimentArm::SdImg2img => "sd_img2img",
            ExperimentArm::SdTi => "sd_ti",
            ExperimentArm::SdTiImg2img => "sd_ti_img2img",
        }
    }

    /// `(use_ti, use_img2img)`; `None` for the baseline.
    pub fn flags(self) -> Option<(bool, bool)> {
        match self {
            ExperimentArm::Baseline => None,
            ExperimentArm::Sd => Some((false, false)),
            ExperimentArm::SdImg2img => Some((false, true)),
            ExperimentArm::SdTi => Some((true, false)),
            ExperimentArm::SdTiImg2img => Some((true, true)),
        }
    }

    /// Row label in the results table.
    pub fn display_name(self) -> &'static str {
        match self {
            ExperimentArm::Baseline => "Baseline (Original Images)",
            ExperimentArm::Sd => "SD",
            ExperimentArm::SdImg2img => "SD + img2img",
            ExperimentArm::SdTi => "SD + TI",
            ExperimentArm::SdTiImg2img => "SD + TI + img2img",
        }
    }
}

impl fmt::Display for ExperimentArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown arm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Phantom,
    /// BUSI-layout directory at `DataConfig::path`.
    Busi,
    /// Existing manifest file at `DataConfig::path`.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Phantom counts per class (benign, malignant, normal).
    pub counts: [usize; 3],
    pub train_fraction: f64,
    pub phantom: PhantomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Phantom, path: None, counts: [168, 81, 51], train_fraction: 0.8, phantom: PhantomConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    /// Full-parameter training of the base denoiser on the real train split.
    pub pretrain: TrainConfig,
    /// LoRA fine-tuning of the pretrained denoiser.
    pub finetune: TrainConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: ScheduleParams::default(),
            pretrain: TrainConfig { learning_rate: 1e-3, batch_size: 4, epochs: 30, ..Default::default() },
            finetune: TrainConfig { trainable: ParamSelector::Lora, epochs: 5, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Empty means the model's default targets.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0, targets: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    RandomConv,
    /// Penultimate layer of the baseline classifier.
    Classifier,
    /// Feature file at `EvalConfig::feature_file`.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub features: FeatureSource,
    pub feature_file: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { features: FeatureSource::RandomConv, feature_file: None }
    }
}

/// Everything one experiment needs. Stage seeds derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub lora: LoraConfig,
    pub ti: TiConfig,
    pub generate: GenerationConfig,
    /// `None` balances to [`default_target`].
    pub target_per_class: Option<usize>,
    pub classifier: TrainConfig,
    pub classifier_arch: ClassifierConfig,
    pub eval: EvalConfig,
}


impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("data.train_fraction must be in (0, 1)".into()));
        }
        if self.data.phantom.image_size != self.diffusion.unet.image_size {
            return Err(Error::InvalidArgument(format!(
                "data.image_size {} differs from the denoiser's {}",
                self.data.phantom.image_size, self.diffusion.unet.image_size
            )));
        }
        if self.data.source != DataSource::Phantom && self.data.path.is_none() {
            return Err(Error::InvalidArgument(format!("data source {:?} needs data.path", self.data.source)));
        }
        if self.eval.features == FeatureSource::Precomputed && self.eval.feature_file.is_none() {
            return Err(Error::InvalidArgument("precomputed features need eval.feature_file".into()));
        }
        self.data.phantom.validate()?;
        self.diffusion.unet.validate()?;
        NoiseSchedule::from_params(self.diffusion.schedule)?;
        self.diffusion.pretrain.validate()?;
        self.diffusion.finetune.validate()?;
        self.ti.validate()?;
        self.generate.validate()?;
        self.classifier.validate()?;
        if self.lora.rank == 0 {
            return Err(Error::InvalidArgument("lora.rank must be >= 1".into()));
        }
        if self.encoder.cond_dim != self.diffusion.unet.cond_dim {
            return Err(Error::InvalidArgument("encoder cond_dim must match the denoiser's cond_dim".into()));
        }
        Ok(())
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        seeds::derive_seed(self.seed, stage)
    }
}

fn data_path(data: &DataConfig) -> Result<&Path> {
    data.path.as_deref().ok_or_else(|| Error::InvalidArgument(format!("data source {:?} needs data.path", data.source)))
}

/// Loads (or generates) the dataset described by `config` and splits it.
pub fn prepare_data(config: &ExperimentConfig) -> Result<Manifest> {
    let data = &config.data;
    let size = data.phantom.image_size;
    let mut manifest = match &data.source {
        DataSource::Phantom => {
            let pc = PhantomConfig { seed: config.stage_seed("phantom"), ..data.phantom.clone() };
            phantom_manifest(data.counts, &pc)?
        }
        DataSource::Busi => ingest_busi(data_path(data)?, size)?,
        DataSource::Manifest => {
            let path = data_path(data)?;
            let mut m = Manifest::load(path)?;
            m.materialize()?;
            m
        }
    };
    if manifest.samples.iter().any(|s| s.split.is_none()) {
        manifest = split_stratified(&manifest, data.train_fraction, config.stage_seed("split"))?;
    }
    Ok(manifest)
}

/// One more than the largest train class, so every class receives at least
/// one synthetic image.
pub fn default_target(manifest: &Manifest) -> usize {
    manifest.counts(Some(Split::Train)).values().copied().max().unwrap_or(0) + 1
}

/// Models shared between arms: trained once, reused by every arm that needs them.
pub struct SharedArtifacts {
    pub manifest: Manifest,
    pub encoder: PromptEncoder,
    pub schedule: NoiseSchedule,
    base: Option<DenoiserModel>,
    lora: Option<(Checkpoint, DenoiserModel)>,
    token: Option<TokenEmbedding>,
    ti_encoder: Option<PromptEncoder>,
    pub cache: Text2ImgCache,
    /// Where checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl SharedArtifacts {
    pub fn new(config: &ExperimentConfig, manifest: Manifest) -> Result<Self> {
        config.validate()?;
        if manifest.image_size() != config.diffusion.unet.image_size {
            return Err(Error::InvalidArgument(format!(
                "dataset images are {}px, denoiser expects {}px",
                manifest.image_size(),
                config.diffusion.unet.image_size
            )));
        }
        Ok(Self {
            manifest,
            encoder: PromptEncoder::new(config.encoder.clone(), config.stage_seed("encoder"))?,
            schedule: NoiseSchedule::from_params(config.diffusion.schedule)?,
            base: None,
            lora: None,
            token: None,
            ti_encoder: None,
            cache: Text2ImgCache::new(),
            checkpoint_dir: None,
        })
    }

    /// Denoiser pretrained on the real train split (stands in for public pretrained weights).
    pub fn base_model(&mut self, config: &ExperimentConfig) -> Result<&DenoiserModel> {
        if self.base.is_none() {
            log::info!("pretraining base denoiser");
            let init = DenoiserModel::new(config.diffusion.unet.clone(), config.stage_seed("unet"))?;
            let tc = TrainConfig { seed: config.stage_seed("pretrain"), ..config.diffusion.pretrain.clone() };
            let (ck, report) = train_diffusion(&init, &self.manifest, &self.encoder, &self.schedule, &tc)?;
            log::info!("pretrain losses: {:?}", report.epoch_losses);
            if let Some(dir) = &self.checkpoint_dir {
                ck.save(&dir.join("base.ckpt"))?;
            }
            self.base = Some(ck.model);
        }
        Ok(self.base.as_ref().expect("set above"))
    }

    /// LoRA-fine-tuned, merged denoiser.
    pub fn lora_model(&mut self, config: &ExperimentConfig) -> Result<&DenoiserModel> {
        if self.lora.is_none() {
            let mut model = self.base_model(config)?.clone();
            let targets = if config.lora.targets.is_empty() {
                model.config.default_lora_targets()
            } else {
                config.lora.targets.clone()
            };
            model.weights.attach_lora(&targets, config.lora.rank, config.lora.alpha, config.stage_seed("lora"))?;
            log::info!("LoRA fine-tuning {} targets", targets.len());
            let tc = TrainConfig { seed: config.stage_seed("finetune"), ..config.diffusion.finetune.clone() };
            let (ck, _) = train_diffusion(&model, &self.manifest, &self.encoder, &self.schedule, &tc)?;
            if let Some(dir) = &self.checkpoint_dir {
                ck.save(&dir.join("lora.ckpt"))?;
                save_adapters(&ck.model.weights, &dir.join("lora.adapters"))?;
            }
            let mut merged = ck.model.clone();
            merged.weights.merge_lora()?;
            self.lora = Some((ck, merged));
        }
        Ok(&self.lora.as_ref().expect("set above").1)
    }

    /// Prompt encoder with the learned TI token installed.
    pub fn ti_encoder(&mut self, config: &ExperimentConfig) -> Result<&PromptEncoder> {
        if self.ti_encoder.is_none() {
            if config.ti.token != config.generate.ti_token {
                return Err(Error::InvalidArgument(format!(
                    "ti.token `{}` differs from generate.ti_token `{}`",
                    config.ti.token, config.generate.ti_token
                )));
            }
            let model = self.lora_model(config)?.clone();
            let mut enc = self.encoder.clone();
            enc.register_token(&config.ti.token, &config.ti.init_source, config.ti.n_vec)?;
            let items = ti_items(&self.manifest, &config.ti.token)?;
            let tc = TiConfig { seed: config.stage_seed("ti"), ..config.ti.clone() };
            log::info!("textual inversion: {} steps", tc.steps);
            let (emb, _) = train_textual_inversion(&model, &enc, &items, &self.schedule, &tc)?;
            enc.set_token_vectors(&emb)?;
            if let Some(dir) = &self.checkpoint_dir {
                save_token(&emb, &dir.join("token.bin"))?;
            }
            self.token = Some(emb);
            self.ti_encoder = Some(enc);
        }
        Ok(self.ti_encoder.as_ref().expect("set above"))
    }

    pub fn token(&self) -> Option<&TokenEmbedding> {
        self.token.as_ref()
    }
}

/// Result of one arm.
#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub arm: ExperimentArm,
    pub report: MetricsReport,
    pub manifest: Manifest,
    pub augmentation: Option<AugmentationRun>,
    pub classifier: ClassifierModel,
}

fn feature_extractor(config: &ExperimentConfig, baseline: Option<&ClassifierModel>) -> Result<FeatureExtractor> {
    Ok(match &config.eval.features {
        FeatureSource::RandomConv => FeatureExtractor::default_random(config.stage_seed("fid")),
        FeatureSource::Classifier => {
            let m = baseline
                .ok_or_else(|| Error::InvalidArgument("classifier features need the baseline classifier".into()))?;
            FeatureExtractor::ClassifierPenultimate(Box::new(m.clone()))
        }
        FeatureSource::Precomputed => {
            let path = config
                .eval
                .feature_file
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("precomputed features need eval.feature_file".into()))?;
            FeatureExtractor::Precomputed(FeatureTable::load(path)?)
        }
    })
}

fn fid_against_train(
    manifest: &Manifest,
    synthetic: &Manifest,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let load = |m: &Manifest, synthetic: bool| -> Result<Vec<(String, std::sync::Arc<Image>)>> {
        m.split_samples(Split::Train)
            .filter(|s| s.synthetic == synthetic)
            .map(|s| Ok((s.path.clone(), m.image(s)?)))
            .collect()
    };
    let real = load(manifest, false)?;
    let fake = load(synthetic, true)?;
    if fake.len() < 2 {
        return Err(Error::InvalidArgument(format!("FID needs at least 2 synthetic images, got {}", fake.len())));
    }
    let keyed = |v: &[(String, std::sync::Arc<Image>)]| -> Vec<(String, Image)> {
        v.iter().map(|(k, i)| (k.clone(), (**i).clone())).collect()
    };
    let (r, f) = (keyed(&real), keyed(&fake));
    let rr: Vec<(String, &Image)> = r.iter().map(|(k, i)| (k.clone(), i)).collect();
    let ff: Vec<(String, &Image)> = f.iter().map(|(k, i)| (k.clone(), i)).collect();
    let a = fid_stats(&extract_features(&rr, extractor)?)?;
    let b = fid_stats(&extract_features(&ff, extractor)?)?;
    fid(&a, &b)
}

/// Runs one arm. With `out_dir`, the arm's manifest, images and report land there.
pub fn run_experiment(
    arm: ExperimentArm,
    config: &ExperimentConfig,
    shared: &mut SharedArtifacts,
    out_dir: Option<&Path>,
    baseline_classifier: Option<&ClassifierModel>,
) -> Result<ArmOutcome> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let real_counts = shared.manifest.counts(Some(Split::Train));
    let target = config.target_per_class.unwrap_or_else(|| default_target(&shared.manifest));
    let (manifest, augmentation) = match arm.flags() {
        None => (shared.manifest.clone(), None),
        Some((use_ti, use_img2img)) => {
            let model = shared.lora_model(config)?.clone();
            let encoder = if use_ti { shared.ti_encoder(config)?.clone() } else { shared.encoder.clone() };
            let gen = GenerationConfig { use_ti, use_img2img, ..config.generate.clone() };
            log::info!("{arm}: generating to {target} per class");
            let out = out_dir.map(|root| OutputDir { root });
            let (m, mut run) = augment_manifest(
                &shared.manifest,
                &model,
                &encoder,
                &shared.schedule,
                target,
                &gen,
                out,
                Some(&shared.cache),
            )?;
            run.arm = Some(arm.name().to_string());
            (m, Some(run))
        }
    };
    log::info!("{arm}: training classifier on {} train images", manifest.split_samples(Split::Train).count());
    let init = ClassifierModel::new(ClassifierConfig { seed: config.stage_seed("classifier"), ..config.classifier_arch.clone() })?;
    let tc = TrainConfig { seed: config.stage_seed("classifier-train"), ..config.classifier.clone() };
    let classifier = train_classifier_from(&init, &manifest, &tc)?;
    let mut report = evaluate_classifier(&classifier, &manifest, Split::Val)?;
    let meta = &mut report.metadata;
    meta.insert("arm".into(), arm.name().into());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("train_counts".into(), serde_json::to_string(&train_counts(&manifest))?);
    meta.insert("val_count".into(), manifest.split_samples(Split::Val).count().to_string());
    if augmentation.is_some() {
        let extractor = feature_extractor(config, baseline_classifier)?;
        report.fid = Some(fid_against_train(&shared.manifest, &manifest, &extractor)?);
        meta.insert("fid_reference".into(), "real train images vs this arm's synthetic images".into());
        meta.insert("fid_extractor".into(), extractor.name());
        let synthetic = manifest.samples.iter().filter(|s| s.synthetic).count();
        meta.insert("fid_counts".into(), format!("real={} synthetic={synthetic}", real_counts.values().sum::<usize>()));
    }
    if let Some(dir) = out_dir {
        manifest.save(&dir.join("manifest.jsonl"))?;
        write_json(&dir.join("report.json"), &report)?;
        if let Some(run) = &augmentation {
            write_json(&dir.join("augmentation.json"), run)?;
        }
    }
    Ok(ArmOutcome { arm, report, manifest, augmentation, classifier })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs all five arms in table order, sharing the denoiser, LoRA and TI token.
pub fn run_all(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<ArmOutcome>> {
    let manifest = prepare_data(config)?;
    let mut shared = SharedArtifacts::new(config, manifest)?;
    if let Some(dir) = out_dir {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(format!("creating {}", ck.display()), e))?;
        shared.checkpoint_dir = Some(ck);
        let data_dir = dir.join("data");
        fs::create_dir_all(&data_dir).map_err(|e| Error::io(format!("creating {}", data_dir.display()), e))?;
        shared.manifest.save_with_images(&data_dir.join("manifest.jsonl"))?;
    }
    let mut outcomes: Vec<ArmOutcome> = Vec::with_capacity(5);
    for arm in ExperimentArm::ALL {
        let arm_dir = out_dir.map(|d| d.join(arm.name()));
        let baseline = outcomes.first().map(|o| o.classifier.clone());
        outcomes.push(run_experiment(arm, config, &mut shared, arm_dir.as_deref(), baseline.as_ref())?);
    }
    Ok(outcomes)
}

/// Metrics reports keyed by arm name, in table order.
pub fn reports_by_arm(outcomes: &[ArmOutcome]) -> BTreeMap<String, MetricsReport> {
    outcomes.iter().map(|o| (o.arm.name().to_string(), o.report.clone())).collect()
}
