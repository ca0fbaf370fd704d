//! Command definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use busaug_core::adapters::{load_token, save_adapters, save_token, ti_items, train_textual_inversion, PromptEncoder};
use busaug_core::data::{ClassLabel, Manifest, Split};
use busaug_core::diffusion::{
    train_diffusion, Checkpoint, DenoiserModel, NoiseSchedule, ParamSelector, TrainConfig,
};
use busaug_core::eval::{
    evaluate_classifier, extract_features, fid, fid_stats, train_classifier_from, ClassifierConfig, ClassifierModel,
    FeatureExtractor, MetricsReport,
};
use busaug_core::pipeline::{
    augment_manifest, default_target, hybrid_generate, prepare_data, run_all, run_experiment, ExperimentArm, ExperimentConfig,
    GenerationConfig, OutputDir, SharedArtifacts,
};
use busaug_core::seeds::derive_seed;
use busaug_core::Error;

use crate::config::{self, ConfigError};
use crate::grid::{export_grid, method_title, GridColumn};
use crate::report::render_report;

/// Process exit status with a message.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: m.into() }
    }

    fn runtime(m: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: m.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self { code: EXIT_CONFIG, message: format!("config: {e}") }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingClassDir { .. }
            | Error::ImageRead { .. }
            | Error::ClassTooSmall(_)
            | Error::MissingClass(_)
            | Error::MissingFeature(_)
            | Error::Io { .. }
            | Error::Json(_) => EXIT_DATA,
            _ => EXIT_RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "busaug", version, about = "Diffusion-based class balancing for ultrasound-style images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the phantom dataset, split it and write images plus manifest.
    MakePhantoms {
        #[command(flatten)]
        common: Common,
    },
    /// Import a BUSI-layout directory, split it and write images plus manifest.
    IngestBusi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        root: PathBuf,
    },
    /// Pretrain a denoiser, or LoRA-fine-tune one with --init and --lora.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        lora: bool,
    },
    /// Learn the domain token against a frozen denoiser.
    TrainTi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate images for one class.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        label: ClassLabel,
        #[arg(long)]
        count: usize,
        /// Learned token file; enables the token prompt.
        #[arg(long)]
        token: Option<PathBuf>,
        #[arg(long)]
        img2img: bool,
    },
    /// Balance the train split with synthetic images.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        token: Option<PathBuf>,
        #[arg(long)]
        img2img: bool,
        /// Images per class; defaults to the config or the largest class.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Train the classifier on a manifest's train split.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a classifier on the val split, plus FID against a reference manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Manifest whose real train images are the FID reference.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run one experiment arm end to end.
    RunArm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arm: ExperimentArm,
    },
    /// Run all five arms, then write the report and grid.
    RunAll {
        #[command(flatten)]
        common: Common,
    },
    /// Compose the real-vs-generated image grid of a run directory.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
    },
    /// Render the results table of a run directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        /// Adds a recall column.
        #[arg(long)]
        recall: bool,
    },
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => config::parse_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    Ok(c)
}

/// `--out` if given, else a fresh directory under `$BUSAUG_RUN_DIR` (default `runs`).
fn out_dir(common: &Common, name: &str) -> CliResult<PathBuf> {
    let dir = match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os("BUSAUG_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| "runs".into());
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            root.join(format!("{ts}-{name}"))
        }
    };
    mkdir(&dir)?;
    Ok(dir)
}

fn mkdir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> CliResult {
    write(path, &(serde_json::to_string_pretty(v).map_err(|e| CliError::runtime(e.to_string()))? + "\n"))
}

fn echo_config(dir: &Path, c: &ExperimentConfig) -> CliResult {
    write(&dir.join("config.txt"), &config::echo(c))
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Ok(Manifest::load(path)?)
}

fn encoder(c: &ExperimentConfig) -> CliResult<PromptEncoder> {
    Ok(PromptEncoder::new(c.encoder.clone(), derive_seed(c.seed, "encoder"))?)
}

/// Loads a checkpoint, folding any LoRA adapters into the base weights.
fn load_model(path: &Path) -> CliResult<(DenoiserModel, NoiseSchedule)> {
    let ck = Checkpoint::load(path)?;
    let mut model = ck.model;
    if !model.weights.adapters().is_empty() {
        model.weights.merge_lora()?;
    }
    Ok((model, NoiseSchedule::from_params(ck.schedule)?))
}

fn encoder_with_token(c: &ExperimentConfig, token: Option<&Path>) -> CliResult<PromptEncoder> {
    let mut enc = encoder(c)?;
    if let Some(p) = token {
        load_token(p, &mut enc)?;
    }
    Ok(enc)
}

fn print_path(p: &Path) {
    println!("{}", p.display());
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::MakePhantoms { common } => {
            let mut c = load_config(&common)?;
            c.data.source = busaug_core::pipeline::DataSource::Phantom;
            write_dataset(&common, &c, "phantoms")
        }
        Command::IngestBusi { common, root } => {
            let mut c = load_config(&common)?;
            c.data.source = busaug_core::pipeline::DataSource::Busi;
            c.data.path = Some(root);
            write_dataset(&common, &c, "busi")
        }
        Command::TrainDiffusion { common, manifest, init, lora } => {
            let c = load_config(&common)?;
            let m = load_manifest(&manifest)?;
            let enc = encoder(&c)?;
            let dir = out_dir(&common, "diffusion")?;
            echo_config(&dir, &c)?;
            let schedule = NoiseSchedule::from_params(c.diffusion.schedule)?;
            let (ck, report) = if lora {
                let init = init.ok_or_else(|| CliError::usage("--lora needs --init <checkpoint>"))?;
                let (mut model, _) = load_model(&init)?;
                let targets = if c.lora.targets.is_empty() {
                    model.config.default_lora_targets()
                } else {
                    c.lora.targets.clone()
                };
                model.weights.attach_lora(&targets, c.lora.rank, c.lora.alpha, derive_seed(c.seed, "lora"))?;
                let tc = TrainConfig {
                    seed: derive_seed(c.seed, "finetune"),
                    trainable: ParamSelector::Lora,
                    ..c.diffusion.finetune.clone()
                };
                let out = train_diffusion(&model, &m, &enc, &schedule, &tc)?;
                save_adapters(&out.0.model.weights, &dir.join("lora.adapters"))?;
                out
            } else {
                let model = match init {
                    Some(p) => load_model(&p)?.0,
                    None => DenoiserModel::new(c.diffusion.unet.clone(), derive_seed(c.seed, "unet"))?,
                };
                let tc = TrainConfig { seed: derive_seed(c.seed, "pretrain"), ..c.diffusion.pretrain.clone() };
                train_diffusion(&model, &m, &enc, &schedule, &tc)?
            };
            let path = dir.join(if lora { "lora.ckpt" } else { "base.ckpt" });
            ck.save(&path)?;
            write_json(&dir.join("train_report.json"), &report)?;
            print_path(&path);
            Ok(())
        }
        Command::TrainTi { common, manifest, checkpoint } => {
            let c = load_config(&common)?;
            let m = load_manifest(&manifest)?;
            let (model, schedule) = load_model(&checkpoint)?;
            let mut enc = encoder(&c)?;
            enc.register_token(&c.ti.token, &c.ti.init_source, c.ti.n_vec)?;
            let items = ti_items(&m, &c.ti.token)?;
            let tc = busaug_core::adapters::TiConfig { seed: derive_seed(c.seed, "ti"), ..c.ti.clone() };
            let (emb, losses) = train_textual_inversion(&model, &enc, &items, &schedule, &tc)?;
            let dir = out_dir(&common, "ti")?;
            echo_config(&dir, &c)?;
            let path = dir.join("token.bin");
            save_token(&emb, &path)?;
            write_json(&dir.join("ti_losses.json"), &losses)?;
            print_path(&path);
            Ok(())
        }
        Command::Generate { common, checkpoint, label, count, token, img2img } => {
            let c = load_config(&common)?;
            let (model, schedule) = load_model(&checkpoint)?;
            let enc = encoder_with_token(&c, token.as_deref())?;
            let gen = GenerationConfig { use_ti: token.is_some(), use_img2img: img2img, ..c.generate.clone() };
            let (images, mut records) =
                hybrid_generate(&model, &enc, &schedule, model.config.image_size, label, count, &gen, None)?;
            let dir = out_dir(&common, "generate")?;
            for (img, rec) in images.iter().zip(records.iter_mut()) {
                let name = format!("{label}_{:06}.png", rec.seed);
                img.save_png(&dir.join(&name))?;
                rec.path = Some(name);
            }
            write_json(&dir.join("records.json"), &records)?;
            print_path(&dir);
            Ok(())
        }
        Command::Augment { common, manifest, checkpoint, token, img2img, target } => {
            let c = load_config(&common)?;
            let mut m = load_manifest(&manifest)?;
            m.materialize()?;
            let (model, schedule) = load_model(&checkpoint)?;
            let enc = encoder_with_token(&c, token.as_deref())?;
            let gen = GenerationConfig { use_ti: token.is_some(), use_img2img: img2img, ..c.generate.clone() };
            let target = target.or(c.target_per_class).unwrap_or_else(|| default_target(&m));
            let dir = out_dir(&common, "augment")?;
            let (out, run) =
                augment_manifest(&m, &model, &enc, &schedule, target, &gen, Some(OutputDir { root: &dir }), None)?;
            out.save(&dir.join("manifest.jsonl"))?;
            write_json(&dir.join("augmentation.json"), &run)?;
            print_path(&dir.join("manifest.jsonl"));
            Ok(())
        }
        Command::TrainClassifier { common, manifest } => {
            let c = load_config(&common)?;
            let m = load_manifest(&manifest)?;
            let init = ClassifierModel::new(ClassifierConfig {
                seed: derive_seed(c.seed, "classifier"),
                ..c.classifier_arch.clone()
            })?;
            let tc = TrainConfig { seed: derive_seed(c.seed, "classifier-train"), ..c.classifier.clone() };
            let model = train_classifier_from(&init, &m, &tc)?;
            let dir = out_dir(&common, "classifier")?;
            let path = dir.join("classifier.bin");
            model.save(&path)?;
            print_path(&path);
            Ok(())
        }
        Command::Evaluate { common, manifest, classifier, reference } => {
            let c = load_config(&common)?;
            let m = load_manifest(&manifest)?;
            let model = ClassifierModel::load(&classifier)?;
            let mut report = evaluate_classifier(&model, &m, Split::Val)?;
            if let Some(r) = reference {
                let real = load_manifest(&r)?;
                let ex = FeatureExtractor::default_random(derive_seed(c.seed, "fid"));
                report.fid = Some(fid_between(&real, &m, &ex)?);
            }
            let dir = out_dir(&common, "evaluate")?;
            let path = dir.join("report.json");
            write_json(&path, &report)?;
            print_path(&path);
            Ok(())
        }
        Command::RunArm { common, arm } => {
            let c = load_config(&common)?;
            config::validate(&c)?;
            let dir = out_dir(&common, arm.name())?;
            echo_config(&dir, &c)?;
            let data = prepare_data(&c)?;
            let mut shared = SharedArtifacts::new(&c, data)?;
            let ck = dir.join("checkpoints");
            mkdir(&ck)?;
            shared.checkpoint_dir = Some(ck);
            let data_dir = dir.join("data");
            mkdir(&data_dir)?;
            shared.manifest.save_with_images(&data_dir.join("manifest.jsonl"))?;
            let baseline = if c.eval.features == busaug_core::pipeline::FeatureSource::Classifier
                && arm != ExperimentArm::Baseline
            {
                Some(run_experiment(ExperimentArm::Baseline, &c, &mut shared, None, None)?.classifier)
            } else {
                None
            };
            let out = run_experiment(arm, &c, &mut shared, Some(&dir.join(arm.name())), baseline.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&out.report).map_err(|e| CliError::runtime(e.to_string()))?);
            Ok(())
        }
        Command::RunAll { common } => {
            let c = load_config(&common)?;
            config::validate(&c)?;
            let dir = out_dir(&common, "run-all")?;
            echo_config(&dir, &c)?;
            let outcomes = run_all(&c, Some(&dir))?;
            let reports: Vec<MetricsReport> = outcomes.into_iter().map(|o| o.report).collect();
            let md = write_report(&dir, &reports, false)?;
            write_grid(&dir, &dir.join("grid.png"))?;
            print!("{md}");
            Ok(())
        }
        Command::Grid { common, run } => {
            let out = match &common.out {
                Some(p) => p.clone(),
                None => run.join("grid.png"),
            };
            write_grid(&run, &out)?;
            print_path(&out);
            Ok(())
        }
        Command::Report { common: _, run, recall } => {
            let mut reports = Vec::new();
            for arm in ExperimentArm::ALL {
                let p = run.join(arm.name()).join("report.json");
                let text = fs::read_to_string(&p)
                    .map_err(|e| CliError { code: EXIT_DATA, message: format!("reading {}: {e}", p.display()) })?;
                let r: MetricsReport = serde_json::from_str(&text)
                    .map_err(|e| CliError { code: EXIT_DATA, message: format!("{}: {e}", p.display()) })?;
                reports.push(r);
            }
            print!("{}", write_report(&run, &reports, recall)?);
            Ok(())
        }
    }
}

fn write_dataset(common: &Common, c: &ExperimentConfig, name: &str) -> CliResult {
    config::validate(c)?;
    let mut m = prepare_data(c)?;
    let dir = out_dir(common, name)?;
    echo_config(&dir, c)?;
    let path = dir.join("manifest.jsonl");
    m.save_with_images(&path)?;
    for (split, counts) in [("train", m.counts(Some(Split::Train))), ("val", m.counts(Some(Split::Val)))] {
        let cells: Vec<String> = counts.iter().map(|(l, n)| format!("{l}={n}")).collect();
        eprintln!("{split}: {}", cells.join(" "));
    }
    print_path(&path);
    Ok(())
}

fn fid_between(reference: &Manifest, synthetic: &Manifest, ex: &FeatureExtractor) -> CliResult<f64> {
    let collect = |m: &Manifest, syn: bool| -> CliResult<Vec<(String, busaug_core::data::Image)>> {
        m.samples
            .iter()
            .filter(|s| s.synthetic == syn && (syn || s.split == Some(Split::Train)))
            .map(|s| Ok((s.path.clone(), (*m.image(s)?).clone())))
            .collect()
    };
    let (a, b) = (collect(reference, false)?, collect(synthetic, true)?);
    if b.len() < 2 {
        return Err(CliError { code: EXIT_DATA, message: "manifest has fewer than 2 synthetic images".into() });
    }
    let ra: Vec<_> = a.iter().map(|(k, i)| (k.clone(), i)).collect();
    let rb: Vec<_> = b.iter().map(|(k, i)| (k.clone(), i)).collect();
    let sa = fid_stats(&extract_features(&ra, ex)?)?;
    let sb = fid_stats(&extract_features(&rb, ex)?)?;
    Ok(fid(&sa, &sb)?)
}

fn write_report(dir: &Path, reports: &[MetricsReport], recall: bool) -> CliResult<String> {
    let r = render_report(reports, recall).map_err(|e| CliError { code: EXIT_DATA, message: e })?;
    write(&dir.join("report.md"), &r.markdown)?;
    write(&dir.join("report.json"), &r.json)?;
    Ok(r.markdown)
}

fn write_grid(run: &Path, out: &Path) -> CliResult {
    let data = load_manifest(&run.join("data").join("manifest.jsonl"))?;
    let arms: Vec<(ExperimentArm, Manifest)> = ExperimentArm::ALL[1..]
        .iter()
        .map(|&a| Ok((a, load_manifest(&run.join(a.name()).join("manifest.jsonl"))?)))
        .collect::<CliResult<_>>()?;
    let mut cols = vec![GridColumn { title: "REAL".into(), manifest: &data, synthetic: false }];
    for (arm, m) in &arms {
        cols.push(GridColumn { title: method_title(arm.name()), manifest: m, synthetic: true });
    }
    export_grid(&cols, &ClassLabel::ALL, out).map_err(|e| CliError { code: EXIT_DATA, message: e })
}
