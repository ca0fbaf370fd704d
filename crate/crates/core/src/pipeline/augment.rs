//! Class balancing with synthetic images.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::generate::{hybrid_generate, GenerationConfig, GenerationRecord, Text2ImgCache};
use crate::adapters::PromptEncoder;
use crate::data::{balance_plan, ClassCounts, ClassLabel, Manifest, Sample, Split};
use crate::diffusion::{EpsPredictor, NoiseSchedule};
use crate::error::{Error, Result};

/// Provenance of one augmentation: inputs, plan, per-image records, and output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRun {
    pub arm: Option<String>,
    pub input_digest: String,
    pub target_per_class: usize,
    pub plan: ClassCounts,
    pub generation: GenerationConfig,
    pub records: Vec<GenerationRecord>,
    pub output_digest: String,
}

/// Where `augment_manifest` writes images; `None` keeps everything in memory.
pub struct OutputDir<'a> {
    pub root: &'a Path,
}

fn absolute(p: &Path) -> PathBuf {
    let p = if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir().unwrap_or_default().join(p) };
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

/// `target` expressed relative to directory `base`, using `..` where needed.
pub fn relative_to(target: &Path, base: &Path) -> String {
    let t = absolute(target);
    let b = absolute(base);
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".into(); bc.len() - common];
    parts.extend(tc[common..].iter().map(|c| c.as_os_str().to_string_lossy().into_owned()));
    parts.join("/")
}

/// Adds synthetic train samples until every class has `target_per_class`.
///
/// With an output directory, images go to `<root>/images/` and the returned
/// manifest is rooted there (real sample paths are rewritten relative to it).
/// If writing fails, every image written by this call is removed.
#[allow(clippy::too_many_arguments)]
pub fn augment_manifest(
    train_manifest: &Manifest,
    model: &dyn EpsPredictor,
    encoder: &PromptEncoder,
    schedule: &NoiseSchedule,
    target_per_class: usize,
    config: &GenerationConfig,
    out: Option<OutputDir>,
    cache: Option<&Text2ImgCache>,
) -> Result<(Manifest, AugmentationRun)> {
    config.validate()?;
    let input_digest = train_manifest.digest()?;
    let plan = balance_plan(&train_manifest.counts(Some(Split::Train)), target_per_class)?;
    let size = train_manifest.image_size();
    let mut generated = Vec::new();
    for label in ClassLabel::ALL {
        let count = plan[&label];
        let (images, records) = hybrid_generate(model, encoder, schedule, size, label, count, config, cache)?;
        generated.push((label, images, records));
    }

    let mut manifest = train_manifest.clone();
    if let Some(out) = &out {
        if !train_manifest.root.as_os_str().is_empty() {
            for s in &mut manifest.samples {
                s.path = relative_to(&train_manifest.root.join(&s.path), out.root);
            }
        }
        manifest.root = out.root.to_path_buf();
    }
    let mut written: Vec<PathBuf> = Vec::new();
    let mut all_records = Vec::new();
    let write_result = (|| -> Result<()> {
        if let Some(out) = &out {
            let dir = out.root.join("images");
            fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        for (label, images, records) in generated {
            for (i, (img, mut rec)) in images.into_iter().zip(records).enumerate() {
                let rel = format!("images/synthetic_{label}_{i:04}.png");
                if let Some(out) = &out {
                    let path = out.root.join(&rel);
                    img.save_png(&path)?;
                    written.push(path);
                }
                rec.path = Some(rel.clone());
                manifest.samples.push(Sample {
                    path: rel,
                    label,
                    split: Some(Split::Train),
                    prompt: rec.prompt.clone(),
                    synthetic: true,
                    seed: Some(rec.seed),
                    image: Some(Arc::new(img)),
                });
                all_records.push(rec);
            }
        }
        Ok(())
    })();
    if let Err(e) = write_result {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    let run = AugmentationRun {
        arm: None,
        input_digest,
        target_per_class,
        plan,
        generation: config.clone(),
        records: all_records,
        output_digest: manifest.digest()?,
    };
    Ok((manifest, run))
}

/// Per-class train counts, for reports.
pub fn train_counts(m: &Manifest) -> BTreeMap<String, usize> {
    m.counts(Some(Split::Train)).into_iter().map(|(l, c)| (l.to_string(), c)).collect()
}
