//! Dataset records, ingestion, splitting, prompts and class balancing.

mod busi;
mod image;
mod phantom;
mod prompt;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::busi::ingest_busi;
pub use self::image::Image;
pub use self::phantom::{generate_phantom, generate_phantom_with_mask, phantom_manifest, PhantomConfig};
pub use self::prompt::{prompt_for_label, DEFAULT_TI_TOKEN};
pub use self::split::{balance_plan, split_stratified};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Benign,
    Malignant,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Benign, ClassLabel::Malignant, ClassLabel::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
            ClassLabel::Normal => "normal",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(ClassLabel::Benign),
            "malignant" => Ok(ClassLabel::Malignant),
            "normal" => Ok(ClassLabel::Normal),
            other => Err(Error::InvalidArgument(format!("unknown class label `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One dataset record. `path` is the image identity (relative to the manifest
/// root when on disk); `image` optionally holds the decoded pixels in memory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sample {
    pub path: String,
    pub label: ClassLabel,
    pub split: Option<Split>,
    pub prompt: String,
    pub synthetic: bool,
    pub seed: Option<u64>,
    #[serde(skip)]
    pub image: Option<Arc<Image>>,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.path == other.path
            && self.label == other.label
            && self.split == other.split
            && self.prompt == other.prompt
            && self.synthetic == other.synthetic
            && self.seed == other.seed
    }
}

impl Sample {
    pub fn real(path: impl Into<String>, label: ClassLabel, image: Option<Arc<Image>>) -> Self {
        Self {
            path: path.into(),
            label,
            split: None,
            prompt: prompt_for_label(label, false, "").expect("plain prompts are infallible"),
            synthetic: false,
            seed: None,
            image,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub source: String,
    pub creation_seed: u64,
    pub image_size: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    pub meta: ManifestMeta,
    /// Directory that relative sample paths resolve against.
    pub root: PathBuf,
}

pub type ClassCounts = BTreeMap<ClassLabel, usize>;

impl Manifest {
    pub fn new(samples: Vec<Sample>, meta: ManifestMeta) -> Self {
        Self { samples, meta, root: PathBuf::new() }
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    pub fn counts(&self, split: Option<Split>) -> ClassCounts {
        let mut counts: ClassCounts = ClassLabel::ALL.iter().map(|&l| (l, 0)).collect();
        for s in self.samples.iter().filter(|s| split.is_none() || s.split == split) {
            *counts.get_mut(&s.label).expect("all labels present") += 1;
        }
        counts
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    /// Decoded image for a sample: the in-memory copy if present, else loaded from disk.
    pub fn image(&self, sample: &Sample) -> Result<Arc<Image>> {
        if let Some(img) = &sample.image {
            return Ok(img.clone());
        }
        let path = self.root.join(&sample.path);
        Ok(Arc::new(Image::load(&path, self.meta.image_size)?))
    }

    /// Loads every image into memory.
    pub fn materialize(&mut self) -> Result<()> {
        for i in 0..self.samples.len() {
            if self.samples[i].image.is_none() {
                let img = self.image(&self.samples[i])?;
                self.samples[i].image = Some(img);
            }
        }
        Ok(())
    }

    /// SHA-256 over the JSON Lines body and the 8-bit pixels of every sample.
    pub fn digest(&self) -> Result<String> {
        let mut bytes = self.to_jsonl()?.into_bytes();
        for s in &self.samples {
            bytes.extend(self.image(s)?.to_u8());
        }
        Ok(crate::seeds::digest_hex(&bytes))
    }

    /// JSON Lines body, one sample per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `path` (JSON Lines) and `path` + `.meta.json` beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let meta = serde_json::to_string_pretty(&self.meta)? + "\n";
        let mp = meta_path(path);
        fs::write(&mp, meta).map_err(|e| Error::io(format!("writing {}", mp.display()), e))
    }

    /// Writes every sample's pixels as an 8-bit PNG under the manifest's
    /// directory, then the manifest itself, and re-roots `self` there.
    pub fn save_with_images(&mut self, path: &Path) -> Result<()> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for s in &self.samples {
            let img = self.image(s)?;
            let target = root.join(&s.path);
            if let Some(dir) = target.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            }
            img.save_png(&target)?;
        }
        self.root = root;
        self.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            samples.push(serde_json::from_str::<Sample>(line)?);
        }
        let mp = meta_path(path);
        let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(format!("reading {}", mp.display()), e))?;
        let meta = serde_json::from_str(&meta_text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { samples, meta, root })
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}
