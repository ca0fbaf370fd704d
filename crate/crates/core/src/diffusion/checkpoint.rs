use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserModel, ScheduleParams, UNetConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::params::{LoraAdapter, Weights, LORA_A_SUFFIX, LORA_B_SUFFIX};

const KIND: &str = "checkpoint";

/// Trained denoiser plus the schedule it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: ScheduleParams,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    target: String,
    rank: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: UNetConfig,
    schedule: ScheduleParams,
    config_digest: String,
    adapters: Vec<AdapterMeta>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let w = &self.model.weights;
        let mut tensors: Vec<_> = w.base().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let mut adapters = Vec::new();
        for (target, a) in w.adapters() {
            adapters.push(AdapterMeta { target: target.clone(), rank: a.rank, alpha: a.alpha });
            tensors.push((format!("{target}{LORA_A_SUFFIX}"), a.a.clone()));
            tensors.push((format!("{target}{LORA_B_SUFFIX}"), a.b.clone()));
        }
        let header = Header {
            arch: self.model.config.clone(),
            schedule: self.schedule,
            config_digest: self.config_digest.clone(),
            adapters,
        };
        Container::new(KIND, &header, tensors)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind(KIND)?;
        let header: Header = c.header_as()?;
        let mut tensors: std::collections::BTreeMap<String, _> = c.tensors.into_iter().collect();
        let mut adapters = Vec::new();
        for m in header.adapters {
            let a = tensors.remove(&format!("{}{LORA_A_SUFFIX}", m.target));
            let b = tensors.remove(&format!("{}{LORA_B_SUFFIX}", m.target));
            let (Some(a), Some(b)) = (a, b) else {
                return Err(Error::Format(format!("adapter factors missing for `{}`", m.target)));
            };
            adapters.push(LoraAdapter { target_name: m.target, rank: m.rank, alpha: m.alpha, a, b });
        }
        let reference = DenoiserModel::new(header.arch.clone(), 0)?;
        let mut weights = Weights::new();
        for (name, t) in tensors {
            match reference.weights.get(&name) {
                Some(r) if r.shape() == t.shape() => weights.insert(name, t),
                Some(r) => {
                    return Err(Error::ArchitectureMismatch(format!(
                        "`{name}` has shape {:?}, architecture expects {:?}",
                        t.shape(),
                        r.shape()
                    )))
                }
                None => return Err(Error::ArchitectureMismatch(format!("unexpected parameter `{name}`"))),
            }
        }
        if let Some(missing) = reference.weights.base().keys().find(|n| weights.get(n).is_none()) {
            return Err(Error::ArchitectureMismatch(format!("missing parameter `{missing}`")));
        }
        if !adapters.is_empty() {
            weights.install_adapters(adapters)?;
        }
        Ok(Self {
            model: DenoiserModel { config: header.arch, weights },
            schedule: header.schedule,
            config_digest: header.config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Loads a checkpoint and checks it was built for `arch`.
    pub fn load_expecting(path: &Path, arch: &UNetConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.model.config != arch {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint built for {:?}, expected {:?}",
                ck.model.config, arch
            )));
        }
        Ok(ck)
    }
}
