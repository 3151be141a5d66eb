//! Unified checkpoint: every trained network in one safetensors file, with the model
//! configuration, noise schedule and training progress in its metadata.
//!
//! Tensor names carry a stage prefix: `vae.`, `unet.` (EMA weights used for inference),
//! `unet_train.` (raw weights for resuming), `adapter.depth.`, `adapter.edge.` and
//! `extractor.`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{Autoencoder, AutoencoderConfig};
use crate::control::{Adapter, AdapterConfig, ControlKind};
use crate::denoiser::{UNet, UNetConfig};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::nn::Params;
use crate::perceptual::{ExtractorConfig, FeatureExtractor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "zsldb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    Denoiser,
    Adapter,
    Extractor,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Vae, Stage::Denoiser, Stage::Adapter, Stage::Extractor];

    /// Stages that must be complete before this one can train.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Vae | Stage::Extractor => &[],
            Stage::Denoiser => &[Stage::Vae],
            Stage::Adapter => &[Stage::Vae, Stage::Denoiser],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Denoiser => "denoiser",
            Stage::Adapter => "adapter",
            Stage::Extractor => "extractor",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (vae, denoiser, adapter, extractor)")))
    }
}

/// Architecture of every network plus the diffusion process they were trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub autoencoder: AutoencoderConfig,
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
    pub extractor: ExtractorConfig,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            autoencoder: AutoencoderConfig::default(),
            unet: UNetConfig::default(),
            adapter: AdapterConfig::default(),
            extractor: ExtractorConfig::default(),
            schedule: ScheduleKind::Cosine,
            timesteps: 1000,
        }
    }
}

impl ModelConfig {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.timesteps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet.channels != self.autoencoder.latent_channels {
            return Err(Error::Config(format!(
                "unet.channels ({}) must equal autoencoder.latent_channels ({})",
                self.unet.channels, self.autoencoder.latent_channels
            )));
        }
        self.noise_schedule().map(|_| ())
    }
}

/// Short stable hex digest of any serializable value.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub completed: BTreeSet<Stage>,
    /// Optimizer steps taken so far, per stage.
    pub steps: BTreeMap<Stage, usize>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                model,
                completed: BTreeSet::new(),
                steps: BTreeMap::new(),
            },
            tensors: HashMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::data(path, format!("cannot read checkpoint: {e}")))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::data(path, format!("not a safetensors file: {e}")))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::data(path, "checkpoint metadata is missing"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(text).map_err(|e| Error::data(path, format!("invalid checkpoint metadata: {e}")))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(path, format!("unsupported checkpoint format {}", meta.format_version)));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok(Self { meta, tensors })
    }

    /// Writes atomically: the file is staged next to `path` and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        let mut entries: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let staging = path.with_extension("partial");
        safetensors::serialize_to_file(entries, Some(metadata), &staging)?;
        fs::rename(&staging, path)?;
        Ok(())
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.meta.completed.contains(&stage)
    }

    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.is_complete(stage) {
            Ok(())
        } else {
            Err(Error::Dependency(format!("checkpoint has no trained `{stage}` stage")))
        }
    }

    /// Fails with a dependency error naming the first missing prerequisite of `stage`.
    pub fn require_prerequisites(&self, stage: Stage) -> Result<()> {
        for &pre in stage.prerequisites() {
            if !self.is_complete(pre) {
                return Err(Error::Dependency(format!(
                    "stage `{stage}` needs a trained `{pre}` stage, which the checkpoint lacks"
                )));
            }
        }
        Ok(())
    }

    pub fn steps(&self, stage: Stage) -> usize {
        self.meta.steps.get(&stage).copied().unwrap_or(0)
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn weights(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Replaces every tensor under `prefix.`.
    pub fn set_weights(&mut self, prefix: &str, weights: &HashMap<String, Tensor>) -> Result<()> {
        let p = format!("{prefix}.");
        self.tensors.retain(|k, _| !k.starts_with(&p));
        for (k, v) in weights {
            self.tensors.insert(format!("{p}{k}"), v.to_device(&Device::Cpu)?.to_dtype(DType::F32)?);
        }
        Ok(())
    }

    pub fn mark_complete(&mut self, stage: Stage, total_steps: usize) {
        self.meta.completed.insert(stage);
        self.meta.steps.insert(stage, total_steps);
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }
}

pub fn adapter_prefix(kind: ControlKind) -> Result<&'static str> {
    match kind {
        ControlKind::Depth => Ok("adapter.depth"),
        ControlKind::Edge => Ok("adapter.edge"),
        ControlKind::None => Err(Error::Config("the unconditioned path has no adapter".into())),
    }
}

/// Frozen networks needed for deblurring, built from a complete checkpoint.
pub struct ModelBundle {
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub autoencoder: Autoencoder,
    pub unet: UNet,
    pub depth_adapter: Adapter,
    pub edge_adapter: Adapter,
    pub extractor: FeatureExtractor,
    pub dtype: DType,
    pub device: Device,
}

impl ModelBundle {
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        for stage in Stage::ALL {
            ckpt.require(stage)?;
        }
        let model = ckpt.meta.model.clone();
        let frozen = |prefix: &str| Params::frozen(&ckpt.weights(prefix), dtype, device);
        let factor = model.autoencoder.factor();
        let adapter = |kind| -> Result<Adapter> {
            Adapter::new(&frozen(adapter_prefix(kind)?)?, &model.adapter, &model.unet, factor)
        };
        Ok(Self {
            schedule: model.noise_schedule()?,
            autoencoder: Autoencoder::new(&frozen("vae")?, &model.autoencoder)?,
            unet: UNet::new(&frozen("unet")?, &model.unet)?,
            depth_adapter: adapter(ControlKind::Depth)?,
            edge_adapter: adapter(ControlKind::Edge)?,
            extractor: FeatureExtractor::new(&frozen("extractor")?, &model.extractor)?,
            model,
            dtype,
            device: device.clone(),
        })
    }

    pub fn adapter(&self, kind: ControlKind) -> Option<&Adapter> {
        match kind {
            ControlKind::Depth => Some(&self.depth_adapter),
            ControlKind::Edge => Some(&self.edge_adapter),
            ControlKind::None => None,
        }
    }
}
