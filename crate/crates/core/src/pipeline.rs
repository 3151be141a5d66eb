//! Stage-by-stage training on a scene corpus, and the cached reference model used by the
//! evaluation suite.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{images_to_tensors, train_autoencoder, Autoencoder};
use crate::checkpoint::{adapter_prefix, fingerprint, Checkpoint, ModelConfig, Stage};
use crate::control::{make_control, train_adapter, ControlKind};
use crate::denoiser::{train_denoiser, UNet};
use crate::image::Image;
use crate::io::{load_meta, load_scene, split_indices};
use crate::nn::Params;
use crate::perceptual::train_extractor;
use crate::synth::{generate_scene, SceneTriple, SynthConfig, SynthScene};
use crate::train::{TrainConfig, TrainCurve};
use crate::{Error, Result};

/// Environment variable naming the directory that caches trained reference checkpoints.
pub const CACHE_ENV: &str = "ZSLDB_CACHE_DIR";

#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub triple: SceneTriple,
    /// Shape-class label, known for synthetic scenes only.
    pub label: Option<u32>,
}

impl SceneRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let triple = load_scene(dir)?;
        let label = load_meta(dir).ok().map(|m| m.label);
        Ok(Self { triple, label })
    }
}

impl From<SynthScene> for SceneRecord {
    fn from(s: SynthScene) -> Self {
        Self {
            label: Some(s.meta.label),
            triple: s.triple,
        }
    }
}

/// Training scenes plus a held-out set for the per-stage validation numbers.
pub struct Corpus {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub vae: TrainConfig,
    pub denoiser: TrainConfig,
    pub adapter: TrainConfig,
    pub extractor: TrainConfig,
}

impl Default for StageSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            vae: TrainConfig {
                batch_size: 8,
                learning_rate: 2e-3,
                steps: 1200,
                ..base.clone()
            },
            denoiser: TrainConfig {
                batch_size: 16,
                learning_rate: 1e-3,
                steps: 3000,
                seed: 1,
                ..base.clone()
            },
            adapter: TrainConfig {
                batch_size: 16,
                learning_rate: 1e-3,
                steps: 1500,
                seed: 2,
                ..base.clone()
            },
            extractor: TrainConfig {
                batch_size: 32,
                learning_rate: 2e-3,
                steps: 600,
                seed: 3,
                ..base
            },
        }
    }
}

impl StageSettings {
    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Vae => &self.vae,
            Stage::Denoiser => &self.denoiser,
            Stage::Adapter => &self.adapter,
            Stage::Extractor => &self.extractor,
        }
    }
}

fn sharp_images(records: &[SceneRecord]) -> Vec<Image> {
    records.iter().map(|r| r.triple.sharp.clone()).collect()
}

/// Encodes `(1, C, H, W)` images to latent means, in chunks.
pub fn encode_all(ae: &Autoencoder, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let z = ae.encode(&Tensor::cat(chunk, 0)?)?;
        for i in 0..chunk.len() {
            out.push(z.narrow(0, i, 1)?);
        }
    }
    Ok(out)
}

fn control_maps(records: &[SceneRecord], kind: ControlKind, device: &Device) -> Result<Vec<Tensor>> {
    records
        .iter()
        .map(|r| {
            let t = &r.triple;
            make_control(kind, Some(&t.depth), (t.sharp.height, t.sharp.width))?.to_tensor(device, DType::F32)
        })
        .collect()
}

fn labels(records: &[SceneRecord]) -> Result<Vec<u32>> {
    records
        .iter()
        .map(|r| {
            r.label.ok_or_else(|| Error::Config(format!("scene {} has no shape label for extractor training", r.triple.id)))
        })
        .collect()
}

/// Trains one stage into `ckpt`. Retraining a stage invalidates every stage that depends on
/// it. With `resume`, a completed denoiser continues from its recorded step counter.
pub fn train_stage(
    ckpt: &mut Checkpoint,
    stage: Stage,
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: bool,
    device: &Device,
) -> Result<Vec<TrainCurve>> {
    ckpt.require_prerequisites(stage)?;
    if corpus.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let model = ckpt.meta.model.clone();
    let frozen = |prefix: &str| Params::frozen(&ckpt.weights(prefix), DType::F32, device);
    let curves = match stage {
        Stage::Vae => {
            let mut images = sharp_images(&corpus.train);
            images.extend(corpus.train.iter().map(|r| r.triple.blurred.clone()));
            let train = images_to_tensors(&images, device)?;
            let held = images_to_tensors(&sharp_images(&corpus.val), device)?;
            let (params, curve) = train_autoencoder(&train, &held, &model.autoencoder, cfg, device)?;
            ckpt.set_weights("vae", &params.snapshot())?;
            ckpt.mark_complete(Stage::Vae, cfg.steps);
            vec![curve]
        }
        Stage::Denoiser => {
            let ae = Autoencoder::new(&frozen("vae")?, &model.autoencoder)?;
            let latents = encode_all(&ae, &images_to_tensors(&sharp_images(&corpus.train), device)?)?;
            let held = encode_all(&ae, &images_to_tensors(&sharp_images(&corpus.val), device)?)?;
            let raw = ckpt.weights("unet_train");
            let start = ckpt.steps(Stage::Denoiser);
            let resume_from = (resume && ckpt.is_complete(Stage::Denoiser) && !raw.is_empty()).then_some((&raw, start));
            if let Some((_, s)) = resume_from {
                info!("resuming denoiser at step {s}");
            }
            let schedule = model.noise_schedule()?;
            let (ema, params, curve) = train_denoiser(&latents, &held, &schedule, &model.unet, cfg, resume_from, device)?;
            let total = curve.first_step + cfg.steps;
            ckpt.set_weights("unet", &ema)?;
            ckpt.set_weights("unet_train", &params.snapshot())?;
            ckpt.mark_complete(Stage::Denoiser, total);
            vec![curve]
        }
        Stage::Adapter => {
            let ae = Autoencoder::new(&frozen("vae")?, &model.autoencoder)?;
            let unet = UNet::new(&frozen("unet")?, &model.unet)?;
            let schedule = model.noise_schedule()?;
            let latents = encode_all(&ae, &images_to_tensors(&sharp_images(&corpus.train), device)?)?;
            let held = encode_all(&ae, &images_to_tensors(&sharp_images(&corpus.val), device)?)?;
            let mut curves = Vec::new();
            for kind in [ControlKind::Depth, ControlKind::Edge] {
                let pairs: Vec<(Tensor, Tensor)> =
                    latents.iter().cloned().zip(control_maps(&corpus.train, kind, device)?).collect();
                let held_pairs: Vec<(Tensor, Tensor)> =
                    held.iter().cloned().zip(control_maps(&corpus.val, kind, device)?).collect();
                let (params, mut curve) = train_adapter(
                    &pairs,
                    &held_pairs,
                    &unet,
                    &schedule,
                    &model.adapter,
                    model.autoencoder.factor(),
                    cfg,
                    device,
                )?;
                curve.stage = format!("adapter-{kind}");
                ckpt.set_weights(adapter_prefix(kind)?, &params.snapshot())?;
                curves.push(curve);
            }
            ckpt.mark_complete(Stage::Adapter, cfg.steps);
            curves
        }
        Stage::Extractor => {
            let train = images_to_tensors(&sharp_images(&corpus.train), device)?;
            let held: Vec<(Tensor, u32)> = images_to_tensors(&sharp_images(&corpus.val), device)?
                .into_iter()
                .zip(labels(&corpus.val)?)
                .collect();
            let (params, curve) = train_extractor(&train, &labels(&corpus.train)?, &held, &model.extractor, cfg, device)?;
            ckpt.set_weights("extractor", &params.snapshot())?;
            ckpt.mark_complete(Stage::Extractor, cfg.steps);
            vec![curve]
        }
    };
    for dependent in Stage::ALL.into_iter().filter(|s| s.prerequisites().contains(&stage)) {
        if ckpt.meta.completed.remove(&dependent) {
            warn!("retraining `{stage}` invalidated the `{dependent}` stage");
        }
    }
    Ok(curves)
}

/// The synthetic corpus and training recipe behind the reference checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSetup {
    pub synth: SynthConfig,
    pub scenes: usize,
    pub ratios: (f64, f64, f64),
    pub model: ModelConfig,
    pub stages: StageSettings,
}

impl Default for ReferenceSetup {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            scenes: 600,
            ratios: (0.8, 0.1, 0.1),
            model: ModelConfig::default(),
            stages: StageSettings::default(),
        }
    }
}

impl ReferenceSetup {
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }

    /// Scenes of one split (`train`, `val` or `test`), regenerated from their seeds.
    pub fn split(&self, name: &str) -> Result<Vec<SynthScene>> {
        let (train, val, test) = split_indices(self.scenes, self.ratios, self.synth.seed)?;
        let idx = match name {
            "train" => train,
            "val" => val,
            "test" => test,
            other => return Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        };
        idx.into_iter().map(|i| generate_scene(&self.synth, i)).collect()
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let records = |name| -> Result<Vec<SceneRecord>> { Ok(self.split(name)?.into_iter().map(Into::into).collect()) };
        Ok(Corpus {
            train: records("train")?,
            val: records("val")?,
        })
    }
}

/// `$ZSLDB_CACHE_DIR`, falling back to a directory under the system temp dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("zsldb-cache"))
}

/// Location of the cached reference checkpoint for `setup`.
pub fn reference_path(setup: &ReferenceSetup, cache: &Path) -> Result<PathBuf> {
    Ok(cache.join(format!("reference-{}.safetensors", setup.fingerprint()?)))
}

/// Loads the reference checkpoint from `cache`, training and storing it first if absent.
/// Training curves of a fresh run are written next to it as JSON.
pub fn reference_checkpoint(setup: &ReferenceSetup, cache: &Path, device: &Device) -> Result<Checkpoint> {
    let path = reference_path(setup, cache)?;
    let stem = path.file_stem().expect("file name").to_string_lossy().to_string();
    if path.exists() {
        info!("loading cached reference model {}", path.display());
        return Checkpoint::load(&path);
    }
    info!("training reference model {stem}; this runs once per configuration");
    let corpus = setup.corpus()?;
    let mut ckpt = Checkpoint::new(setup.model.clone())?;
    let mut curves = Vec::new();
    for stage in Stage::ALL {
        curves.extend(train_stage(&mut ckpt, stage, &corpus, setup.stages.get(stage), false, device)?);
    }
    std::fs::create_dir_all(cache)?;
    std::fs::write(cache.join(format!("{stem}.curves.json")), serde_json::to_string_pretty(&curves)?)?;
    ckpt.save(&path)?;
    Ok(ckpt)
}
