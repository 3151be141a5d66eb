//! Image-space regularizers: a feature-space perceptual distance and a differentiable
//! sharpness reward.

use candle_core::{DType, Device, Tensor, D};
use log::info;
use serde::{Deserialize, Serialize};

use crate::nn::{silu, Conv, Linear, Params};
use crate::ops;
use crate::train::{gather, Batches, TrainConfig, TrainCurve, Trainer};
use crate::{Error, Result};

/// Feature-space distance between two `(B, C, H, W)` images, returned as a rank-0 tensor.
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
}

/// Differentiable scalar reward of a `(B, C, H, W)` image; higher is better.
pub trait AestheticScorer: Send + Sync {
    fn reward(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub image_channels: usize,
    /// Width of each stage; every stage after the first halves the resolution.
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            widths: vec![16, 32, 32],
            classes: 3,
        }
    }
}

const FEATURE_EPS: f64 = 1e-6;

/// Small convolutional classifier whose stage outputs serve as perceptual features.
pub struct FeatureExtractor {
    stages: Vec<Conv>,
    head: Linear,
}

impl FeatureExtractor {
    pub fn new(p: &Params, cfg: &ExtractorConfig) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(Error::Config("extractor needs at least one stage".into()));
        }
        let mut stages = Vec::new();
        let mut ch = cfg.image_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(Conv::new(&p.pp(format!("stage{i}")), ch, w, 3, stride)?);
            ch = w;
        }
        let head = Linear::new(&p.pp("head"), ch, cfg.classes)?;
        Ok(Self { stages, head })
    }

    /// Activations after every stage.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.affine(2.0, -1.0)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            h = silu(&conv.forward(&h)?)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.features(x)?.pop().expect("at least one stage");
        self.head.forward(&last.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

impl PerceptualMetric for FeatureExtractor {
    /// Sum over taps of the mean squared difference of channel-unit-normalized features.
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("perceptual distance of {:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut acc: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = ops::mean_sq(
                &(ops::unit_normalize_channels(x, FEATURE_EPS)? - ops::unit_normalize_channels(y, FEATURE_EPS)?)?,
            )?;
            acc = Some(match acc {
                Some(s) => (s + d)?,
                None => d,
            });
        }
        Ok(acc.expect("at least one tap"))
    }
}

/// Saturating gradient-magnitude statistic: `tanh(gain * (mean |dx|_s + mean |dy|_s))` with
/// `|u|_s = sqrt(u^2 + eps)`. Blur lowers it; it is invariant to horizontal flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReward {
    pub gain: f64,
    pub eps: f64,
}

impl Default for SharpnessReward {
    fn default() -> Self {
        Self { gain: 8.0, eps: 1e-4 }
    }
}

impl AestheticScorer for SharpnessReward {
    fn reward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let dx = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?;
        let dy = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?;
        let mx = (dx.sqr()? + self.eps)?.sqrt()?.mean_all()?;
        let my = (dy.sqr()? + self.eps)?.sqrt()?.mean_all()?;
        Ok(((mx + my)? * self.gain)?.tanh()?)
    }
}

/// Trains the extractor as a shape classifier on `(1, C, H, W)` images with integer labels.
/// The curve's `validation` is held-out accuracy and `baseline` chance level.
pub fn train_extractor(
    images: &[Tensor],
    labels: &[u32],
    held_out: &[(Tensor, u32)],
    ext_cfg: &ExtractorConfig,
    cfg: &TrainConfig,
    device: &Device,
) -> Result<(Params, TrainCurve)> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Config("extractor needs one label per training image".into()));
    }
    let params = Params::trainable(cfg.seed, DType::F32, device);
    let net = FeatureExtractor::new(&params, ext_cfg)?;
    let mut trainer = Trainer::new(params.vars(), cfg.learning_rate)?;
    let mut batches = Batches::new(images.len(), cfg.batch_size, cfg.seed)?;
    let label_t: Vec<Tensor> = labels
        .iter()
        .map(|&l| Tensor::new(&[l], device))
        .collect::<candle_core::Result<_>>()?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let x = gather(images, &idx)?;
        let y = gather(&label_t, &idx)?;
        let loss = candle_nn::loss::cross_entropy(&net.logits(&x)?, &y)?;
        losses.push(trainer.step(&loss, step)?);
        if step % 200 == 0 {
            info!("extractor step {step}: loss {:.4}", losses[step]);
        }
    }
    let validation = if held_out.is_empty() {
        None
    } else {
        let mut correct = 0usize;
        for (x, l) in held_out {
            let pred = net.logits(x)?.argmax(D::Minus1)?.to_vec1::<u32>()?[0];
            correct += (pred == *l) as usize;
        }
        Some(correct as f64 / held_out.len() as f64)
    };
    Ok((
        params,
        TrainCurve {
            stage: "extractor".into(),
            first_step: 0,
            losses,
            validation,
            baseline: Some(1.0 / ext_cfg.classes as f64),
        },
    ))
}
