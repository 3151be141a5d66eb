//! Convolutional KL-regularized autoencoder: the encoder `E` and decoder `D` that move images
//! to and from the latent space the diffusion model runs in.

use candle_core::{DType, Device, Tensor, D};
use log::info;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::nn::{silu, Conv, GroupNorm, Init, Params, ResBlock};
use crate::ops;
use crate::train::{gather, Batches, TrainConfig, TrainCurve, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Channel width per resolution level; each level halves the spatial size.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub kl_weight: f64,
    pub edge_weight: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            latent_channels: 4,
            widths: vec![16, 32],
            groups: 8,
            kl_weight: 1e-6,
            edge_weight: 0.5,
        }
    }
}

impl AutoencoderConfig {
    /// Spatial downsampling factor `f`.
    pub fn factor(&self) -> usize {
        1 << self.widths.len()
    }
}

pub struct Autoencoder {
    cfg: AutoencoderConfig,
    enc_in: Conv,
    enc_levels: Vec<(ResBlock, Conv)>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv,
    dec_in: Conv,
    dec_mid: ResBlock,
    dec_levels: Vec<(Conv, ResBlock)>,
    dec_norm: GroupNorm,
    dec_out: Conv,
    /// Multiplier that brings encoder means to roughly unit variance.
    latent_scale: Tensor,
}

impl Autoencoder {
    pub fn new(p: &Params, cfg: &AutoencoderConfig) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(Error::Config("autoencoder needs at least one level".into()));
        }
        let w = &cfg.widths;
        let g = cfg.groups;
        let last = *w.last().unwrap();

        let enc_in = Conv::new(&p.pp("enc.in"), cfg.image_channels, w[0], 3, 1)?;
        let mut enc_levels = Vec::new();
        let mut ch = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let lp = p.pp(format!("enc.level{i}"));
            enc_levels.push((
                ResBlock::new(&lp.pp("res"), ch, wi, None, g)?,
                Conv::new(&lp.pp("down"), wi, wi, 3, 2)?,
            ));
            ch = wi;
        }
        let enc_mid = ResBlock::new(&p.pp("enc.mid"), last, last, None, g)?;
        let enc_norm = GroupNorm::new(&p.pp("enc.norm"), g, last)?;
        let enc_out = Conv::new(&p.pp("enc.out"), last, 2 * cfg.latent_channels, 3, 1)?;

        let dec_in = Conv::new(&p.pp("dec.in"), cfg.latent_channels, last, 3, 1)?;
        let dec_mid = ResBlock::new(&p.pp("dec.mid"), last, last, None, g)?;
        let mut dec_levels = Vec::new();
        for i in (0..w.len()).rev() {
            let lp = p.pp(format!("dec.level{i}"));
            let out = if i == 0 { w[0] } else { w[i - 1] };
            dec_levels.push((
                Conv::new(&lp.pp("up"), w[i], w[i], 3, 1)?,
                ResBlock::new(&lp.pp("res"), w[i], out, None, g)?,
            ));
        }
        let dec_norm = GroupNorm::new(&p.pp("dec.norm"), g, w[0])?;
        let dec_out = Conv::new(&p.pp("dec.out"), w[0], cfg.image_channels, 3, 1)?;
        let latent_scale = p.get(1, "latent_scale", Init::Ones)?;
        Ok(Self {
            cfg: cfg.clone(),
            enc_in,
            enc_levels,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_levels,
            dec_norm,
            dec_out,
            latent_scale,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn latent_scale(&self) -> Result<f64> {
        Ok(self.latent_scale.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Latent shape `(c, h, w)` for an `height x width` image.
    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.cfg.factor();
        if height % f != 0 || width % f != 0 {
            return Err(Error::Shape(format!(
                "image size {height}x{width} is not divisible by the autoencoder factor {f}"
            )));
        }
        Ok((self.cfg.latent_channels, height / f, width / f))
    }

    /// Unscaled posterior mean and log-variance, each `(B, c, H/f, W/f)`.
    pub fn encode_stats(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, ch, h, w) = x.dims4()?;
        if ch != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {ch}",
                self.cfg.image_channels
            )));
        }
        self.latent_dims(h, w)?;
        let mut h = self.enc_in.forward(x)?;
        for (res, down) in &self.enc_levels {
            h = down.forward(&res.forward(&h, None)?)?;
        }
        let h = self.enc_mid.forward(&h, None)?;
        let h = self.enc_out.forward(&silu(&self.enc_norm.forward(&h)?)?)?;
        let c = self.cfg.latent_channels;
        let mean = h.narrow(1, 0, c)?;
        let logvar = h.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// Deterministic (posterior-mean) scaled latent of `x` (`(B, C, H, W)`).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.encode_stats(x)?;
        Ok(mean.broadcast_mul(&self.latent_scale.to_dtype(mean.dtype())?)?)
    }

    /// Decoder output before clamping, from an unscaled latent.
    fn decode_unscaled(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        let mut h = self.dec_mid.forward(&self.dec_in.forward(z)?, None)?;
        for (up, res) in &self.dec_levels {
            h = res.forward(&up.forward(&ops::upsample2x(&h)?)?, None)?;
        }
        self.dec_out.forward(&silu(&self.dec_norm.forward(&h)?)?)
    }

    /// Unclamped reconstruction from a scaled latent.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let z = z.broadcast_div(&self.latent_scale.to_dtype(z.dtype())?)?;
        self.decode_unscaled(&z)
    }

    /// Image in `[0, 1]` from a scaled latent.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(0.0, 1.0)?)
    }

    /// Training objective on a batch: reconstruction MSE + edge-gradient MSE + KL.
    fn loss(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (mean, logvar) = self.encode_stats(x)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * noise)?)?;
        let rec = self.decode_unscaled(&z)?;
        let mse = ops::mean_sq(&(&rec - x)?)?;
        let edge = (ops::mean_sq(&(dx(&rec)? - dx(x)?)?)? + ops::mean_sq(&(dy(&rec)? - dy(x)?)?)?)?;
        let kl = ((mean.sqr()? + logvar.exp()?)? - 1.0)?.sub(&logvar)?.mean_all()?.affine(0.5, 0.0)?;
        Ok(((mse + (edge * self.cfg.edge_weight)?)? + (kl * self.cfg.kl_weight)?)?)
    }
}

fn dx(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(D::Minus1)?;
    Ok((x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?)
}

fn dy(x: &Tensor) -> Result<Tensor> {
    let h = x.dim(2)?;
    Ok((x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?)
}

/// Mean squared reconstruction error of `D(E(x))` (clamped) over `images`.
pub fn reconstruction_mse(ae: &Autoencoder, images: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for x in images {
        let rec = ae.decode(&ae.encode(x)?)?;
        acc += ops::scalar(&ops::mean_sq(&(rec - x)?)?)?;
    }
    Ok(acc / images.len().max(1) as f64)
}

/// Trains an autoencoder on `(1, C, H, W)` images and calibrates the latent scale on the
/// training set. Returns the trainable parameter store and the loss curve.
pub fn train_autoencoder(
    images: &[Tensor],
    held_out: &[Tensor],
    ae_cfg: &AutoencoderConfig,
    cfg: &TrainConfig,
    device: &Device,
) -> Result<(Params, TrainCurve)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Config("autoencoder training set is empty".into()));
    }
    let params = Params::trainable(cfg.seed, DType::F32, device);
    let ae = Autoencoder::new(&params, ae_cfg)?;
    let baseline = if held_out.is_empty() { None } else { Some(reconstruction_mse(&ae, held_out)?) };
    let mut trainer = Trainer::new(params.vars_except(&["latent_scale"]), cfg.learning_rate)?;
    let mut batches = Batches::new(images.len(), cfg.batch_size, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = gather(images, &batches.next_batch())?;
        let (b, _, h, w) = x.dims4()?;
        let f = ae_cfg.factor();
        let noise = crate::diffusion::gaussian_like(
            &Tensor::zeros((b, ae_cfg.latent_channels, h / f, w / f), DType::F32, device)?,
            batches.rng(),
        )?;
        let loss = ae.loss(&x, &noise)?;
        losses.push(trainer.step(&loss, step)?);
        if step % 200 == 0 {
            info!("autoencoder step {step}: loss {:.5}", losses[step]);
        }
    }

    // Calibrate the latent scale so diffusion sees unit-variance latents.
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for x in images {
        let (mean, _) = ae.encode_stats(x)?;
        for v in ops::to_vec_f64(&mean)? {
            sum += v;
            sum_sq += v * v;
            n += 1;
        }
    }
    let mu = sum / n as f64;
    let std = (sum_sq / n as f64 - mu * mu).max(1e-12).sqrt();
    let mut snap = params.snapshot();
    snap.insert(
        "latent_scale".into(),
        Tensor::from_vec(vec![(1.0 / std) as f32], 1, device)?,
    );
    params.load_into(&snap)?;

    let ae = Autoencoder::new(&params, ae_cfg)?;
    let validation = if held_out.is_empty() { None } else { Some(reconstruction_mse(&ae, held_out)?) };
    Ok((
        params,
        TrainCurve {
            stage: "vae".into(),
            first_step: 0,
            losses,
            validation,
            baseline,
        },
    ))
}

/// Converts a batch of images into model tensors.
pub fn images_to_tensors(images: &[Image], device: &Device) -> Result<Vec<Tensor>> {
    images.iter().map(|im| im.to_tensor(device, DType::F32)).collect()
}
