//! Compact UNet noise predictor with a self-attention bottleneck, and its epsilon-prediction
//! training loop.

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, gaussian_like, NoiseSchedule};
use crate::nn::{silu, Conv, GroupNorm, Params, ResBlock, SelfAttention, TimeEmbedding};
use crate::ops;
use crate::train::{gather, Batches, Ema, TrainConfig, TrainCurve, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub channels: usize,
    /// Width per resolution level; level `i` runs at `1 / 2^i` of the latent size.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub time_features: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            widths: vec![32, 64],
            groups: 8,
            time_features: 32,
            time_dim: 128,
        }
    }
}

struct UpLevel {
    res: ResBlock,
    /// Upsample + conv to the next-finer width; absent at the finest level.
    up: Option<Conv>,
}

pub struct UNet {
    cfg: UNetConfig,
    time: TimeEmbedding,
    conv_in: Conv,
    down: Vec<(ResBlock, Option<Conv>)>,
    mid1: ResBlock,
    attn: SelfAttention,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl UNet {
    pub fn new(p: &Params, cfg: &UNetConfig) -> Result<Self> {
        let w = &cfg.widths;
        if w.is_empty() {
            return Err(Error::Config("UNet needs at least one level".into()));
        }
        let (g, td) = (cfg.groups, cfg.time_dim);
        let last = *w.last().unwrap();
        let time = TimeEmbedding::new(&p.pp("time"), cfg.time_features, td)?;
        let conv_in = Conv::new(&p.pp("conv_in"), cfg.channels, w[0], 3, 1)?;
        let mut down = Vec::new();
        let mut ch = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let lp = p.pp(format!("down{i}"));
            let res = ResBlock::new(&lp.pp("res"), ch, wi, Some(td), g)?;
            let ds = if i + 1 < w.len() {
                Some(Conv::new(&lp.pp("downsample"), wi, wi, 3, 2)?)
            } else {
                None
            };
            down.push((res, ds));
            ch = wi;
        }
        let mid1 = ResBlock::new(&p.pp("mid1"), last, last, Some(td), g)?;
        let attn = SelfAttention::new(&p.pp("attn"), last, g)?;
        let mid2 = ResBlock::new(&p.pp("mid2"), last, last, Some(td), g)?;
        let mut up = Vec::new();
        for i in (0..w.len()).rev() {
            let lp = p.pp(format!("up{i}"));
            let res = ResBlock::new(&lp.pp("res"), 2 * w[i], w[i], Some(td), g)?;
            let upc = if i > 0 {
                Some(Conv::new(&lp.pp("upsample"), w[i], w[i - 1], 3, 1)?)
            } else {
                None
            };
            up.push(UpLevel { res, up: upc });
        }
        let norm_out = GroupNorm::new(&p.pp("norm_out"), g, w[0])?;
        // Zero output projection: an untrained network predicts zero noise.
        let conv_out = Conv::zeros(&p.pp("conv_out"), w[0], cfg.channels, 3)?;
        Ok(Self {
            cfg: cfg.clone(),
            time,
            conv_in,
            down,
            mid1,
            attn,
            mid2,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Shapes `(C, H, W)` of the features that control residuals are added to, in the order
    /// `[bottleneck, skip_{L-1}, ..., skip_0]`.
    pub fn residual_shapes(cfg: &UNetConfig, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let l = cfg.widths.len();
        let mut out = vec![(cfg.widths[l - 1], height >> (l - 1), width >> (l - 1))];
        for i in (0..l).rev() {
            out.push((cfg.widths[i], height >> i, width >> i));
        }
        out
    }

    /// Predicts the noise in `x_t` (`(B, C, H, W)`). `ts` holds one timestep per batch item
    /// or a single timestep shared by the batch. Control residuals, when present, are added
    /// to the bottleneck output and to every skip connection before the decoder consumes it.
    pub fn forward(&self, x: &Tensor, ts: &[usize], residuals: Option<&[Tensor]>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!("UNet expects {} channels, got {c}", self.cfg.channels)));
        }
        let l = self.cfg.widths.len();
        let f = 1 << (l - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("latent size {h}x{w} is not divisible by {f}")));
        }
        let residuals = residuals.filter(|r| !r.is_empty());
        if let Some(r) = residuals {
            let want = Self::residual_shapes(&self.cfg, h, w);
            if r.len() != want.len() {
                return Err(Error::Shape(format!(
                    "expected {} control residuals, got {}",
                    want.len(),
                    r.len()
                )));
            }
            for (t, &(rc, rh, rw)) in r.iter().zip(&want) {
                let (_, tc, th, tw) = t.dims4()?;
                if (tc, th, tw) != (rc, rh, rw) {
                    return Err(Error::Shape(format!(
                        "control residual {:?} does not match feature shape {:?}",
                        t.dims(),
                        (rc, rh, rw)
                    )));
                }
            }
        }
        let temb = match ts.len() {
            1 => self.time.forward(ts, x.dtype(), x.device())?.broadcast_as((b, self.cfg.time_dim))?,
            n if n == b => self.time.forward(ts, x.dtype(), x.device())?,
            n => return Err(Error::Shape(format!("{n} timesteps for a batch of {b}"))),
        };

        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(l);
        for (res, ds) in &self.down {
            hcur = res.forward(&hcur, Some(&temb))?;
            skips.push(hcur.clone());
            if let Some(ds) = ds {
                hcur = ds.forward(&hcur)?;
            }
        }
        hcur = self.mid1.forward(&hcur, Some(&temb))?;
        hcur = self.attn.forward(&hcur)?;
        hcur = self.mid2.forward(&hcur, Some(&temb))?;
        if let Some(r) = residuals {
            hcur = hcur.broadcast_add(&r[0])?;
            for (i, skip) in skips.iter_mut().enumerate() {
                *skip = skip.broadcast_add(&r[l - i])?;
            }
        }
        for (lvl, i) in self.up.iter().zip((0..l).rev()) {
            hcur = lvl.res.forward(&Tensor::cat(&[&hcur, &skips[i]], 1)?, Some(&temb))?;
            if let Some(up) = &lvl.up {
                hcur = up.forward(&ops::upsample2x(&hcur)?)?;
            }
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&hcur)?)?)
    }
}

/// Mean epsilon-MSE on `latents` at seeded random timesteps and noise.
pub fn epsilon_mse<F>(latents: &[Tensor], schedule: &NoiseSchedule, seed: u64, mut predict: F) -> Result<f64>
where
    F: FnMut(usize, &Tensor, usize) -> Result<Tensor>,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for (i, z0) in latents.iter().enumerate() {
        let t = rng.random_range(1..=schedule.timesteps);
        let eps = gaussian_like(z0, &mut rng)?;
        let x_t = add_noise(z0, t, &eps, schedule)?;
        let pred = predict(i, &x_t, t)?;
        acc += ops::scalar(&ops::mean_sq(&(pred - eps)?)?)?;
    }
    Ok(acc / latents.len().max(1) as f64)
}

/// Trains a UNet on `(1, C, h, w)` latents with the epsilon-prediction objective. Returns the
/// EMA weights, the raw trainable store (for resuming) and the loss curve.
pub fn train_denoiser(
    latents: &[Tensor],
    held_out: &[Tensor],
    schedule: &NoiseSchedule,
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    resume: Option<(&std::collections::HashMap<String, Tensor>, usize)>,
    device: &Device,
) -> Result<(std::collections::HashMap<String, Tensor>, Params, TrainCurve)> {
    cfg.validate()?;
    if latents.is_empty() {
        return Err(Error::Config("denoiser training set is empty".into()));
    }
    let params = Params::trainable(cfg.seed, DType::F32, device);
    let unet = UNet::new(&params, unet_cfg)?;
    let first_step = match resume {
        Some((weights, step)) => {
            params.load_into(weights)?;
            step
        }
        None => 0,
    };
    let baseline = if held_out.is_empty() {
        None
    } else {
        Some(epsilon_mse(held_out, schedule, cfg.seed ^ 0x5eed, |_, x, t| unet.forward(x, &[t], None))?)
    };
    let mut ema = Ema::new(cfg.ema_decay, &params.snapshot());
    let mut trainer = Trainer::new(params.vars(), cfg.learning_rate)?;
    let mut batches = Batches::new(latents.len(), cfg.batch_size, cfg.seed.wrapping_add(first_step as u64))?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let step = first_step + k;
        let z0 = gather(latents, &batches.next_batch())?;
        let b = z0.dim(0)?;
        let ts: Vec<usize> = (0..b).map(|_| batches.rng().random_range(1..=schedule.timesteps)).collect();
        let eps = gaussian_like(&z0, batches.rng())?;
        let x_t = noised_batch(&z0, &ts, &eps, schedule)?;
        let loss = ops::mean_sq(&(unet.forward(&x_t, &ts, None)? - &eps)?)?;
        losses.push(trainer.step(&loss, step)?);
        ema.update(&params.snapshot())?;
        if k % 200 == 0 {
            info!("denoiser step {step}: loss {:.5}", losses[k]);
        }
    }
    let ema = ema.into_inner();
    let validation = if held_out.is_empty() {
        None
    } else {
        let frozen = Params::frozen(&ema, DType::F32, device)?;
        let ema_net = UNet::new(&frozen, unet_cfg)?;
        Some(epsilon_mse(held_out, schedule, cfg.seed ^ 0x5eed, |_, x, t| ema_net.forward(x, &[t], None))?)
    };
    Ok((
        ema,
        params,
        TrainCurve {
            stage: "denoiser".into(),
            first_step,
            losses,
            validation,
            baseline,
        },
    ))
}

/// `add_noise` with a per-item timestep.
pub fn noised_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let a: Vec<f32> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt() as f32).collect();
    let s: Vec<f32> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt() as f32).collect();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), z0.device())?.to_dtype(z0.dtype())?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), z0.device())?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}
