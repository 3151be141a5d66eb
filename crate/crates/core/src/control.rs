//! Depth conditioning: control-map preparation (normalized depth, Canny depth edges) and the
//! adapter that turns a control map into residuals for the UNet.

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{epsilon_mse, noised_batch, UNet, UNetConfig};
use crate::diffusion::{gaussian_like, NoiseSchedule};
use crate::image::DepthMap;
use crate::nn::{silu, timestep_features, Conv, Linear, Params};
use crate::ops;
use crate::train::{gather, Batches, TrainConfig, TrainCurve, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    Depth,
    Edge,
    None,
}

impl std::str::FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Self::Depth),
            "edge" => Ok(Self::Edge),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown conditioning `{other}` (depth, edge, none)"))),
        }
    }
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Depth => "depth",
            Self::Edge => "edge",
            Self::None => "none",
        })
    }
}

/// Single-channel control map at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub kind: ControlKind,
    pub height: usize,
    pub width: usize,
    pub map: Vec<f32>,
}

impl ControlInput {
    pub fn new(kind: ControlKind, height: usize, width: usize, map: Vec<f32>) -> Result<Self> {
        let c = Self {
            kind,
            height,
            width,
            map,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn none(height: usize, width: usize) -> Self {
        Self {
            kind: ControlKind::None,
            height,
            width,
            map: vec![0.0; height * width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.map.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "control map has {} values for {}x{}",
                self.map.len(),
                self.height,
                self.width
            )));
        }
        match self.kind {
            ControlKind::Depth if self.map.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                Err(Error::NumericalDomain("depth control values must lie in [0, 1]".into()))
            }
            ControlKind::Edge if self.map.iter().any(|v| *v != 0.0 && *v != 1.0) => {
                Err(Error::NumericalDomain("edge control map must be binary".into()))
            }
            _ => Ok(()),
        }
    }

    /// `(1, 1, H, W)`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.map.clone(), (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Replaces invalid depths by the value of the nearest valid pixel (Euclidean distance, ties
/// broken by row-major index). Fails if no pixel is valid.
pub fn fill_invalid(depth: &DepthMap) -> Result<Vec<f32>> {
    let (h, w) = (depth.height, depth.width);
    if depth.valid_count() == 0 {
        return Err(Error::Data {
            path: "depth".into(),
            msg: "depth map has no valid pixels".into(),
        });
    }
    let mut out = depth.meters.clone();
    for y in 0..h {
        for x in 0..w {
            if depth.valid[y * w + x] {
                continue;
            }
            // Scan square rings of growing radius; a ring at radius r only holds points at
            // distance >= r, so stop once r^2 exceeds the best squared distance found.
            let mut best: Option<(usize, usize)> = None;
            let max_r = h.max(w);
            for r in 1..=max_r {
                if let Some((d2, _)) = best {
                    if r * r > d2 {
                        break;
                    }
                }
                let (y0, y1) = (y as isize - r as isize, y as isize + r as isize);
                let (x0, x1) = (x as isize - r as isize, x as isize + r as isize);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if yy != y0 && yy != y1 && xx != x0 && xx != x1 {
                            continue;
                        }
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let idx = yy as usize * w + xx as usize;
                        if !depth.valid[idx] {
                            continue;
                        }
                        let d2 = ((yy - y as isize).pow(2) + (xx - x as isize).pow(2)) as usize;
                        if best.is_none_or(|(bd, bi)| (d2, idx) < (bd, bi)) {
                            best = Some((d2, idx));
                        }
                    }
                }
            }
            out[y * w + x] = depth.meters[best.expect("at least one valid pixel").1];
        }
    }
    Ok(out)
}

fn min_max(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        // A degenerate range maps to all zeros.
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resample_bilinear(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Nearest-neighbour resampling with pixel-center alignment.
pub fn resample_nearest(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (((y as f32 + 0.5) * h as f32 / oh as f32) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f32 + 0.5) * w as f32 / ow as f32) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Fills missing returns, min-max normalizes per scene and resamples bilinearly to `target`.
pub fn normalize_depth(depth: &DepthMap, target: (usize, usize)) -> Result<ControlInput> {
    let filled = fill_invalid(depth)?;
    let norm = min_max(&filled);
    let map = resample_bilinear(&norm, (depth.height, depth.width), target);
    ControlInput::new(ControlKind::Depth, target.0, target.1, map.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyConfig {
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub low: f32,
    pub high: f32,
    pub sigma: f32,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            low: 0.1,
            high: 0.2,
            sigma: 0.5,
        }
    }
}

fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (2.0 * sigma).ceil() as isize;
    let taps: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = taps.iter().sum();
    let taps: Vec<f32> = taps.iter().map(|t| t / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| taps[(i + r) as usize] * src[y * w + clampi(x as isize + i, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|i| taps[(i + r) as usize] * tmp[clampi(y as isize + i, h) * w + x])
                .sum();
        }
    }
    out
}

/// Canny edge detector on a single-channel image: gaussian smoothing, Sobel gradients,
/// non-maximum suppression and hysteresis. Returns a binary map.
pub fn canny(src: &[f32], h: usize, w: usize, cfg: &CannyConfig) -> Result<Vec<f32>> {
    if !(cfg.low >= 0.0 && cfg.low < cfg.high) {
        return Err(Error::Config(format!(
            "Canny thresholds must satisfy 0 <= low < high, got {} and {}",
            cfg.low, cfg.high
        )));
    }
    let s = gaussian_blur(src, h, w, cfg.sigma);
    let at = |y: isize, x: isize| s[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0f32; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = (gx * gx + gy * gy).sqrt();
            // Quantize the gradient direction to 0, 45, 90 or 135 degrees.
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }
    let max = mag.iter().cloned().fold(0.0f32, f32::max);
    let mut out = vec![0.0f32; h * w];
    if max <= 1e-6 {
        return Ok(out);
    }
    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut strength = vec![0u8; h * w];
    let (lo, hi) = (cfg.low * max, cfg.high * max);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (a, b) = match dir[i] {
                0 => (m(y, x - 1), m(y, x + 1)),
                1 => (m(y - 1, x - 1), m(y + 1, x + 1)),
                2 => (m(y - 1, x), m(y + 1, x)),
                _ => (m(y - 1, x + 1), m(y + 1, x - 1)),
            };
            // Asymmetric comparison keeps exactly one pixel of a two-pixel plateau.
            let v = mag[i];
            if v > a && v >= b {
                strength[i] = if v >= hi {
                    2
                } else if v >= lo {
                    1
                } else {
                    0
                };
            }
        }
    }
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| strength[i] == 2).collect();
    for &i in &queue {
        out[i] = 1.0;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if strength[j] == 1 && out[j] == 0.0 {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

/// Binary Canny edge map of the normalized depth, nearest-resampled to `target`.
pub fn depth_to_edge(depth: &DepthMap, cfg: &CannyConfig, target: (usize, usize)) -> Result<ControlInput> {
    let norm = min_max(&fill_invalid(depth)?);
    let edges = canny(&norm, depth.height, depth.width, cfg)?;
    let map = resample_nearest(&edges, (depth.height, depth.width), target);
    ControlInput::new(ControlKind::Edge, target.0, target.1, map)
}

/// Builds the control input of the requested kind from a depth map.
pub fn make_control(kind: ControlKind, depth: Option<&DepthMap>, target: (usize, usize)) -> Result<ControlInput> {
    match kind {
        ControlKind::None => Ok(ControlInput::none(target.0, target.1)),
        _ => {
            let depth = depth.ok_or_else(|| Error::Config(format!("conditioning `{kind}` needs a depth map")))?;
            match kind {
                ControlKind::Depth => normalize_depth(depth, target),
                _ => depth_to_edge(depth, &CannyConfig::default(), target),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub stem_width: usize,
    pub time_features: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            time_features: 32,
        }
    }
}

/// Strided convolutional encoder over the control map with zero-initialized 1x1 output
/// projections, one per UNet residual site.
pub struct Adapter {
    unet: UNetConfig,
    time_features: usize,
    stem: Vec<Conv>,
    levels: Vec<(Conv, Linear)>,
    /// `[bottleneck, skip_{L-1}, ..., skip_0]`, matching [`UNet::residual_shapes`].
    outputs: Vec<Conv>,
    scale: f64,
}

impl Adapter {
    /// `latent_factor` is the autoencoder downsampling factor between the control map and
    /// the finest UNet level.
    pub fn new(p: &Params, cfg: &AdapterConfig, unet: &UNetConfig, latent_factor: usize) -> Result<Self> {
        if !latent_factor.is_power_of_two() || latent_factor < 2 {
            return Err(Error::Config(format!("latent factor must be a power of two >= 2, got {latent_factor}")));
        }
        let sw = cfg.stem_width;
        let mut stem = vec![Conv::new(&p.pp("stem0"), 1, sw, 3, 1)?];
        for i in 1..latent_factor.trailing_zeros() as usize {
            stem.push(Conv::new(&p.pp(format!("stem{i}")), sw, sw, 3, 2)?);
        }
        let mut levels = Vec::new();
        let mut ch = sw;
        for (i, &wi) in unet.widths.iter().enumerate() {
            let lp = p.pp(format!("level{i}"));
            levels.push((Conv::new(&lp.pp("conv"), ch, wi, 3, 2)?, Linear::new(&lp.pp("time"), cfg.time_features, wi)?));
            ch = wi;
        }
        let l = unet.widths.len();
        let mut outputs = vec![Conv::zeros(&p.pp("out_mid"), unet.widths[l - 1], unet.widths[l - 1], 1)?];
        for i in (0..l).rev() {
            outputs.push(Conv::zeros(&p.pp(format!("out{i}")), unet.widths[i], unet.widths[i], 1)?);
        }
        Ok(Self {
            unet: unet.clone(),
            time_features: cfg.time_features,
            stem,
            levels,
            outputs,
            scale: 1.0,
        })
    }

    /// Multiplier applied to every residual (1 by default).
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Residuals for a `(B, 1, H, W)` control tensor at per-item (or shared) timesteps.
    pub fn forward(&self, map: &Tensor, ts: &[usize]) -> Result<Vec<Tensor>> {
        let (b, c, h, w) = map.dims4()?;
        let f = 1usize << (self.stem.len() - 1 + self.unet.widths.len());
        if c != 1 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("control map {:?} is incompatible with the adapter", map.dims())));
        }
        let temb = timestep_features(ts, self.time_features, map.dtype(), map.device())?;
        let temb = if ts.len() == 1 { temb.broadcast_as((b, self.time_features))?.contiguous()? } else { temb };
        let mut x = map.clone();
        for conv in &self.stem {
            x = silu(&conv.forward(&x)?)?;
        }
        let mut feats = Vec::with_capacity(self.levels.len());
        for (conv, time) in &self.levels {
            let bias = time.forward(&temb)?;
            let ch = bias.dim(1)?;
            x = silu(&conv.forward(&x)?.broadcast_add(&bias.reshape((b, ch, 1, 1))?)?)?;
            feats.push(x.clone());
        }
        let l = feats.len();
        let mut out = Vec::with_capacity(l + 1);
        out.push(self.outputs[0].forward(&feats[l - 1])?);
        for (k, i) in (0..l).rev().enumerate() {
            out.push(self.outputs[k + 1].forward(&feats[i])?);
        }
        if self.scale != 1.0 {
            out = out.into_iter().map(|t| t * self.scale).collect::<candle_core::Result<_>>()?;
        }
        Ok(out)
    }

    /// Residual list for `input` at timestep `t`; empty for `ControlKind::None`.
    pub fn encode_control(&self, input: &ControlInput, t: usize, device: &Device, dtype: DType) -> Result<Vec<Tensor>> {
        if input.kind == ControlKind::None {
            return Ok(Vec::new());
        }
        input.validate()?;
        self.forward(&input.to_tensor(device, dtype)?, &[t])
    }
}

/// Trains an adapter against a frozen UNet on `(latent, control map)` pairs, each `(1, ...)`.
/// `baseline` in the curve is the unconditioned held-out epsilon-MSE and `validation` the
/// conditioned one, both measured with identical timesteps and noise.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    pairs: &[(Tensor, Tensor)],
    held_out: &[(Tensor, Tensor)],
    unet: &UNet,
    schedule: &NoiseSchedule,
    adapter_cfg: &AdapterConfig,
    latent_factor: usize,
    cfg: &TrainConfig,
    device: &Device,
) -> Result<(Params, TrainCurve)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("adapter training set is empty".into()));
    }
    let params = Params::trainable(cfg.seed, DType::F32, device);
    let adapter = Adapter::new(&params, adapter_cfg, unet.config(), latent_factor)?;
    let latents: Vec<Tensor> = pairs.iter().map(|p| p.0.clone()).collect();
    let maps: Vec<Tensor> = pairs.iter().map(|p| p.1.clone()).collect();
    let mut trainer = Trainer::new(params.vars(), cfg.learning_rate)?;
    let mut batches = Batches::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let z0 = gather(&latents, &idx)?;
        let map = gather(&maps, &idx)?;
        let b = z0.dim(0)?;
        let ts: Vec<usize> = (0..b).map(|_| batches.rng().random_range(1..=schedule.timesteps)).collect();
        let eps = gaussian_like(&z0, batches.rng())?;
        let x_t = noised_batch(&z0, &ts, &eps, schedule)?;
        let residuals = adapter.forward(&map, &ts)?;
        let pred = unet.forward(&x_t.detach(), &ts, Some(&residuals))?;
        let loss = ops::mean_sq(&(pred - &eps)?)?;
        losses.push(trainer.step(&loss, step)?);
        if step % 200 == 0 {
            info!("adapter step {step}: loss {:.5}", losses[step]);
        }
    }
    let (baseline, validation) = if held_out.is_empty() {
        (None, None)
    } else {
        let hl: Vec<Tensor> = held_out.iter().map(|p| p.0.clone()).collect();
        let seed = cfg.seed ^ 0xada;
        let unc = epsilon_mse(&hl, schedule, seed, |_, x, t| unet.forward(x, &[t], None))?;
        let con = epsilon_mse(&hl, schedule, seed, |i, x, t| {
            let r = adapter.forward(&held_out[i].1, &[t])?;
            unet.forward(x, &[t], Some(&r))
        })?;
        (Some(unc), Some(con))
    };
    Ok((
        params,
        TrainCurve {
            stage: "adapter".into(),
            first_step: 0,
            losses,
            validation,
            baseline,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> DepthMap {
        let mut m = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                m.push(f(y, x));
            }
        }
        DepthMap::dense(h, w, m).unwrap()
    }

    #[test]
    fn constant_depth_normalizes_to_zero() {
        let d = dense(8, 8, |_, _| 2.5);
        let c = normalize_depth(&d, (8, 8)).unwrap();
        assert!(c.map.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_planes_normalize_to_binary() {
        let d = dense(8, 8, |_, x| if x < 4 { 1.0 } else { 2.0 });
        let c = normalize_depth(&d, (8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(c.map[y * 8 + x], if x < 4 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn nearest_fill_matches_exhaustive_search() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (h, w) = (32, 32);
            let meters: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.5..5.0)).collect();
            let valid: Vec<bool> = (0..h * w).map(|_| rng.random::<f32>() >= 0.3).collect();
            let d = DepthMap::new(h, w, meters.clone(), valid.clone()).unwrap();
            let filled = fill_invalid(&d).unwrap();
            for i in 0..h * w {
                if valid[i] {
                    assert_eq!(filled[i], meters[i]);
                    continue;
                }
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                let best = (0..h * w)
                    .filter(|&j| valid[j])
                    .min_by_key(|&j| {
                        let (yy, xx) = ((j / w) as i64, (j % w) as i64);
                        ((yy - y).pow(2) + (xx - x).pow(2), j)
                    })
                    .unwrap();
                assert_eq!(filled[i], meters[best]);
            }
            let c = normalize_depth(&d, (h, w)).unwrap();
            assert!(c.map.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        let none = DepthMap::new(2, 2, vec![1.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(normalize_depth(&none, (2, 2)), Err(Error::Data { .. })));
    }

    #[test]
    fn canny_examples() {
        let flat = dense(16, 16, |_, _| 3.0);
        let e = depth_to_edge(&flat, &CannyConfig::default(), (16, 16)).unwrap();
        assert!(e.map.iter().all(|v| *v == 0.0));

        let step = dense(16, 20, |_, x| if x < 10 { 1.0 } else { 2.0 });
        let e = depth_to_edge(&step, &CannyConfig::default(), (16, 20)).unwrap();
        let cols: Vec<usize> = (0..20).filter(|&x| (0..16).any(|y| e.map[y * 20 + x] == 1.0)).collect();
        assert_eq!(cols.len(), 1, "edge columns {cols:?}");
        assert!(cols[0] == 9 || cols[0] == 10);
        assert!((0..16).all(|y| e.map[y * 20 + cols[0]] == 1.0));

        assert!(matches!(
            canny(&[0.0; 4], 2, 2, &CannyConfig { low: 0.3, high: 0.2, sigma: 1.0 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn circle_edges_follow_the_rasterized_boundary() {
        let (h, w) = (48, 48);
        let inside = |y: usize, x: usize| {
            let (dy, dx) = (y as f32 + 0.5 - 24.0, x as f32 + 0.5 - 22.0);
            dy * dy + dx * dx <= 12.5f32 * 12.5
        };
        let d = dense(h, w, |y, x| if inside(y, x) { 1.2 } else { 3.0 });
        let e = depth_to_edge(&d, &CannyConfig::default(), (h, w)).unwrap();
        let boundary: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let me = inside(y, x);
                [(0i32, 1i32), (1, 0), (0, -1), (-1, 0)].iter().any(|(dy, dx)| {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    yy >= 0 && xx >= 0 && yy < h as i32 && xx < w as i32 && inside(yy as usize, xx as usize) != me
                })
            })
            .collect();
        let near = |set: &dyn Fn(usize) -> bool, i: usize| {
            let (y, x) = ((i / w) as i32, (i % w) as i32);
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < h as i32 && xx < w as i32 && set(yy as usize * w + xx as usize)
                })
            })
        };
        for i in 0..h * w {
            if e.map[i] == 1.0 {
                assert!(near(&|j| boundary[j], i), "edge pixel {i} far from boundary");
            }
            if boundary[i] {
                assert!(near(&|j| e.map[j] == 1.0, i), "boundary pixel {i} not detected");
            }
        }
    }

    #[test]
    fn fresh_adapter_is_a_no_op_and_none_is_empty() {
        let dev = Device::Cpu;
        let p = Params::trainable(0, DType::F32, &dev);
        let unet = UNetConfig::default();
        let a = Adapter::new(&p, &AdapterConfig::default(), &unet, 4).unwrap();
        let d = dense(64, 64, |y, x| (y + x) as f32 * 0.01 + 1.0);
        let ctrl = normalize_depth(&d, (64, 64)).unwrap();
        let r = a.encode_control(&ctrl, 500, &dev, DType::F32).unwrap();
        let shapes = UNet::residual_shapes(&unet, 16, 16);
        assert_eq!(r.len(), shapes.len());
        for (t, s) in r.iter().zip(shapes) {
            assert_eq!(t.dims(), &[1, s.0, s.1, s.2]);
            assert!(ops::to_vec_f64(t).unwrap().iter().all(|v| *v == 0.0));
        }
        assert!(a.encode_control(&ControlInput::none(64, 64), 500, &dev, DType::F32).unwrap().is_empty());
        let bad = ControlInput::new(ControlKind::Depth, 30, 30, vec![0.5; 900]).unwrap();
        assert!(matches!(a.encode_control(&bad, 1, &dev, DType::F32), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_norm_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let unet = UNetConfig {
            channels: 2,
            widths: vec![4, 8],
            groups: 4,
            time_features: 8,
            time_dim: 8,
        };
        let cfg = AdapterConfig {
            stem_width: 4,
            time_features: 8,
        };
        let p = Params::trainable(9, DType::F64, &dev);
        Adapter::new(&p, &cfg, &unet, 4).unwrap();
        let mut snap = p.snapshot();
        for v in snap.values_mut() {
            *v = (&*v + Tensor::randn(0f64, 0.3, v.shape(), &dev).unwrap()).unwrap();
        }
        let frozen = Params::frozen(&snap, DType::F64, &dev).unwrap();
        let a = Adapter::new(&frozen, &cfg, &unet, 4).unwrap();
        let map = candle_core::Var::rand(0f64, 1.0, (1, 1, 16, 16), &dev).unwrap();
        let f = |m: &Tensor| -> Tensor {
            let r = a.forward(m, &[300]).unwrap();
            let mut acc = ops::sum_sq(&r[0]).unwrap();
            for t in &r[1..] {
                acc = (acc + ops::sum_sq(t).unwrap()).unwrap();
            }
            acc
        };
        let grads = f(map.as_tensor()).backward().unwrap();
        let g = ops::to_vec_f64(grads.get(&map).unwrap()).unwrap();
        let base = ops::to_vec_f64(map.as_tensor()).unwrap();
        let h = 1e-6;
        for idx in [0usize, 37, 120, 200, 255] {
            let mut pl = base.clone();
            pl[idx] += h;
            let mut mi = base.clone();
            mi[idx] -= h;
            let fp = ops::scalar(&f(&Tensor::from_vec(pl, (1, 1, 16, 16), &dev).unwrap())).unwrap();
            let fm = ops::scalar(&f(&Tensor::from_vec(mi, (1, 1, 16, 16), &dev).unwrap())).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-3, "index {idx}: fd {fd} vs autograd {}", g[idx]);
        }
    }
}
