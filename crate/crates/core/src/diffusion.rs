//! Noise schedules, forward noising and DDIM stepping / inversion.
//!
//! Timesteps index `alpha_bar` directly: `alpha_bar[0] == 1` is the clean signal and
//! `alpha_bar[T]` the noisiest level. Sampling plans are uniform-stride subsets of `[0, T]`.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{ops, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub alpha_bar: Vec<f64>,
}

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Per-step beta cap, expressed relative to a 1000-step process. At `T = 1000` this is the
/// classic DDPM ceiling of 0.02, which keeps `alpha_bar[T]` around 3e-3 instead of ~1e-9.
fn max_beta(timesteps: usize) -> f64 {
    (20.0 / timesteps as f64).min(0.999)
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!(
                "noise schedule needs T >= 2, got {timesteps}"
            )));
        }
        let t_max = timesteps as f64;
        let cap = max_beta(timesteps);
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_max;
                let (start, end) = (1e-4 * scale, 0.02 * scale);
                (1..=timesteps)
                    .map(|t| {
                        let frac = (t - 1) as f64 / (t_max - 1.0);
                        (start + (end - start) * frac).min(0.999)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=timesteps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(cap))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for beta in betas {
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let schedule = Self {
            kind,
            timesteps,
            alpha_bar,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.timesteps + 1 {
            return Err(Error::Config("alpha_bar must have T+1 entries".into()));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be exactly 1".into()));
        }
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        if self.alpha_bar[self.timesteps] <= 0.0 {
            return Err(Error::Config("alpha_bar[T] must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps {
            return Err(Error::Config(format!(
                "timestep {t} outside [0, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Ordered timestep indices for a sub-sampled DDIM chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    pub steps: Vec<usize>,
}

impl TimestepPlan {
    /// `n` uniform-stride transitions from `T` down to 0 (`n + 1` timesteps).
    pub fn descending(timesteps: usize, n: usize) -> Result<Self> {
        let mut plan = Self::ascending(timesteps, n)?;
        plan.steps.reverse();
        Ok(plan)
    }

    /// `n` uniform-stride transitions from 0 up to `T`.
    pub fn ascending(timesteps: usize, n: usize) -> Result<Self> {
        if n == 0 || n > timesteps {
            return Err(Error::Config(format!(
                "plan needs 1 <= steps <= T, got {n} steps for T={timesteps}"
            )));
        }
        let steps = (0..=n)
            .map(|i| ((timesteps * i) as f64 / n as f64).round() as usize)
            .collect();
        Ok(Self { steps })
    }

    pub fn transitions(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn is_descending(&self) -> bool {
        self.steps.windows(2).all(|w| w[0] > w[1])
    }

    pub fn is_ascending(&self) -> bool {
        self.steps.windows(2).all(|w| w[0] < w[1])
    }

    /// Consecutive `(t, t_prev)` pairs of a descending plan.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Anything that predicts the noise component of `x_t` at timestep `t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Standard-normal tensor with the shape, dtype and device of `like`.
pub fn gaussian_like<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = like.elem_count();
    let values: Vec<f32> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Ok(Tensor::from_vec(values, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward noising `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn add_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(x0, eps, "add_noise")?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// `eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt((1 - ab_t) / ab_prev)`.
pub fn sigma(eta: f64, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<f64> {
    if t <= t_prev {
        return Err(Error::Ordering { t, t_prev });
    }
    schedule.check_t(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    if eta == 0.0 {
        return Ok(0.0);
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    Ok(eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * ((1.0 - ab_t) / ab_prev).sqrt())
}

/// Radicands within this distance below zero are treated as round-off and clamped.
const RADICAND_ROUNDOFF: f64 = 1e-9;

/// One DDIM transition `t -> t_prev`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    same_shape(x_t, eps_hat, "ddim_step eps_hat")?;
    let sig = sigma(eta, t, t_prev, schedule)?;
    let noise = if eta > 0.0 {
        let n = noise.ok_or(Error::MissingArgument("noise is required when eta > 0"))?;
        same_shape(x_t, n, "ddim_step noise")?;
        Some(n)
    } else {
        None
    };
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let radicand = 1.0 - ab_prev - sig * sig;
    if radicand < -RADICAND_ROUNDOFF {
        return Err(Error::NumericalDomain(format!(
            "1 - alpha_bar[{t_prev}] - sigma^2 = {radicand} is negative (eta={eta}, t={t})"
        )));
    }
    let dir_coef = radicand.max(0.0).sqrt();

    let x0_pred = ((x_t - (eps_hat * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
    let mut out = ((x0_pred * ab_prev.sqrt())? + (eps_hat * dir_coef)?)?;
    if let (Some(n), true) = (noise, sig > 0.0) {
        out = (out + (n * sig)?)?;
    }
    Ok(out)
}

/// One deterministic inversion transition `t_prev -> t` (the eta=0 step run backwards).
pub fn ddim_invert_step(
    x_prev: &Tensor,
    eps_hat: &Tensor,
    t_prev: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::Ordering { t, t_prev });
    }
    schedule.check_t(t)?;
    same_shape(x_prev, eps_hat, "ddim_invert_step eps_hat")?;
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let x0_pred = ((x_prev - (eps_hat * (1.0 - ab_prev).sqrt())?)? / ab_prev.sqrt())?;
    Ok(((x0_pred * ab_t.sqrt())? + (eps_hat * (1.0 - ab_t).sqrt())?)?)
}

/// Runs the DDIM chain along a descending plan. With `eta == 0` no randomness is drawn and
/// the result is a deterministic, differentiable function of `z` (and of whatever the
/// predictor closes over).
pub fn ddim_sample<R: Rng + ?Sized>(
    z: &Tensor,
    plan: &TimestepPlan,
    denoiser: &dyn NoisePredictor,
    eta: f64,
    mut rng: Option<&mut R>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if !plan.is_descending() || plan.steps.last().copied().unwrap_or(0) != 0 {
        return Err(Error::Config(format!(
            "sampling plan must be strictly descending and end at 0: {:?}",
            plan.steps
        )));
    }
    let mut x = z.clone();
    for (t, t_prev) in plan.pairs() {
        let eps_hat = denoiser.predict_noise(&x, t)?;
        let noise = match (eta > 0.0, rng.as_deref_mut()) {
            (true, Some(r)) => Some(gaussian_like(&x, r)?),
            _ => None,
        };
        x = ddim_step(&x, &eps_hat, t, t_prev, eta, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Deterministic DDIM inversion along an ascending plan. Each transition evaluates the
/// predictor at the current state with the target timestep.
pub fn ddim_invert(
    x0: &Tensor,
    plan: &TimestepPlan,
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if !plan.is_ascending() {
        return Err(Error::Config(format!(
            "inversion plan must be strictly ascending: {:?}",
            plan.steps
        )));
    }
    let mut x = x0.clone();
    for w in plan.steps.windows(2) {
        let (t_prev, t) = (w[0], w[1]);
        let eps_hat = denoiser.predict_noise(&x, t)?;
        x = ddim_invert_step(&x, &eps_hat, t_prev, t, schedule)?;
    }
    Ok(x)
}

/// A predictor that always returns zeros; useful for closed-form checks.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, x_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}

/// Relative L2 distance `||a - b|| / ||b||`.
pub fn relative_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let num = ops::scalar(&ops::sum_sq(&(a - b)?)?)?.sqrt();
    let den = ops::scalar(&ops::sum_sq(b)?)?.sqrt();
    Ok(num / den.max(f64::MIN_POSITIVE))
}
