//! Zero-shot deblurring: invert the observation into the diffusion latent, then jointly
//! optimize that latent and the blur kernel by backpropagating through a short conditioned
//! DDIM chain.
//!
//! The loss for a latent `z` and kernel logits `l` is
//!
//! ```text
//! x~ = D(sample(z | control))
//! L  = ||E(y) - E(blur(x~, softmax(l)))||^2 - gamma * reward(x~) + lambda * dist(y, x~)
//! ```
//!
//! Gradients are computed with per-step activation recomputation: the chain is first run
//! without a graph, keeping only the latent after each step, and each step is then replayed
//! with a graph during the backward sweep. Peak memory is one step plus the image-space loss,
//! independent of the chain length.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::blur::{apply_blur, kernel_from_logits, Kernel, SIMPLEX_TOL};
use crate::checkpoint::ModelBundle;
use crate::control::{make_control, ControlInput, ControlKind};
use crate::diffusion::{ddim_invert, ddim_step, TimestepPlan};
use crate::image::{DepthMap, Image};
use crate::perceptual::{AestheticScorer, PerceptualMetric, SharpnessReward};
use crate::{ops, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZsldbConfig {
    /// Weight of the (negated) aesthetic reward.
    pub gamma: f64,
    /// Weight of the perceptual distance to the observation.
    pub lambda: f64,
    pub invert_steps: usize,
    pub sample_steps: usize,
    pub iterations: usize,
    /// Adam step size for the latent.
    pub step_size: f64,
    /// Adam step size for the kernel logits.
    pub kernel_step_size: f64,
    pub kernel_size: usize,
    pub conditioning: ControlKind,
    pub seed: u64,
}

impl Default for ZsldbConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: 1.5,
            invert_steps: 50,
            sample_steps: 10,
            iterations: 200,
            step_size: 0.05,
            kernel_step_size: 0.01,
            kernel_size: 9,
            conditioning: ControlKind::Depth,
            seed: 0,
        }
    }
}

impl ZsldbConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", format!("must be a finite value >= 0, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be a finite value >= 0, got {}", self.lambda));
        }
        if self.sample_steps == 0 {
            return bad("sample_steps", "must be at least 1".into());
        }
        if self.invert_steps < self.sample_steps {
            return bad(
                "invert_steps",
                format!("must be >= sample_steps ({}), got {}", self.sample_steps, self.invert_steps),
            );
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if !(self.step_size > 0.0 && self.kernel_step_size > 0.0) {
            return bad("step_size", "step sizes must be positive".into());
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return bad("kernel_size", format!("must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }
}

/// The three loss terms, unweighted, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Squared latent distance between the observation and the re-blurred estimate.
    pub fidelity: f64,
    /// Negated aesthetic reward.
    pub aesthetic: f64,
    /// Perceptual distance between the observation and the estimate.
    pub perceptual: f64,
    pub total: f64,
}

impl LossTerms {
    fn is_finite(&self) -> bool {
        self.fidelity.is_finite() && self.aesthetic.is_finite() && self.perceptual.is_finite() && self.total.is_finite()
    }

    fn non_finite_error(&self, iteration: usize) -> Error {
        Error::NonFinite {
            iteration,
            fidelity: self.fidelity,
            aesthetic: self.aesthetic,
            perceptual: self.perceptual,
        }
    }
}

/// Encodes `y` and runs deterministic DDIM inversion with the unconditioned denoiser over
/// `invert_steps` uniform steps from 0 to `T`.
pub fn invert_observation(y: &Image, bundle: &ModelBundle, invert_steps: usize) -> Result<Tensor> {
    let factor = bundle.model.autoencoder.factor();
    if y.height % factor != 0 || y.width % factor != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} is not divisible by the latent factor {factor}",
            y.height, y.width
        )));
    }
    if y.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("observation must lie in [0, 1]".into()));
    }
    let x = y.to_tensor(&bundle.device, bundle.dtype)?;
    let z0 = bundle.autoencoder.encode(&x)?;
    let plan = TimestepPlan::ascending(bundle.schedule.timesteps, invert_steps)?;
    let unet = &bundle.unet;
    ddim_invert(&z0, &plan, &|x: &Tensor, t: usize| unet.forward(x, &[t], None), &bundle.schedule)
}

/// The optimization problem for one observation: fixed data, control residuals and plan.
pub struct Problem<'a> {
    bundle: &'a ModelBundle,
    gamma: f64,
    lambda: f64,
    reward: SharpnessReward,
    y: Tensor,
    ey: Tensor,
    plan: TimestepPlan,
    /// Adapter residuals for each transition of the plan; the control map never changes, so
    /// they are computed once.
    residuals: Vec<Option<Vec<Tensor>>>,
}

impl<'a> Problem<'a> {
    pub fn new(bundle: &'a ModelBundle, cfg: &ZsldbConfig, y: &Image, control: &ControlInput) -> Result<Self> {
        cfg.validate()?;
        if control.kind != cfg.conditioning {
            return Err(Error::Config(format!(
                "control input is `{}` but conditioning is `{}`",
                control.kind, cfg.conditioning
            )));
        }
        if control.kind != ControlKind::None && (control.height, control.width) != (y.height, y.width) {
            return Err(Error::Shape(format!(
                "control map {}x{} does not match the image {}x{}",
                control.height, control.width, y.height, y.width
            )));
        }
        let (dev, dtype) = (&bundle.device, bundle.dtype);
        let yt = y.to_tensor(dev, dtype)?;
        let ey = bundle.autoencoder.encode(&yt)?.detach();
        let plan = TimestepPlan::descending(bundle.schedule.timesteps, cfg.sample_steps)?;
        let residuals = match bundle.adapter(control.kind) {
            Some(adapter) => plan
                .pairs()
                .map(|(t, _)| {
                    let r = adapter.encode_control(control, t, dev, dtype)?;
                    Ok(Some(r.into_iter().map(|t| t.detach()).collect()))
                })
                .collect::<Result<_>>()?,
            None => vec![None; plan.transitions()],
        };
        Ok(Self {
            bundle,
            gamma: cfg.gamma,
            lambda: cfg.lambda,
            reward: SharpnessReward::default(),
            y: yt,
            ey,
            plan,
            residuals,
        })
    }

    /// Transition `i` of the conditioned chain.
    fn chain_step(&self, x: &Tensor, i: usize) -> Result<Tensor> {
        let (t, t_prev) = (self.plan.steps[i], self.plan.steps[i + 1]);
        let eps = self.bundle.unet.forward(x, &[t], self.residuals[i].as_deref())?;
        ddim_step(x, &eps, t, t_prev, 0.0, &self.bundle.schedule, None)
    }

    /// Decoded image of the conditioned chain started at `z`, with the full graph attached.
    pub fn render(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for i in 0..self.plan.transitions() {
            x = self.chain_step(&x, i)?;
        }
        self.bundle.autoencoder.decode(&x)
    }

    /// Loss terms for a decoded image and kernel logits, as graph tensors.
    fn terms(&self, image: &Tensor, logits: &Tensor) -> Result<(Tensor, LossTerms)> {
        let kernel = kernel_from_logits(logits)?;
        let reblurred = apply_blur(image, &kernel, 0.0, None)?;
        let fidelity = ops::sum_sq(&(&self.ey - self.bundle.autoencoder.encode(&reblurred)?)?)?;
        let aesthetic = self.reward.reward(image)?.neg()?;
        let perceptual = self.bundle.extractor.distance(&self.y, image)?;
        let total = ((&fidelity + (&aesthetic * self.gamma)?)? + (&perceptual * self.lambda)?)?;
        let values = LossTerms {
            fidelity: ops::scalar(&fidelity)?,
            aesthetic: ops::scalar(&aesthetic)?,
            perceptual: ops::scalar(&perceptual)?,
            total: ops::scalar(&total)?,
        };
        Ok((total, values))
    }

    /// Loss and decoded image without any gradient bookkeeping.
    pub fn evaluate(&self, z: &Tensor, logits: &Tensor) -> Result<(LossTerms, Tensor)> {
        let image = self.render(&z.detach())?;
        let (_, terms) = self.terms(&image, &logits.detach())?;
        Ok((terms, image))
    }

    /// Loss as a differentiable function of `(z, logits)`.
    pub fn loss(&self, z: &Tensor, logits: &Tensor) -> Result<(Tensor, LossTerms)> {
        let image = self.render(z)?;
        self.terms(&image, logits)
    }

    /// Gradient by one backward pass over the whole chain. Memory grows with the chain
    /// length; used as the reference for [`Problem::gradient`].
    pub fn gradient_full(&self, z: &Tensor, logits: &Tensor) -> Result<Gradient> {
        let zv = Var::from_tensor(&z.detach())?;
        let lv = Var::from_tensor(&logits.detach())?;
        let image = self.render(zv.as_tensor())?;
        let (total, terms) = self.terms(&image, lv.as_tensor())?;
        let grads = total.backward()?;
        Ok(Gradient {
            terms,
            z: grad_of(&grads, &zv)?,
            logits: grad_of(&grads, &lv)?,
            image: image.detach(),
        })
    }

    /// Gradient with per-step recomputation.
    pub fn gradient(&self, z: &Tensor, logits: &Tensor) -> Result<Gradient> {
        let steps = self.plan.transitions();
        // Forward sweep without a graph, keeping the input latent of every step.
        let mut inputs = Vec::with_capacity(steps);
        let mut x = z.detach();
        for i in 0..steps {
            let next = self.chain_step(&x, i)?.detach();
            inputs.push(x);
            x = next;
        }

        let x0 = Var::from_tensor(&x)?;
        let lv = Var::from_tensor(&logits.detach())?;
        let image = self.bundle.autoencoder.decode(x0.as_tensor())?;
        let (total, terms) = self.terms(&image, lv.as_tensor())?;
        let grads = total.backward()?;
        let g_logits = grad_of(&grads, &lv)?;
        let mut g = grad_of(&grads, &x0)?;
        let image = image.detach();
        drop(grads);
        drop(total);

        // Backward sweep: replay each step with a graph and pull the cotangent through it.
        for i in (0..steps).rev() {
            let xi = Var::from_tensor(&inputs[i])?;
            let out = self.chain_step(xi.as_tensor(), i)?;
            let grads = (out * &g)?.sum_all()?.backward()?;
            g = grad_of(&grads, &xi)?;
        }
        Ok(Gradient {
            terms,
            z: g,
            logits: g_logits,
            image,
        })
    }
}

fn grad_of(grads: &candle_core::backprop::GradStore, v: &Var) -> Result<Tensor> {
    match grads.get(v.as_tensor()) {
        Some(g) => Ok(g.detach()),
        None => Ok(v.as_tensor().zeros_like()?),
    }
}

pub struct Gradient {
    pub terms: LossTerms,
    pub z: Tensor,
    pub logits: Tensor,
    /// Decoded estimate at the evaluated point.
    pub image: Tensor,
}

/// Adam on a single tensor.
struct Adam {
    lr: f64,
    m: Tensor,
    v: Tensor,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &Tensor, lr: f64) -> Result<Self> {
        Ok(Self {
            lr,
            m: like.zeros_like()?,
            v: like.zeros_like()?,
            t: 0,
        })
    }

    fn step(&mut self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        self.t += 1;
        self.m = ((&self.m * Self::BETA1)? + (g * (1.0 - Self::BETA1))?)?;
        self.v = ((&self.v * Self::BETA2)? + (g.sqr()? * (1.0 - Self::BETA2))?)?;
        let m_hat = (&self.m / (1.0 - Self::BETA1.powi(self.t)))?;
        let v_hat = (&self.v / (1.0 - Self::BETA2.powi(self.t)))?;
        let update = (m_hat / (v_hat.sqrt()? + Self::EPS)?)?;
        Ok((x - (update * self.lr)?)?)
    }
}

fn check_simplex(kernel: &Tensor, iteration: usize) -> Result<()> {
    let w = ops::to_vec_f64(kernel)?;
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NumericalDomain(format!(
            "kernel left the simplex at iteration {iteration} (sum {sum})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DeblurResult {
    pub x_hat: Image,
    pub kernel_hat: Kernel,
    /// Optimized latent, `(1, C, h, w)`, in the bundle's dtype.
    pub z_hat: Tensor,
    pub summary: ResultSummary,
}

/// Everything about a run except the arrays; stored as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub config: ZsldbConfig,
    /// Loss at every evaluated iterate, before its update.
    pub trace: Vec<LossTerms>,
    /// Iterate the result was taken from; `trace.len()` means the iterate after the last update.
    pub best_iteration: usize,
    pub best_loss: LossTerms,
    /// Set when the run stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

pub const RESULT_IMAGE_FILE: &str = "deblurred.png";
pub const RESULT_KERNEL_FILE: &str = "kernel.npy";
pub const RESULT_LATENT_FILE: &str = "latent.npy";
pub const RESULT_META_FILE: &str = "result.json";

impl DeblurResult {
    /// Writes the result bundle into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        crate::io::write_png(&dir.join(RESULT_IMAGE_FILE), &self.x_hat)?;
        crate::io::write_kernel(&dir.join(RESULT_KERNEL_FILE), &self.kernel_hat)?;
        self.z_hat.to_dtype(DType::F32)?.write_npy(dir.join(RESULT_LATENT_FILE))?;
        fs::write(dir.join(RESULT_META_FILE), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }

    /// Reads a bundle written by [`DeblurResult::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(RESULT_META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::data(&meta_path, e.to_string()))?;
        let summary = serde_json::from_str(&text)
            .map_err(|e| Error::data(&meta_path, format!("invalid result metadata: {e}")))?;
        let latent = dir.join(RESULT_LATENT_FILE);
        Ok(Self {
            x_hat: crate::io::read_png(&dir.join(RESULT_IMAGE_FILE))?,
            kernel_hat: crate::io::read_kernel(&dir.join(RESULT_KERNEL_FILE))?,
            z_hat: Tensor::read_npy(&latent).map_err(|e| Error::data(&latent, e.to_string()))?,
            summary,
        })
    }
}

/// Deblurs `y`, using `depth` for depth or edge conditioning.
pub fn optimize(y: &Image, depth: Option<&DepthMap>, bundle: &ModelBundle, cfg: &ZsldbConfig) -> Result<DeblurResult> {
    cfg.validate()?;
    let control = make_control(cfg.conditioning, depth, (y.height, y.width))?;
    let z0 = invert_observation(y, bundle, cfg.invert_steps)?;
    let logits0 = Tensor::zeros((cfg.kernel_size, cfg.kernel_size), bundle.dtype, &bundle.device)?;
    optimize_from(y, &control, bundle, cfg, z0, logits0)
}

/// Runs the optimization from a given initial latent and kernel logits.
pub fn optimize_from(
    y: &Image,
    control: &ControlInput,
    bundle: &ModelBundle,
    cfg: &ZsldbConfig,
    z0: Tensor,
    logits0: Tensor,
) -> Result<DeblurResult> {
    let problem = Problem::new(bundle, cfg, y, control)?;
    let mut z = z0;
    let mut logits = logits0;
    let mut adam_z = Adam::new(&z, cfg.step_size)?;
    let mut adam_l = Adam::new(&logits, cfg.kernel_step_size)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(usize, LossTerms, Tensor, Tensor, Tensor)> = None;
    let mut aborted = None;

    let consider = |best: &mut Option<(usize, LossTerms, Tensor, Tensor, Tensor)>,
                    it: usize,
                    terms: LossTerms,
                    z: &Tensor,
                    l: &Tensor,
                    img: &Tensor| {
        if best.as_ref().is_none_or(|b| terms.total < b.1.total) {
            *best = Some((it, terms, z.clone(), l.clone(), img.clone()));
        }
    };

    for it in 0..cfg.iterations {
        check_simplex(&kernel_from_logits(&logits)?, it)?;
        let grad = problem.gradient(&z, &logits)?;
        if !grad.terms.is_finite() {
            let err = grad.terms.non_finite_error(it);
            if best.is_none() {
                return Err(err);
            }
            warn!("{err}; returning the best iterate so far");
            aborted = Some(err.to_string());
            break;
        }
        trace.push(grad.terms);
        consider(&mut best, it, grad.terms, &z, &logits, &grad.image);
        if it % 20 == 0 {
            debug!(
                "iteration {it}: total {:.5} (fidelity {:.5}, aesthetic {:.4}, perceptual {:.4})",
                grad.terms.total, grad.terms.fidelity, grad.terms.aesthetic, grad.terms.perceptual
            );
        }
        z = adam_z.step(&z, &grad.z)?;
        logits = adam_l.step(&logits, &grad.logits)?;
    }
    if aborted.is_none() {
        check_simplex(&kernel_from_logits(&logits)?, cfg.iterations)?;
        let (terms, image) = problem.evaluate(&z, &logits)?;
        if terms.is_finite() {
            consider(&mut best, cfg.iterations, terms, &z, &logits, &image);
        }
    }

    let (best_iteration, best_loss, z_hat, logits_hat, image) = best.expect("at least one finite iterate");
    info!(
        "finished after {} iterations; best total {:.5} at iterate {best_iteration}",
        trace.len(),
        best_loss.total
    );
    let kernel_hat = Kernel::from_tensor(&kernel_from_logits(&logits_hat)?)?;
    Ok(DeblurResult {
        x_hat: Image::from_tensor(&image.to_dtype(DType::F32)?.to_device(&Device::Cpu)?)?.clamp01(),
        kernel_hat,
        z_hat,
        summary: ResultSummary {
            config: cfg.clone(),
            trace,
            best_iteration,
            best_loss,
            aborted,
        },
    })
}
