//! Spatially-invariant blur `y = k * x + n` with a simplex-constrained kernel, and random
//! camera-shake kernels for synthetic data.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ops::{self, Window};
use crate::{Error, Result};

/// Tolerance for the kernel simplex invariant.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A realized `k x k` blur kernel (row-major, nonnegative, sums to one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f32>) -> Result<Self> {
        let k = Self { size, weights };
        k.validate()?;
        Ok(k)
    }

    pub fn delta(size: usize) -> Result<Self> {
        check_odd(size)?;
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Ok(Self { size, weights })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        check_odd(size)?;
        Ok(Self {
            size,
            weights: vec![1.0 / (size * size) as f32; size * size],
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_odd(self.size)?;
        if self.weights.len() != self.size * self.size {
            return Err(Error::Shape(format!(
                "kernel of size {} has {} weights",
                self.size,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::NumericalDomain("kernel has negative or NaN weights".into()));
        }
        let sum: f64 = self.weights.iter().map(|w| *w as f64).sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL * self.weights.len().max(1) as f64 {
            return Err(Error::NumericalDomain(format!("kernel sums to {sum}, not 1")));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.size + x]
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.weights.clone(), (self.size, self.size), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        if h != w {
            return Err(Error::Shape(format!("kernel must be square, got {h}x{w}")));
        }
        let weights = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { size: h, weights })
    }

    /// Half the L1 distance to `other`, after zero-padding the smaller kernel to a common
    /// centered support.
    pub fn tv_distance(&self, other: &Kernel) -> f64 {
        let n = self.size.max(other.size);
        let grab = |k: &Kernel, y: usize, x: usize| -> f64 {
            let off = (n - k.size) / 2;
            if y < off || x < off || y >= off + k.size || x >= off + k.size {
                0.0
            } else {
                k.at(y - off, x - off) as f64
            }
        };
        let mut acc = 0.0;
        for y in 0..n {
            for x in 0..n {
                acc += (grab(self, y, x) - grab(other, y, x)).abs();
            }
        }
        0.5 * acc
    }

    /// Number of taps carrying more than `threshold` mass.
    pub fn support(&self, threshold: f32) -> usize {
        self.weights.iter().filter(|w| **w > threshold).count()
    }

    pub fn center_mass(&self) -> f32 {
        self.at(self.size / 2, self.size / 2)
    }
}

fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Softmax over all `k*k` logits. Differentiable; always strictly inside the simplex.
pub fn kernel_from_logits(logits: &Tensor) -> Result<Tensor> {
    let (h, w) = logits.dims2()?;
    if h != w {
        return Err(Error::Shape(format!("kernel logits must be square, got {h}x{w}")));
    }
    check_odd(h)?;
    let flat = logits.reshape((1, h * w))?;
    Ok(ops::softmax_last(&flat)?.reshape((h, w))?)
}

/// Convolves every channel of `x` (`(B, C, H, W)`) with `kernel` (`(k, k)`) using replicate
/// padding, then adds `noise_sigma * noise`. Differentiable in `x` and `kernel`.
pub fn apply_blur(x: &Tensor, kernel: &Tensor, noise_sigma: f64, noise: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (kh, kw) = kernel.dims2()?;
    if kh != kw {
        return Err(Error::Shape(format!("kernel must be square, got {kh}x{kw}")));
    }
    check_odd(kh)?;
    let r = kh / 2;
    let padded = x.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?;
    let padded = padded.reshape((b * c, 1, h + 2 * r, w + 2 * r))?;
    let cols = ops::im2col(&padded, Window::new(kh, 1, 0))?;
    // Convolution (not correlation): flipping both axes reverses the flattened kernel.
    let rev: Vec<u32> = (0..(kh * kh) as u32).rev().collect();
    let rev = Tensor::from_vec(rev, kh * kh, kernel.device())?;
    let flipped = kernel.flatten_all()?.index_select(&rev, 0)?.to_dtype(x.dtype())?;
    let y = flipped
        .reshape((1, 1, kh * kh))?
        .broadcast_as((b * c, 1, kh * kh))?
        .contiguous()?
        .matmul(&cols)?
        .reshape((b, c, h, w))?;
    if noise_sigma > 0.0 {
        let n = noise.ok_or(Error::MissingArgument("noise is required when noise_sigma > 0"))?;
        if n.shape() != y.shape() {
            return Err(Error::Shape(format!("noise {:?} vs image {:?}", n.dims(), y.dims())));
        }
        Ok((y + (n * noise_sigma)?)?)
    } else {
        Ok(y)
    }
}

/// Rasterizes a random smooth camera-shake trajectory of arc length `length_px - 1` onto a
/// `size x size` grid. `length_px == 1` is a perfect delta.
pub fn random_motion_kernel<R: Rng + ?Sized>(length_px: usize, size: usize, rng: &mut R) -> Result<Kernel> {
    check_odd(size)?;
    if length_px < 1 || length_px >= size {
        return Err(Error::Config(format!(
            "motion length must satisfy 1 <= length < kernel size, got {length_px} for size {size}"
        )));
    }
    if length_px == 1 {
        return Kernel::delta(size);
    }
    let arc = (length_px - 1) as f64;
    let n = (8.0 * arc).ceil() as usize;
    let step = arc / n as f64;

    // Heading performs a random walk, then gets gaussian-smoothed along the path.
    let turn = Normal::new(0.0, 0.35).expect("valid normal");
    let mut heading = Vec::with_capacity(n);
    let mut theta = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 0..n {
        heading.push(theta);
        theta += turn.sample(rng);
    }
    let sigma = (n as f64 / 6.0).max(1.0);
    let radius = (3.0 * sigma).ceil() as isize;
    let smoothed: Vec<f64> = (0..n as isize)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for j in -radius..=radius {
                let idx = (i + j).clamp(0, n as isize - 1) as usize;
                let wgt = (-(j * j) as f64 / (2.0 * sigma * sigma)).exp();
                acc += wgt * heading[idx];
                norm += wgt;
            }
            acc / norm
        })
        .collect();

    let mut pts = Vec::with_capacity(n + 1);
    let (mut px, mut py) = (0.0f64, 0.0f64);
    pts.push((px, py));
    for th in &smoothed {
        px += step * th.cos();
        py += step * th.sin();
        pts.push((px, py));
    }
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (cx, cy) = (cx / pts.len() as f64, cy / pts.len() as f64);
    let half = (size - 1) as f64 / 2.0;
    // Re-center on the centroid, nudging the path back inside the grid if needed.
    let (mut minx, mut maxx, mut miny, mut maxy) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &pts {
        minx = minx.min(x - cx);
        maxx = maxx.max(x - cx);
        miny = miny.min(y - cy);
        maxy = maxy.max(y - cy);
    }
    let shift = |lo: f64, hi: f64| -> f64 {
        if hi > half {
            half - hi
        } else if lo < -half {
            -half - lo
        } else {
            0.0
        }
    };
    let (sx, sy) = (shift(minx, maxx), shift(miny, maxy));

    let mut weights = vec![0f64; size * size];
    let mass = 1.0 / pts.len() as f64;
    for (x, y) in &pts {
        let gx = (x - cx + sx + half).clamp(0.0, (size - 1) as f64);
        let gy = (y - cy + sy + half).clamp(0.0, (size - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let x1 = (x0 + 1).min(size - 1);
        let y1 = (y0 + 1).min(size - 1);
        weights[y0 * size + x0] += mass * (1.0 - fx) * (1.0 - fy);
        weights[y0 * size + x1] += mass * fx * (1.0 - fy);
        weights[y1 * size + x0] += mass * (1.0 - fx) * fy;
        weights[y1 * size + x1] += mass * fx * fy;
    }
    let total: f64 = weights.iter().sum();
    Kernel::new(size, weights.iter().map(|w| (w / total) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop with replicate padding.
    fn brute_force_blur(x: &[f64], (c, h, w): (usize, usize, usize), k: &[f64], ks: usize) -> Vec<f64> {
        let r = ks as isize / 2;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for u in 0..ks as isize {
                        for v in 0..ks as isize {
                            let yi = (i - (u - r)).clamp(0, h as isize - 1) as usize;
                            let xj = (j - (v - r)).clamp(0, w as isize - 1) as usize;
                            acc += k[(u * ks as isize + v) as usize] * x[(ch * h + yi) * w + xj];
                        }
                    }
                    out[(ch * h as usize + i as usize) * w + j as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn logits_to_kernel_examples() {
        let dev = Device::Cpu;
        let k = kernel_from_logits(&Tensor::zeros((5, 5), DType::F64, &dev).unwrap()).unwrap();
        for v in ops::to_vec_f64(&k).unwrap() {
            assert!((v - 1.0 / 25.0).abs() < 1e-12);
        }
        let mut logits = vec![0f64; 25];
        logits[12] = 20.0;
        let k = kernel_from_logits(&Tensor::from_vec(logits.clone(), (5, 5), &dev).unwrap()).unwrap();
        assert!(ops::to_vec_f64(&k).unwrap()[12] > 0.999);
        let base = Tensor::randn(0f64, 1.0, (5, 5), &dev).unwrap();
        let a = ops::to_vec_f64(&kernel_from_logits(&base).unwrap()).unwrap();
        let b = ops::to_vec_f64(&kernel_from_logits(&(&base + 3.7).unwrap()).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            kernel_from_logits(&Tensor::zeros((4, 4), DType::F64, &dev).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn blur_examples() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1.0, (1, 3, 12, 10), &dev).unwrap();
        let delta = Kernel::delta(5).unwrap().to_tensor(&dev, DType::F32).unwrap();
        let y = apply_blur(&x, &delta, 0.0, None).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let constant = Tensor::full(0.42f64, (1, 2, 8, 8), &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = random_motion_kernel(5, 9, &mut rng).unwrap().to_tensor(&dev, DType::F64).unwrap();
        // The weights were rounded to f32, so the exact expected value is 0.42 * sum(k).
        let mass: f64 = ops::to_vec_f64(&k).unwrap().iter().sum();
        assert!((mass - 1.0).abs() < 1e-6);
        for v in ops::to_vec_f64(&apply_blur(&constant, &k, 0.0, None).unwrap()).unwrap() {
            assert!((v - 0.42 * mass).abs() < 1e-12);
        }
        assert!(matches!(apply_blur(&constant, &k, 0.1, None), Err(Error::MissingArgument(_))));
    }

    #[test]
    fn blur_matches_brute_force() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f64, 1.0, (1, 2, 16, 16), &dev).unwrap();
        let k = kernel_from_logits(&Tensor::randn(0f64, 1.0, (5, 5), &dev).unwrap()).unwrap();
        let y = ops::to_vec_f64(&apply_blur(&x, &k, 0.0, None).unwrap()).unwrap();
        let want = brute_force_blur(&ops::to_vec_f64(&x).unwrap(), (2, 16, 16), &ops::to_vec_f64(&k).unwrap(), 5);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_gradient_wrt_logits_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f64, 1.0, (1, 1, 10, 10), &dev).unwrap();
        let target = Tensor::rand(0f64, 1.0, (1, 1, 10, 10), &dev).unwrap();
        let logits = Var::randn(0f64, 1.0, (3, 3), &dev).unwrap();
        let loss = |l: &Tensor| -> Tensor {
            let k = kernel_from_logits(l).unwrap();
            ops::sum_sq(&(apply_blur(&x, &k, 0.0, None).unwrap() - &target).unwrap()).unwrap()
        };
        let grads = loss(logits.as_tensor()).backward().unwrap();
        let g = ops::to_vec_f64(grads.get(&logits).unwrap()).unwrap();
        let base = ops::to_vec_f64(logits.as_tensor()).unwrap();
        for i in 0..9 {
            let h = 1e-6;
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = ops::scalar(&loss(&Tensor::from_vec(p, (3, 3), &dev).unwrap())).unwrap();
            let fm = ops::scalar(&loss(&Tensor::from_vec(m, (3, 3), &dev).unwrap())).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-4), "{i}: fd={fd} ad={}", g[i]);
        }
    }

    #[test]
    fn motion_kernel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_motion_kernel(1, 9, &mut rng).unwrap();
        assert!(k.center_mass() > 0.9);
        for i in 0..1000 {
            let len = 1 + i % 8;
            let k = random_motion_kernel(len, 9, &mut rng).unwrap();
            k.validate().unwrap();
        }
        let mut means = Vec::new();
        for len in [3, 7, 11] {
            let total: usize = (0..100)
                .map(|_| random_motion_kernel(len, 13, &mut rng).unwrap().support(1e-3))
                .sum();
            means.push(total as f64 / 100.0);
        }
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
        assert!(random_motion_kernel(9, 9, &mut rng).is_err());
        assert!(random_motion_kernel(0, 9, &mut rng).is_err());
    }

    #[test]
    fn tv_distance_properties() {
        let d = Kernel::delta(5).unwrap();
        let u = Kernel::uniform(5).unwrap();
        assert_eq!(d.tv_distance(&d), 0.0);
        assert!((d.tv_distance(&u) - (1.0 - 1.0 / 25.0)).abs() < 1e-6);
        let d9 = Kernel::delta(9).unwrap();
        assert!(d.tv_distance(&d9) < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn blur_preserves_nonnegativity_and_matches_oracle(
            seed in 0u64..10_000,
            h in 3usize..20,
            w in 3usize..20,
            half in 0usize..5,
        ) {
            let ks = 2 * half + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dev = Device::Cpu;
            let xs: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
            let logits: Vec<f64> = (0..ks * ks).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let x = Tensor::from_vec(xs.clone(), (1, 1, h, w), &dev).unwrap();
            let k = kernel_from_logits(&Tensor::from_vec(logits, (ks, ks), &dev).unwrap()).unwrap();
            let y = ops::to_vec_f64(&apply_blur(&x, &k, 0.0, None).unwrap()).unwrap();
            let want = brute_force_blur(&xs, (1, h, w), &ops::to_vec_f64(&k).unwrap(), ks);
            for (a, b) in y.iter().zip(&want) {
                proptest::prop_assert!((a - b).abs() < 1e-6);
                proptest::prop_assert!(*a >= 0.0);
            }
        }
    }
}
