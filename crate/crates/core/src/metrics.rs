//! Image and kernel quality metrics used by the evaluation harness.
//!
//! PSNR and SSIM are pixelwise and sensitive to misalignment; reports carry them as
//! informational columns next to the perceptual distance.

use crate::blur::Kernel;
use crate::image::Image;
use crate::{Error, Result};

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`. Identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(-10.0 * mse.log10())
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity with an 11x11 gaussian window (sigma 1.5) over valid window
/// positions, averaged over channels. Images smaller than the window use a single window
/// spanning the whole image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height, a.width);
    let r = SSIM_RADIUS.min((h.min(w) - 1) / 2);
    let taps: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let norm: f64 = taps.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for cy in r..h - r {
            for cx in r..w - r {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, ty) in taps.iter().enumerate() {
                    for (dx, tx) in taps.iter().enumerate() {
                        let (y, x) = (cy + dy - r, cx + dx - r);
                        let wgt = ty * tx / norm;
                        let va = a.at(y, x, c) as f64;
                        let vb = b.at(y, x, c) as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Total-variation distance between an estimated and a true kernel (centered, zero padded).
pub fn kernel_tv(estimate: &Kernel, truth: &Kernel) -> f64 {
    estimate.tv_distance(truth)
}

/// Smallest total-variation distance over integer translations of the estimate by at most
/// `max_shift` pixels. A blind estimate is only determined up to such a shift, which the
/// latent image absorbs.
pub fn aligned_kernel_tv(estimate: &Kernel, truth: &Kernel, max_shift: usize) -> f64 {
    let n = estimate.size.max(truth.size) + 2 * max_shift;
    let embed = |k: &Kernel, sy: isize, sx: isize| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        let off = ((n - k.size) / 2) as isize;
        for y in 0..k.size {
            for x in 0..k.size {
                let (yy, xx) = (y as isize + off + sy, x as isize + off + sx);
                out[yy as usize * n + xx as usize] = k.at(y, x) as f64;
            }
        }
        out
    };
    let t = embed(truth, 0, 0);
    let s = max_shift as isize;
    let mut best = f64::INFINITY;
    for sy in -s..=s {
        for sx in -s..=s {
            let e = embed(estimate, sy, sx);
            let d = 0.5 * e.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>();
            best = best.min(d);
        }
    }
    best
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u32) -> Image {
        let mut s = seed;
        let data = (0..h * w * 3)
            .map(|_| {
                s = s.wrapping_mul(1664525).wrapping_add(1013904223);
                (s >> 8) as f32 / (1u32 << 24) as f32
            })
            .collect();
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn psnr_of_constant_offset() {
        let a = Image::filled(8, 8, 3, 0.25);
        let b = Image::filled(8, 8, 3, 0.35);
        let d = 0.35f32 as f64 - 0.25f32 as f64;
        assert!((psnr(&a, &b).unwrap() - (-20.0 * d.log10())).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let x = noise(20, 24, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // Constant images have zero variance, so only the luminance term remains.
        let (p, q) = (0.2f32, 0.6f32);
        let expect = (2.0 * p as f64 * q as f64 + SSIM_C1) / ((p as f64).powi(2) + (q as f64).powi(2) + SSIM_C1);
        let got = ssim(&Image::filled(16, 16, 3, p), &Image::filled(16, 16, 3, q)).unwrap();
        assert!((got - expect).abs() < 1e-9);
        let y = noise(20, 24, 2);
        let s = ssim(&x, &y).unwrap();
        assert!(s < 0.2 && s > -0.2, "independent noise ssim {s}");
        assert!(matches!(ssim(&x, &noise(20, 20, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn aligned_tv_absorbs_translation() {
        let mut w = vec![0.0; 25];
        w[11] = 0.5;
        w[12] = 0.5;
        let truth = Kernel::new(5, w).unwrap();
        let mut s = vec![0.0; 25];
        s[12] = 0.5;
        s[13] = 0.5;
        let shifted = Kernel::new(5, s).unwrap();
        assert!((kernel_tv(&shifted, &truth) - 0.5).abs() < 1e-7);
        assert!(aligned_kernel_tv(&shifted, &truth, 1) < 1e-7);
        assert!((aligned_kernel_tv(&shifted, &truth, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
