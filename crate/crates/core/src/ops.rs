//! Tensor primitives that candle either lacks or implements slowly on CPU.
//!
//! Convolutions are lowered to `im2col` + batched matmul. The `im2col` op carries its
//! own backward (`col2im`), so gradients with respect to both the input and the
//! weights go through candle's matmul backward instead of the much slower native
//! transposed convolution.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::Result;

/// Sliding-window geometry shared by `im2col` and `col2im`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col_slice<T: Copy + Default>(
    x: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: Window,
) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let mut out = vec![T::default(); b * c * k * k * oh * ow];
    for bc in 0..b * c {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (bc * k + ky) * k + kx;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: Window,
) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let mut out = vec![T::default(); b * c * h * w];
    for bc in 0..b * c {
        let plane = &mut out[bc * h * w..(bc + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (bc * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("im2col/col2im expect contiguous inputs"),
    }
}

/// `(B, C, H, W)` -> `(B, C*k*k, OH*OW)`.
struct Im2Col(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let k = self.0.kernel;
        if h + 2 * self.0.pad < k || w + 2 * self.0.pad < k {
            bail!("im2col: kernel {k} larger than padded input {h}x{w}")
        }
        let shape = Shape::from((b, c * k * k, self.0.out_len(h) * self.0.out_len(w)));
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(im2col_slice(contiguous(x, layout)?, dims, self.0)),
            CpuStorage::F64(x) => CpuStorage::F64(im2col_slice(contiguous(x, layout)?, dims, self.0)),
            _ => bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1_no_bwd(&Col2Im {
            window: self.0,
            height: h,
            width: w,
        })?;
        Ok(Some(g))
    }
}

/// `(B, C*k*k, OH*OW)` -> `(B, C, H, W)`, summing overlapping windows. Adjoint of [`Im2Col`].
struct Col2Im {
    window: Window,
    height: usize,
    width: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ckk, _) = layout.shape().dims3()?;
        let kk = self.window.kernel * self.window.kernel;
        let c = ckk / kk;
        let dims = (b, c, self.height, self.width);
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(col2im_slice(contiguous(x, layout)?, dims, self.window)),
            CpuStorage::F64(x) => CpuStorage::F64(col2im_slice(contiguous(x, layout)?, dims, self.window)),
            _ => bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.window))?))
    }
}

/// Unfolds sliding windows: `(B, C, H, W)` -> `(B, C*k*k, OH*OW)`. Differentiable.
pub fn im2col(x: &Tensor, window: Window) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(window))?)
}

/// 2D cross-correlation. `weight` is `(O, C*k*k)` with the `(c, ky, kx)` flattening order
/// used by [`im2col`].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, window: Window) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let out_ch = weight.dim(0)?;
    let cols = im2col(x, window)?;
    // candle's batched matmul needs materialized (non stride-0) batch operands.
    let y = weight.broadcast_left(b)?.contiguous()?.matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, out_ch, 1))?)?,
        None => y,
    };
    Ok(y.reshape((b, out_ch, window.out_len(h), window.out_len(w)))?)
}

/// Nearest-neighbour 2x upsampling built from broadcast + reshape so the backward pass is a
/// plain reduction.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sum of squares of all elements, as a rank-0 tensor.
pub fn sum_sq(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum_all()?)
}

/// Mean of squares of all elements, as a rank-0 tensor.
pub fn mean_sq(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.mean_all()?)
}

/// Normalizes `x` to unit L2 norm along the channel axis of an NCHW tensor.
pub fn unit_normalize_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Reads a rank-0 or single-element tensor as `f64`.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.get(0)?.to_scalar::<f64>()?)
}

/// Flattens any tensor into a `Vec<f64>`.
pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}
