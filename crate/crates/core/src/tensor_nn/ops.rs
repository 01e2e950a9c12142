//! Forward numeric primitives on plain tensors.
//!
//! These are the reference forwards; [`Graph`](super::Graph) reuses them and
//! adds the matching backward rules.

use super::{RngState, Scalar, Tensor};
use crate::{Error, Result};

/// `a[m×k] · b[k×n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![F::zero(); m * n];
    F::gemm(m, k, n, F::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, F::zero(), &mut out, n as isize, 1);
    Tensor::new([m, n], out)
}

/// `x[…×d_in] · wᵀ + bias`, with `w` stored `[d_out×d_in]`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let (d_out, d_in) = w.dims2()?;
    if x.last_dim() != d_in {
        return Err(Error::dim(format!("linear expects last extent {d_in}, input has shape {:?}", x.shape())));
    }
    let rows = x.rows();
    let mut out = vec![F::zero(); rows * d_out];
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::dim(format!("bias {:?} does not match width {d_out}", b.shape())));
        }
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { F::one() } else { F::zero() };
    F::gemm(
        rows,
        d_in,
        d_out,
        F::one(),
        x.data(),
        d_in as isize,
        1,
        w.data(),
        1,
        d_in as isize,
        beta,
        &mut out,
        d_out as isize,
        1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = x.clone();
    let n = x.last_dim();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Log-softmax of one row.
pub(crate) fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Normalizes each last-axis row to zero mean and unit variance, then
/// applies `gain` and `bias`.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(format!("layer_norm width {d} vs gain {:?} / bias {:?}", gain.shape(), bias.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (mean, inv_std) = moments(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = gain.data()[j] * (*v - mean) * inv_std + bias.data()[j];
        }
    }
    Ok(out)
}

/// `(mean, 1/sqrt(var + eps))` with the biased variance.
pub(crate) fn moments<F: Scalar>(values: &[F], eps: F) -> (F, F) {
    let n = F::from_usize(values.len()).unwrap();
    let mean = values.iter().copied().sum::<F>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, (var + eps).sqrt().recip())
}

/// Exact-erf GELU, `x·Φ(x)`.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    x * normal_cdf(x)
}

pub(crate) fn normal_cdf<F: Scalar>(x: F) -> F {
    F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn normal_pdf<F: Scalar>(x: F) -> F {
    (-(x * x) * F::lit(0.5)).exp() * F::lit(0.398_942_280_401_432_7)
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kernel} larger than padded input {}x{} (pad {pad})",
                height, width
            )));
        }
        Ok(Self { in_channels, height, width, kernel, stride, pad })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Output indices `lo..hi` along one axis whose input tap `o·stride +
    /// offset − pad` lands inside `0..size`.
    fn valid_range(&self, offset: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(offset).div_ceil(s);
        let hi = match (size + self.pad).checked_sub(offset + 1) {
            Some(last) => (last / s + 1).min(out),
            None => 0,
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one `[c×h×w]` image into `[c·k·k × h'·w']` columns.
    pub(crate) fn im2col<F: Scalar>(&self, image: &[F], cols: &mut [F]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (k, s) = (self.kernel, self.stride);
        let positions = oh * ow;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, self.height, oh);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, self.width, ow);
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    dst.fill(F::zero());
                    for oy in y0..y1 {
                        let src = &plane[(oy * s + ky - self.pad) * self.width..];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx - self.pad;
                            out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                out[ox] = src[ox * s + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, summing overlaps.
    pub(crate) fn col2im<F: Scalar>(&self, cols: &[F], image: &mut [F]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (k, s) = (self.kernel, self.stride);
        let positions = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, self.height, oh);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, self.width, ow);
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in y0..y1 {
                        let dst = &mut plane[(oy * s + ky - self.pad) * self.width..];
                        let inp = &src[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            dst[ox * s + kx - self.pad] += inp[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[c_in×h×w]` (or a batch `[b×c_in×h×w]`) with
/// `kernels[c_out×c_in×k×k]`, zero padding.
pub fn conv2d<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let (batch, c, h, w, batched) = match *x.shape() {
        [c, h, w] => (1, c, h, w, false),
        [b, c, h, w] => (b, c, h, w, true),
        _ => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {:?}", x.shape()))),
    };
    let &[c_out, c_in, k, k2] = kernels.shape() else {
        return Err(Error::dim(format!("conv2d kernels must be rank 4, got {:?}", kernels.shape())));
    };
    if c_in != c || k != k2 {
        return Err(Error::dim(format!(
            "conv2d kernels {:?} incompatible with input {:?}",
            kernels.shape(),
            x.shape()
        )));
    }
    let geo = ConvGeometry::new(c, h, w, k, stride, pad)?;
    let out = conv2d_forward(x.data(), batch, &geo, kernels.data(), c_out);
    let (oh, ow) = (geo.out_height(), geo.out_width());
    if batched {
        Tensor::new([batch, c_out, oh, ow], out)
    } else {
        Tensor::new([c_out, oh, ow], out)
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(
    x: &[F],
    batch: usize,
    geo: &ConvGeometry,
    kernels: &[F],
    c_out: usize,
) -> Vec<F> {
    use rayon::prelude::*;
    let positions = geo.out_positions();
    let patch = geo.patch_len();
    let in_len = geo.in_channels * geo.height * geo.width;
    let mut out = vec![F::zero(); batch * c_out * positions];
    out.par_chunks_mut(c_out * positions).enumerate().for_each_init(
        || vec![F::zero(); patch * positions],
        |cols, (b, dst)| {
            geo.im2col(&x[b * in_len..(b + 1) * in_len], cols);
            F::gemm(
                c_out,
                patch,
                positions,
                F::one(),
                kernels,
                patch as isize,
                1,
                cols,
                positions as isize,
                1,
                F::zero(),
                dst,
                positions as isize,
                1,
            );
        },
    );
    out
}

/// Input gradient of a stride-1 convolution, computed as a convolution of
/// the output gradient with the flipped, channel-transposed kernels.
pub(crate) fn conv2d_input_grad<F: Scalar>(
    dy: &[F],
    batch: usize,
    geo: &ConvGeometry,
    kernels: &[F],
    c_out: usize,
) -> Vec<F> {
    let (k, c_in) = (geo.kernel, geo.in_channels);
    let mut flipped = vec![F::zero(); kernels.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * c_out + co) * k + ky) * k + kx] =
                        kernels[((co * c_in + ci) * k + k - 1 - ky) * k + k - 1 - kx];
                }
            }
        }
    }
    let back = ConvGeometry {
        in_channels: c_out,
        height: geo.out_height(),
        width: geo.out_width(),
        kernel: k,
        stride: 1,
        pad: k - 1 - geo.pad,
    };
    debug_assert_eq!((back.out_height(), back.out_width()), (geo.height, geo.width));
    conv2d_forward(dy, batch, &back, &flipped, c_in)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1-rate)`.
pub fn dropout_mask<F: Scalar>(shape: &[usize], rate: f64, rng: &mut RngState) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let n = shape.iter().product();
    let keep = F::lit(1.0 / (1.0 - rate));
    let data = if rate == 0.0 {
        vec![F::one(); n]
    } else {
        (0..n).map(|_| if rng.uniform() < rate { F::zero() } else { keep }).collect()
    };
    Tensor::new(shape.to_vec(), data)
}
