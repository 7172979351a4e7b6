use super::Tensor;
use crate::error::{Error, Result};

/// Output spatial size of a strided, zero-padded cross-correlation.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} does not fit a {}x{} map with padding {}", kh, kw, h, w, padding),
        ));
    }
    Ok(((h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1))
}

/// Output indices `[lo, hi)` whose receptive tap at offset `k` lands inside
/// the unpadded input.
#[inline]
fn valid_range(k: usize, padding: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if in_len + padding <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + padding - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Kernel taps that touch at least one in-bounds input:
/// `(ky, kx, y0, y1, x0, x1)` with the output ranges they contribute to.
fn live_taps(g: &ConvGeom, stride: usize, padding: usize) -> Vec<(usize, usize, usize, usize, usize, usize)> {
    let mut taps = Vec::with_capacity(g.kh * g.kw);
    for ky in 0..g.kh {
        let (y0, y1) = valid_range(ky, padding, stride, g.h, g.oh);
        for kx in 0..g.kw {
            let (x0, x1) = valid_range(kx, padding, stride, g.w, g.ow);
            if y0 < y1 && x0 < x1 {
                taps.push((ky, kx, y0, y1, x0, x1));
            }
        }
    }
    taps
}

/// Flat kernel offset of the only live tap when input and output maps are
/// both 1x1, where the convolution is a plain matrix product.
fn point_tap(g: &ConvGeom, taps: &[(usize, usize, usize, usize, usize, usize)]) -> Option<usize> {
    match taps {
        [(ky, kx, ..)] if g.h * g.w == 1 && g.oh * g.ow == 1 => Some(ky * g.kw + kx),
        _ => None,
    }
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(input_shape: &[usize], kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    if input_shape.len() != 4 || kernel.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected rank-4 input and kernel, got {:?} and {:?}", input_shape, kernel.shape()),
        ));
    }
    let (n, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let ks = kernel.shape();
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", kc, c_in),
        ));
    }
    let (oh, ow) = conv_output_hw(h, w, kh, kw, stride, padding)?;
    Ok(ConvGeom { n, c_in, h, w, c_out, kh, kw, oh, ow })
}

/// Zero-padded 2-D cross-correlation (no kernel flip).
///
/// `input` is `[N, C_in, H, W]`, `kernel` is `[C_out, C_in, kh, kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input.shape(), kernel, stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let taps = live_taps(&g, stride, padding);
    let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
    if let Some(t) = point_tap(&g, &taps) {
        for n in 0..g.n {
            let xn = &x[n * g.c_in..(n + 1) * g.c_in];
            for o in 0..g.c_out {
                let mut acc = 0.0;
                for (c, xv) in xn.iter().enumerate() {
                    acc += k[(o * g.c_in + c) * g.kh * g.kw + t] * xv;
                }
                out[n * g.c_out + o] = acc;
            }
        }
        return Tensor::new(vec![g.n, g.c_out, 1, 1], out)?.check_finite("conv2d");
    }
    for n in 0..g.n {
        for o in 0..g.c_out {
            let out_base = (n * g.c_out + o) * g.oh * g.ow;
            for c in 0..g.c_in {
                let in_base = (n * g.c_in + c) * g.h * g.w;
                for &(ky, kx, y0, y1, x0, x1) in &taps {
                    let wv = k[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    for y in y0..y1 {
                        let iy = y * stride + ky - padding;
                        let orow = out_base + y * g.ow;
                        let irow = in_base + iy * g.w;
                        for xo in x0..x1 {
                            out[orow + xo] += wv * x[irow + xo * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)?.check_finite("conv2d")
}

/// Transpose of the linear map `x -> conv2d(x, kernel)` at the given input
/// shape, applied to `cotangent`.
pub fn conv2d_adjoint(
    cotangent: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    let g = conv_geom(input_shape, kernel, stride, padding)?;
    if cotangent.shape() != [g.n, g.c_out, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_adjoint",
            format!(
                "cotangent {:?} does not match conv output {:?}",
                cotangent.shape(),
                [g.n, g.c_out, g.oh, g.ow]
            ),
        ));
    }
    let gy = cotangent.data();
    let k = kernel.data();
    let taps = live_taps(&g, stride, padding);
    let mut out = vec![0.0; g.n * g.c_in * g.h * g.w];
    if let Some(t) = point_tap(&g, &taps) {
        for n in 0..g.n {
            let on = &mut out[n * g.c_in..(n + 1) * g.c_in];
            for o in 0..g.c_out {
                let gv = gy[n * g.c_out + o];
                for (c, v) in on.iter_mut().enumerate() {
                    *v += k[(o * g.c_in + c) * g.kh * g.kw + t] * gv;
                }
            }
        }
        return Tensor::new(input_shape.to_vec(), out)?.check_finite("conv2d_adjoint");
    }
    for n in 0..g.n {
        for o in 0..g.c_out {
            let g_base = (n * g.c_out + o) * g.oh * g.ow;
            for c in 0..g.c_in {
                let in_base = (n * g.c_in + c) * g.h * g.w;
                for &(ky, kx, y0, y1, x0, x1) in &taps {
                    let wv = k[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    for y in y0..y1 {
                        let iy = y * stride + ky - padding;
                        let grow = g_base + y * g.ow;
                        let irow = in_base + iy * g.w;
                        for xo in x0..x1 {
                            out[irow + xo * stride + kx - padding] += wv * gy[grow + xo];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)?.check_finite("conv2d_adjoint")
}

/// Gradient of `<cotangent, conv2d(input, K)>` with respect to `K`.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    cotangent: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let probe = Tensor::zeros(kernel_shape);
    let g = conv_geom(input.shape(), &probe, stride, padding)?;
    if cotangent.shape() != [g.n, g.c_out, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_kernel_grad",
            format!("cotangent {:?} does not match conv output", cotangent.shape()),
        ));
    }
    let x = input.data();
    let gy = cotangent.data();
    let taps = live_taps(&g, stride, padding);
    let mut out = vec![0.0; kernel_shape.iter().product()];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let g_base = (n * g.c_out + o) * g.oh * g.ow;
            for c in 0..g.c_in {
                let in_base = (n * g.c_in + c) * g.h * g.w;
                for &(ky, kx, y0, y1, x0, x1) in &taps {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * stride + ky - padding;
                        let grow = g_base + y * g.ow;
                        let irow = in_base + iy * g.w;
                        for xo in x0..x1 {
                            acc += gy[grow + xo] * x[irow + xo * stride + kx - padding];
                        }
                    }
                    out[((o * g.c_in + c) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), out)?.check_finite("conv2d_kernel_grad")
}

/// `output[n, j] = sum_k weight[j, k] * input[n, k] (+ bias[j])`.
pub fn dense_apply(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.rank() != 2 || weight.rank() != 2 || input.shape()[1] != weight.shape()[1] {
        return Err(Error::shape(
            "dense",
            format!("input {:?} incompatible with weight {:?}", input.shape(), weight.shape()),
        ));
    }
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::shape("dense", format!("bias {:?} for {} outputs", b.shape(), m)));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..m {
            let wj = &w[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for k in 0..d {
                acc += wj[k] * xi[k];
            }
            if let Some(b) = bias {
                acc += b.data()[j];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)?.check_finite("dense")
}

/// Pairwise channel sort along axis 1: `(a, b) -> (min, max)` for channel
/// pairs `(2i, 2i+1)`.
pub fn minmax_apply(input: &Tensor) -> Result<Tensor> {
    minmax_with_mask(input).map(|(t, _)| t)
}

/// As [`minmax_apply`], also returning for every pair whether it was swapped.
/// Ties are not swapped, so the min output routes to the first slot.
pub(crate) fn minmax_with_mask(input: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    if input.rank() < 2 {
        return Err(Error::shape("minmax", format!("need a channel axis, got {:?}", input.shape())));
    }
    let shape = input.shape();
    let (n, c) = (shape[0], shape[1]);
    if c % 2 != 0 {
        return Err(Error::OddChannels(c));
    }
    let inner: usize = shape[2..].iter().product();
    let x = input.data();
    let mut out = x.to_vec();
    let mut swapped = vec![false; n * (c / 2) * inner];
    for s in 0..n {
        for p in 0..c / 2 {
            let a_base = (s * c + 2 * p) * inner;
            let b_base = a_base + inner;
            for r in 0..inner {
                let (a, b) = (x[a_base + r], x[b_base + r]);
                if a > b {
                    out[a_base + r] = b;
                    out[b_base + r] = a;
                    swapped[(s * (c / 2) + p) * inner + r] = true;
                }
            }
        }
    }
    Ok((Tensor::new(shape.to_vec(), out)?, swapped))
}

/// Routes an output cotangent back through a recorded minmax.
pub(crate) fn minmax_backward(cotangent: &Tensor, swapped: &[bool]) -> Tensor {
    let shape = cotangent.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let g = cotangent.data();
    let mut out = g.to_vec();
    for s in 0..n {
        for p in 0..c / 2 {
            let a_base = (s * c + 2 * p) * inner;
            let b_base = a_base + inner;
            for r in 0..inner {
                if swapped[(s * (c / 2) + p) * inner + r] {
                    out[a_base + r] = g[b_base + r];
                    out[b_base + r] = g[a_base + r];
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}
