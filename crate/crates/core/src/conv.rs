//! Direct 3D convolution kernels: forward, transposed, and the gradient
//! kernels for both. Bias is handled by the caller as a separate add.
//!
//! Kernel layout is (C_out, C_in, k, k, k) for both modes; feature maps are
//! (C, D, H, W) row-major. All loops keep the innermost axis contiguous and
//! reduce in a fixed order, so results are deterministic.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// Output spatial extent of a forward convolution along one axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input as i64 + 2 * padding as i64 - k as i64;
    if span < 0 {
        return Err(CoreError::Shape(format!(
            "kernel {k} larger than padded input {input}+2*{padding}"
        )));
    }
    if span % stride as i64 != 0 {
        return Err(CoreError::Shape(format!(
            "non-integer output extent: ({input} + 2*{padding} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok((span / stride as i64) as usize + 1)
}

/// Output spatial extent of a transposed convolution along one axis.
pub fn tconv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let out = (input as i64 - 1) * stride as i64 - 2 * padding as i64 + k as i64;
    if out < 1 {
        return Err(CoreError::Shape(format!(
            "transposed conv output extent {out} < 1 (input {input}, k {k}, stride {stride}, padding {padding})"
        )));
    }
    Ok(out as usize)
}

fn check_kernel<T: Scalar>(kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = kernel.shape();
    if s.len() != 5 || s[2] != s[3] || s[3] != s[4] {
        return Err(CoreError::Shape(format!(
            "kernel must be (C_out, C_in, k, k, k), got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// 3D (transposed) convolution. `x` is (C_in, D, H, W), `kernel` is
/// (C_out, C_in, k, k, k); output is (C_out, D', H', W').
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    transposed: bool,
) -> Result<Tensor<T>> {
    let (c_out, c_in, k) = check_kernel(kernel)?;
    let (cx, d, h, w) = x.dims4()?;
    if cx != c_in {
        return Err(CoreError::Shape(format!(
            "input has {cx} channels but kernel expects C_in = {c_in}"
        )));
    }
    if k < 1 || stride < 1 {
        return Err(CoreError::Shape(format!(
            "kernel size {k} and stride {stride} must be >= 1"
        )));
    }
    if transposed {
        let od = tconv_out_extent(d, k, stride, padding)?;
        let oh = tconv_out_extent(h, k, stride, padding)?;
        let ow = tconv_out_extent(w, k, stride, padding)?;
        Ok(scatter_conv(
            x,
            kernel,
            stride,
            padding,
            c_out,
            (od, oh, ow),
            true,
        ))
    } else {
        let od = conv_out_extent(d, k, stride, padding)?;
        let oh = conv_out_extent(h, k, stride, padding)?;
        let ow = conv_out_extent(w, k, stride, padding)?;
        Ok(gather_conv(
            x,
            kernel,
            stride,
            padding,
            c_out,
            (od, oh, ow),
            true,
        ))
    }
}

/// Gradient of `conv3d` w.r.t. its input.
pub fn conv3d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    transposed: bool,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (_, c_in, _) = check_kernel(kernel)?;
    let sp = (input_shape[1], input_shape[2], input_shape[3]);
    if transposed {
        // forward scatters, so the gradient gathers
        Ok(gather_conv(
            grad_out, kernel, stride, padding, c_in, sp, false,
        ))
    } else {
        Ok(scatter_conv(
            grad_out, kernel, stride, padding, c_in, sp, false,
        ))
    }
}

/// Gradient of `conv3d` w.r.t. its kernel.
pub fn conv3d_grad_weight<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    stride: usize,
    padding: usize,
    transposed: bool,
    k: usize,
) -> Result<Tensor<T>> {
    if transposed {
        // dw[co,ci,t] = sum_i x[ci,i] * dy[co, i*s - p + t]
        let t = corr_weight(x, grad_out, stride, padding, k);
        Ok(transpose01(&t))
    } else {
        // dw[co,ci,t] = sum_o dy[co,o] * x[ci, o*s - p + t]
        Ok(corr_weight(grad_out, x, stride, padding, k))
    }
}

/// Valid coarse-grid index range so that `i*stride - padding + tap` stays
/// inside [0, fine_extent).
#[inline]
fn coarse_range(
    coarse_extent: usize,
    fine_extent: usize,
    stride: usize,
    padding: usize,
    tap: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let off = tap as i64 - padding as i64;
    let lo = (-off).div_euclid(s) + i64::from((-off).rem_euclid(s) != 0);
    let hi = (fine_extent as i64 - 1 - off).div_euclid(s);
    let lo = lo.max(0);
    let hi = hi.min(coarse_extent as i64 - 1);
    if lo > hi {
        (1, 0) // empty
    } else {
        (lo as usize, hi as usize)
    }
}

/// out[b, o] (+)= sum over a, taps of in[a, o*s - p + tap] * w, where the
/// coarse grid is the output. Used for forward conv (`out_on_axis0`) and the
/// input gradient of transposed conv.
fn gather_conv<T: Scalar>(
    inp: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    out_channels: usize,
    out_sp: (usize, usize, usize),
    out_on_axis0: bool,
) -> Tensor<T> {
    let (a_ch, di, hi, wi) = (
        inp.shape()[0],
        inp.shape()[1],
        inp.shape()[2],
        inp.shape()[3],
    );
    let k = w.shape()[2];
    let (od, oh, ow) = out_sp;
    let mut out = Tensor::zeros(&[out_channels, od, oh, ow]);
    let xd = inp.data();
    let wd = w.data();
    let od_data = out.data_mut();
    let (w0, w1) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(
        if out_on_axis0 { w1 } else { w0 },
        a_ch,
        "kernel/channel mismatch"
    );
    let p = padding as i64;
    let s = stride;
    for b in 0..out_channels {
        let ob = b * od * oh * ow;
        for a in 0..a_ch {
            let ib = a * di * hi * wi;
            let widx_base = if out_on_axis0 {
                (b * w1 + a) * k * k * k
            } else {
                (a * w1 + b) * k * k * k
            };
            debug_assert!(out_on_axis0 && b < w0 || !out_on_axis0 && a < w0);
            for kd in 0..k {
                let (d0, d1) = coarse_range(od, di, s, padding, kd);
                for kh in 0..k {
                    let (h0, h1) = coarse_range(oh, hi, s, padding, kh);
                    for kw in 0..k {
                        let (wl, wh) = coarse_range(ow, wi, s, padding, kw);
                        if d0 > d1 || h0 > h1 || wl > wh {
                            continue;
                        }
                        let wv = wd[widx_base + (kd * k + kh) * k + kw];
                        if wv == T::ZERO {
                            continue;
                        }
                        for o_d in d0..=d1 {
                            let id = (o_d * s) as i64 - p + kd as i64;
                            for o_h in h0..=h1 {
                                let ih2 = (o_h * s) as i64 - p + kh as i64;
                                let orow = ob + (o_d * oh + o_h) * ow;
                                let irow = ib + ((id as usize) * hi + ih2 as usize) * wi;
                                let ioff = kw as i64 - p;
                                for o_w in wl..=wh {
                                    let iw = (o_w * s) as i64 + ioff;
                                    od_data[orow + o_w] += wv * xd[irow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// out[b, i*s - p + tap] += in[a, i] * w, where the coarse grid is the input.
/// Used for transposed-conv forward (`out_on_axis0`) and the input gradient
/// of forward conv.
fn scatter_conv<T: Scalar>(
    inp: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    out_channels: usize,
    out_sp: (usize, usize, usize),
    out_on_axis0: bool,
) -> Tensor<T> {
    let (a_ch, di, hi, wi) = (
        inp.shape()[0],
        inp.shape()[1],
        inp.shape()[2],
        inp.shape()[3],
    );
    let k = w.shape()[2];
    let (od, oh, ow) = out_sp;
    let mut out = Tensor::zeros(&[out_channels, od, oh, ow]);
    let xd = inp.data();
    let wd = w.data();
    let out_data = out.data_mut();
    let w1 = w.shape()[1];
    let p = padding as i64;
    let s = stride;
    for b in 0..out_channels {
        let ob = b * od * oh * ow;
        for a in 0..a_ch {
            let ib = a * di * hi * wi;
            let widx_base = if out_on_axis0 {
                (b * w1 + a) * k * k * k
            } else {
                (a * w1 + b) * k * k * k
            };
            for kd in 0..k {
                let (d0, d1) = coarse_range(di, od, s, padding, kd);
                for kh in 0..k {
                    let (h0, h1) = coarse_range(hi, oh, s, padding, kh);
                    for kw in 0..k {
                        let (wl, wh) = coarse_range(wi, ow, s, padding, kw);
                        if d0 > d1 || h0 > h1 || wl > wh {
                            continue;
                        }
                        let wv = wd[widx_base + (kd * k + kh) * k + kw];
                        if wv == T::ZERO {
                            continue;
                        }
                        for i_d in d0..=d1 {
                            let t_d = (i_d * s) as i64 - p + kd as i64;
                            for i_h in h0..=h1 {
                                let t_h = (i_h * s) as i64 - p + kh as i64;
                                let irow = ib + (i_d * hi + i_h) * wi;
                                let orow = ob + ((t_d as usize) * oh + t_h as usize) * ow;
                                let toff = kw as i64 - p;
                                for i_w in wl..=wh {
                                    let t_w = (i_w * s) as i64 + toff;
                                    out_data[orow + t_w as usize] += wv * xd[irow + i_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// dw[a, b, taps] = sum over the coarse grid of coarse[a, o] * fine[b, o*s - p + tap].
fn corr_weight<T: Scalar>(
    coarse: &Tensor<T>,
    fine: &Tensor<T>,
    stride: usize,
    padding: usize,
    k: usize,
) -> Tensor<T> {
    let (a_ch, od, oh, ow) = (
        coarse.shape()[0],
        coarse.shape()[1],
        coarse.shape()[2],
        coarse.shape()[3],
    );
    let (b_ch, di, hi, wi) = (
        fine.shape()[0],
        fine.shape()[1],
        fine.shape()[2],
        fine.shape()[3],
    );
    let mut out = Tensor::zeros(&[a_ch, b_ch, k, k, k]);
    let cd = coarse.data();
    let fd = fine.data();
    let out_data = out.data_mut();
    let p = padding as i64;
    let s = stride;
    for a in 0..a_ch {
        let ab = a * od * oh * ow;
        for b in 0..b_ch {
            let bb = b * di * hi * wi;
            for kd in 0..k {
                let (d0, d1) = coarse_range(od, di, s, padding, kd);
                for kh in 0..k {
                    let (h0, h1) = coarse_range(oh, hi, s, padding, kh);
                    for kw in 0..k {
                        let (wl, wh) = coarse_range(ow, wi, s, padding, kw);
                        let mut acc = T::ZERO;
                        if d0 <= d1 && h0 <= h1 && wl <= wh {
                            for o_d in d0..=d1 {
                                let id = (o_d * s) as i64 - p + kd as i64;
                                for o_h in h0..=h1 {
                                    let ih2 = (o_h * s) as i64 - p + kh as i64;
                                    let crow = ab + (o_d * oh + o_h) * ow;
                                    let frow = bb + ((id as usize) * hi + ih2 as usize) * wi;
                                    let foff = kw as i64 - p;
                                    for o_w in wl..=wh {
                                        let iw = (o_w * s) as i64 + foff;
                                        acc += cd[crow + o_w] * fd[frow + iw as usize];
                                    }
                                }
                            }
                        }
                        out_data[((a * b_ch + b) * k * k + kd * k + kh) * k + kw] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Swaps the first two axes of a rank-5 tensor.
fn transpose01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (a, b, rest): (usize, usize, usize) = (s[0], s[1], s[2] * s[3] * s[4]);
    let mut out = Tensor::zeros(&[s[1], s[0], s[2], s[3], s[4]]);
    let src = t.data();
    let dst = out.data_mut();
    for i in 0..a {
        for j in 0..b {
            let from = (i * b + j) * rest;
            let to = (j * a + i) * rest;
            dst[to..to + rest].copy_from_slice(&src[from..from + rest]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    /// Direct nested-loop convolution, the independent oracle.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
        let (ci, d, h, wd) = x.dims4().unwrap();
        let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let od = (d + 2 * padding - k) / stride + 1;
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (wd + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[co, od, oh, ow]);
        for c in 0..co {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (zd * stride + kd) as i64 - padding as i64;
                                        let ih = (zh * stride + kh) as i64 - padding as i64;
                                        let iw = (zw * stride + kw) as i64 - padding as i64;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= d as i64
                                            || ih >= h as i64
                                            || iw >= wd as i64
                                        {
                                            continue;
                                        }
                                        let xi = ((ic * d + id as usize) * h + ih as usize) * wd
                                            + iw as usize;
                                        let wi = (((c * ci + ic) * k + kd) * k + kh) * k + kw;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let oi = ((c * od + zd) * oh + zh) * ow + zw;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0);
        let k = Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d(&x, &k, 1, 0, false).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn stride2_shape_arithmetic() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        let k = Tensor::<f32>::zeros(&[3, 1, 2, 2, 2]);
        let y = conv3d(&x, &k, 2, 0, false).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2, 2]);
    }

    #[test]
    fn all_ones_kernel_sums_the_block() {
        // a 2x2x2 slab holding 1,2,3,4 twice; all-ones kernel with stride 2
        // collapses it to a single voxel holding the sum of all 8 inputs.
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = conv3d(&x, &k, 2, 0, false).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 20.0);
        let oracle = conv_oracle(&x, &k, 2, 0);
        assert_eq!(y.data(), oracle.data());
    }

    #[test]
    fn matches_nested_loop_oracle_on_random_shapes() {
        let mut rng = Prng::new(11);
        for &(ci, co, d, k, s, p) in &[
            (1usize, 1usize, 4usize, 2usize, 2usize, 0usize),
            (2, 3, 5, 3, 1, 1),
            (3, 2, 6, 3, 1, 0),
            (2, 2, 6, 2, 2, 0),
            (1, 4, 5, 1, 1, 0),
            (2, 2, 4, 3, 1, 2),
        ] {
            let x: Tensor<f64> = rng.randn(&[ci, d, d, d]);
            let w: Tensor<f64> = rng.randn(&[co, ci, k, k, k]);
            let got = conv3d(&x, &w, s, p, false).unwrap();
            let want = conv_oracle(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(
                got.max_abs_diff(&want) <= 1e-12,
                "conv mismatch for ci={ci} co={co} d={d} k={k} s={s} p={p}"
            );
        }
    }

    #[test]
    fn transposed_inverts_stride2_downsampling_shape() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2, 2]);
        let k = Tensor::<f64>::zeros(&[5, 3, 2, 2, 2]);
        let y = conv3d(&x, &k, 2, 0, true).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4, 4]);
    }

    #[test]
    fn transposed_is_adjoint_of_forward() {
        // <conv(x), y> == <x, convT(y)> with the kernel's channel axes swapped,
        // which pins the transposed kernel as the true adjoint map.
        let mut rng = Prng::new(5);
        let x: Tensor<f64> = rng.randn(&[2, 4, 4, 4]);
        let w: Tensor<f64> = rng.randn(&[3, 2, 2, 2, 2]);
        let y: Tensor<f64> = rng.randn(&[3, 2, 2, 2]);
        let fwd = conv3d(&x, &w, 2, 0, false).unwrap();
        let lhs: f64 = fwd.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // swap (co, ci) so the same tensor acts as the adjoint kernel
        let mut wswap = Tensor::<f64>::zeros(&[2, 3, 2, 2, 2]);
        for co in 0..3 {
            for ci in 0..2 {
                for t in 0..8 {
                    wswap.data_mut()[(ci * 3 + co) * 8 + t] = w.data()[(co * 2 + ci) * 8 + t];
                }
            }
        }
        let adj = conv3d(&y, &wswap, 2, 0, true).unwrap();
        let rhs: f64 = adj.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_extents() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4, 4]);
        let k = Tensor::<f32>::zeros(&[3, 1, 2, 2, 2]);
        assert!(conv3d(&x, &k, 2, 0, false).is_err());
        let k2 = Tensor::<f32>::zeros(&[3, 2, 2, 2, 2]);
        // (4 - 2) % 3 != 0 -> non-integer output extent
        assert!(conv3d(&x, &k2, 3, 0, false).is_err());
        // kernel larger than padded input
        let k3 = Tensor::<f32>::zeros(&[1, 2, 5, 5, 5]);
        assert!(conv3d(&x, &k3, 1, 0, false).is_err());
    }

    #[test]
    fn grad_kernels_match_finite_differences() {
        let mut rng = Prng::new(23);
        for &(s, p, transposed) in &[
            (1usize, 0usize, false),
            (2, 0, false),
            (2, 0, true),
            (1, 1, true),
        ] {
            let x: Tensor<f64> = rng.randn(&[2, 4, 4, 4]);
            let w: Tensor<f64> = rng.randn(&[3, 2, 2, 2, 2]);
            let y = conv3d(&x, &w, s, p, transposed).unwrap();
            let probe: Tensor<f64> = rng.randn(y.shape());
            let loss = |xx: &Tensor<f64>, ww: &Tensor<f64>| -> f64 {
                conv3d(xx, ww, s, p, transposed)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let gx = conv3d_grad_input(&probe, &w, s, p, transposed, x.shape()).unwrap();
            let gw = conv3d_grad_weight(&probe, &x, s, p, transposed, 2).unwrap();
            let h = 1e-6;
            for idx in [0usize, 7, 31] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
                assert!(
                    (fd - gx.data()[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "dx mismatch at {idx}: fd={fd} analytic={}",
                    gx.data()[idx]
                );
                let mut wp = w.clone();
                wp.data_mut()[idx] += h;
                let mut wm = w.clone();
                wm.data_mut()[idx] -= h;
                let fdw = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
                assert!(
                    (fdw - gw.data()[idx]).abs() <= 1e-6 * (1.0 + fdw.abs()),
                    "dw mismatch at {idx}: fd={fdw} analytic={}",
                    gw.data()[idx]
                );
            }
        }
    }
}
