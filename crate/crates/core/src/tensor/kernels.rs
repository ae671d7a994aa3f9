//! Forward and backward kernels on `[C, H, W]` tensors.
//!
//! Backward kernels return gradients for their inputs given the gradient of
//! the output. They never store intermediate state; `im2col` buffers are
//! rebuilt on the backward pass.

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

fn conv_dims<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = x.chw()?;
    let [cout, wcin, kh, kw] = weight.shape()[..] else {
        return Err(shape_err(format!(
            "conv weight must be [Cout, Cin, k, k], got {:?}",
            weight.shape()
        )));
    };
    if wcin != cin {
        return Err(shape_err(format!(
            "conv expects {wcin} input channels, input has {cin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err(format!(
            "conv kernel must be odd and square, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(shape_err(format!(
            "conv bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok((cin, h, w, cout, kh))
}

fn im2col<S: Scalar>(x: &[S], cin: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![S::zero(); cin * k * k * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst_row[xo] = src_row[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], cin: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![S::zero(); cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst_row[(xo as isize + dx) as usize] += src_row[xo];
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 convolution with zero "same" padding.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (cin, h, w, cout, k) = conv_dims(x, weight, bias)?;
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = vec![S::zero(); cout * hw];
    for (o, b) in bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    if k == 1 {
        S::gemm(
            cout,
            kk,
            hw,
            S::one(),
            weight.data(),
            kk as isize,
            1,
            x.data(),
            hw as isize,
            1,
            S::one(),
            &mut out,
            hw as isize,
            1,
        );
    } else {
        let cols = im2col(x.data(), cin, h, w, k);
        S::gemm(
            cout,
            kk,
            hw,
            S::one(),
            weight.data(),
            kk as isize,
            1,
            &cols,
            hw as isize,
            1,
            S::one(),
            &mut out,
            hw as isize,
            1,
        );
    }
    Tensor::from_vec(&[cout, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (cin, h, w, cout, k) = conv_dims(x, weight, bias)?;
    if grad_out.shape() != [cout, h, w] {
        return Err(shape_err(format!(
            "conv grad {:?} vs output [{cout}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let dy = grad_out.data();

    let db: Vec<S> = (0..cout)
        .map(|o| dy[o * hw..(o + 1) * hw].iter().copied().sum())
        .collect();

    let cols_owned;
    let cols: &[S] = if k == 1 {
        x.data()
    } else {
        cols_owned = im2col(x.data(), cin, h, w, k);
        &cols_owned
    };
    let mut dw = vec![S::zero(); cout * kk];
    // dW[Cout, K] = dY[Cout, HW] * cols^T[HW, K]
    S::gemm(
        cout,
        hw,
        kk,
        S::one(),
        dy,
        hw as isize,
        1,
        cols,
        1,
        hw as isize,
        S::zero(),
        &mut dw,
        kk as isize,
        1,
    );
    let mut dcols = vec![S::zero(); kk * hw];
    // dcols[K, HW] = W^T[K, Cout] * dY[Cout, HW]
    S::gemm(
        kk,
        cout,
        hw,
        S::one(),
        weight.data(),
        1,
        kk as isize,
        dy,
        hw as isize,
        1,
        S::zero(),
        &mut dcols,
        hw as isize,
        1,
    );
    let dx = if k == 1 {
        dcols
    } else {
        col2im(&dcols, cin, h, w, k)
    };

    Ok((
        Tensor::from_vec(&[cin, h, w], dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[cout], db)?,
    ))
}

/// Sub-pixel rearrangement `[C*s*s, H, W] -> [C, H*s, W*s]`.
///
/// Channel `c*s*s + i*s + j` at `(y, x)` lands at `(c, y*s + i, x*s + j)`.
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, s: usize) -> Result<Tensor<S>> {
    let (cs2, h, w) = x.chw()?;
    if s == 0 || cs2 % (s * s) != 0 {
        return Err(shape_err(format!(
            "pixel shuffle by {s} needs channels divisible by {}, got {cs2}",
            s * s
        )));
    }
    let c = cs2 / (s * s);
    let (oh, ow) = (h * s, w * s);
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for co in 0..c {
        for i in 0..s {
            for j in 0..s {
                let ci = co * s * s + i * s + j;
                let plane = &src[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    let orow = (co * oh + y * s + i) * ow;
                    for xx in 0..w {
                        out[orow + xx * s + j] = plane[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<S: Scalar>(x: &Tensor<S>, s: usize) -> Result<Tensor<S>> {
    let (c, oh, ow) = x.chw()?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(shape_err(format!(
            "pixel unshuffle by {s} of {oh}x{ow} is not integral"
        )));
    }
    let (h, w) = (oh / s, ow / s);
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for co in 0..c {
        for i in 0..s {
            for j in 0..s {
                let ci = co * s * s + i * s + j;
                let plane = &mut out[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    let orow = (co * oh + y * s + i) * ow;
                    for xx in 0..w {
                        plane[y * w + xx] = src[orow + xx * s + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * s * s, h, w], out)
}

struct Tap<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: S,
    ay: S,
    clamped_x: bool,
    clamped_y: bool,
}

#[inline]
fn tap<S: Scalar>(x: usize, y: usize, u: S, v: S, h: usize, w: usize) -> Tap<S> {
    let max_x = S::from_f64((w - 1) as f64);
    let max_y = S::from_f64((h - 1) as f64);
    let sx = S::from_f64(x as f64) + u;
    let sy = S::from_f64(y as f64) + v;
    let clamped_x = !(sx >= S::zero() && sx <= max_x);
    let clamped_y = !(sy >= S::zero() && sy <= max_y);
    let sx = sx.max(S::zero()).min(max_x);
    let sy = sy.max(S::zero()).min(max_y);
    let fx = sx.floor();
    let fy = sy.floor();
    let x0 = fx.to_f64() as usize;
    let y0 = fy.to_f64() as usize;
    Tap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        ax: sx - fx,
        ay: sy - fy,
        clamped_x,
        clamped_y,
    }
}

fn warp_dims<S: Scalar>(feature: &Tensor<S>, flow: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = feature.chw()?;
    if flow.shape() != [2, h, w] {
        return Err(shape_err(format!(
            "flow must be [2, {h}, {w}] to warp a {:?} feature, got {:?}",
            feature.shape(),
            flow.shape()
        )));
    }
    Ok((c, h, w))
}

/// Backward warping: output at `p` is the bilinear sample of `feature` at
/// `p + flow(p)`, with coordinates clamped to the border.
pub fn warp<S: Scalar>(feature: &Tensor<S>, flow: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = warp_dims(feature, flow)?;
    let hw = h * w;
    let f = feature.data();
    let fl = flow.data();
    let mut out = vec![S::zero(); c * hw];
    let one = S::one();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(x, y, fl[p], fl[hw + p], h, w);
            let (i00, i01) = (t.y0 * w + t.x0, t.y0 * w + t.x1);
            let (i10, i11) = (t.y1 * w + t.x0, t.y1 * w + t.x1);
            if t.ax == S::zero() && t.ay == S::zero() {
                for ch in 0..c {
                    out[ch * hw + p] = f[ch * hw + i00];
                }
                continue;
            }
            let w00 = (one - t.ay) * (one - t.ax);
            let w01 = (one - t.ay) * t.ax;
            let w10 = t.ay * (one - t.ax);
            let w11 = t.ay * t.ax;
            for ch in 0..c {
                let base = ch * hw;
                out[base + p] = w00 * f[base + i00]
                    + w01 * f[base + i01]
                    + w10 * f[base + i10]
                    + w11 * f[base + i11];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Gradients of [`warp`] with respect to the feature and the flow.
///
/// The flow gradient is zero along an axis whose sample coordinate was
/// clamped to the border.
pub fn warp_backward<S: Scalar>(
    feature: &Tensor<S>,
    flow: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, h, w) = warp_dims(feature, flow)?;
    feature.same_shape(grad_out)?;
    let hw = h * w;
    let f = feature.data();
    let fl = flow.data();
    let g = grad_out.data();
    let mut df = vec![S::zero(); c * hw];
    let mut dflow = vec![S::zero(); 2 * hw];
    let one = S::one();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(x, y, fl[p], fl[hw + p], h, w);
            let (i00, i01) = (t.y0 * w + t.x0, t.y0 * w + t.x1);
            let (i10, i11) = (t.y1 * w + t.x0, t.y1 * w + t.x1);
            let w00 = (one - t.ay) * (one - t.ax);
            let w01 = (one - t.ay) * t.ax;
            let w10 = t.ay * (one - t.ax);
            let w11 = t.ay * t.ax;
            let mut gx = S::zero();
            let mut gy = S::zero();
            for ch in 0..c {
                let base = ch * hw;
                let go = g[base + p];
                df[base + i00] += w00 * go;
                df[base + i01] += w01 * go;
                df[base + i10] += w10 * go;
                df[base + i11] += w11 * go;
                let (f00, f01, f10, f11) =
                    (f[base + i00], f[base + i01], f[base + i10], f[base + i11]);
                gx += go * ((one - t.ay) * (f01 - f00) + t.ay * (f11 - f10));
                gy += go * ((one - t.ax) * (f10 - f00) + t.ax * (f11 - f01));
            }
            if !t.clamped_x {
                dflow[p] = gx;
            }
            if !t.clamped_y {
                dflow[hw + p] = gy;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, h, w], df)?,
        Tensor::from_vec(&[2, h, w], dflow)?,
    ))
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    x * half * (S::one() + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let cdf = half * (S::one() + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * S::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (cin, h, w) = x.chw().unwrap();
        let (cout, k) = (wt.shape()[0], wt.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, w]);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt.data()[((o * cin + c) * k + ky) * k + kx]
                                    * x.data()[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(cin, cout, k, h, w) in &[(3, 4, 3, 5, 7), (2, 3, 1, 4, 4), (1, 2, 5, 6, 3)] {
            let x = t(&[cin, h, w], &lcg(1, cin * h * w));
            let wt = t(&[cout, cin, k, k], &lcg(2, cout * cin * k * k));
            let b = t(&[cout], &lcg(3, cout));
            let got = conv2d(&x, &wt, &b).unwrap();
            let want = conv_oracle(&x, &wt, &b);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> is bilinear; its derivative in each argument is the backward output.
        let (cin, cout, k, h, w) = (3, 2, 3, 4, 5);
        let x = t(&[cin, h, w], &lcg(4, cin * h * w));
        let wt = t(&[cout, cin, k, k], &lcg(5, cout * cin * k * k));
        let b = t(&[cout], &lcg(6, cout));
        let dy = t(&[cout, h, w], &lcg(7, cout * h * w));
        let (dx, dw, db) = conv2d_backward(&x, &wt, &b, &dy).unwrap();
        let objective = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>| {
            conv2d(x, wt, b).unwrap().mul(&dy).unwrap().sum()
        };
        let eps = 1e-6;
        for i in [0, 7, 22, cin * h * w - 1] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&xp, &wt, &b) - objective(&xm, &wt, &b)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}]");
        }
        for i in [0, 13, cout * cin * k * k - 1] {
            let mut wp = wt.clone();
            wp.data_mut()[i] += eps;
            let mut wm = wt.clone();
            wm.data_mut()[i] -= eps;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - dw.data()[i]).abs() < 1e-7, "dw[{i}]");
        }
        for o in 0..cout {
            let expected: f64 = dy.data()[o * h * w..(o + 1) * h * w].iter().sum();
            assert!((db.data()[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        let wt = Tensor::<f32>::zeros(&[2, 4, 3, 3]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(conv2d(&x, &wt, &b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn pixel_shuffle_matches_index_mapping() {
        let (c, s, h, w) = (2, 3, 2, 4);
        let x = Tensor::<f64>::from_fn(&[c * s * s, h, w], |i| i as f64);
        let y = pixel_shuffle(&x, s).unwrap();
        assert_eq!(y.shape(), &[c, h * s, w * s]);
        for cc in 0..c {
            for i in 0..s {
                for j in 0..s {
                    for yy in 0..h {
                        for xx in 0..w {
                            let src = x.data()[((cc * s * s + i * s + j) * h + yy) * w + xx];
                            let dst = y.data()[(cc * h * s + yy * s + i) * w * s + xx * s + j];
                            assert_eq!(src, dst);
                        }
                    }
                }
            }
        }
        assert_eq!(pixel_unshuffle(&y, s).unwrap(), x);
    }

    #[test]
    fn warp_half_pixel_is_neighbour_mean() {
        let f = t(&[1, 1, 4], &[1.0, 3.0, 7.0, 15.0]);
        let flow = t(&[2, 1, 4], &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let out = warp(&f, &flow).unwrap();
        // last column samples x = 3.5, clamped to the border
        assert_eq!(out.data(), &[2.0, 5.0, 11.0, 15.0]);
    }

    #[test]
    fn warp_integer_shift_replicates_border() {
        let f = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let mut flow = Tensor::<f32>::zeros(&[2, 3, 4]);
        flow.data_mut()[..12].fill(1.0);
        let out = warp(&f, &flow).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let sx = (x + 1).min(3);
                    assert_eq!(
                        out.data()[(c * 3 + y) * 4 + x],
                        f.data()[(c * 3 + y) * 4 + sx]
                    );
                }
            }
        }
    }

    #[test]
    fn warp_backward_matches_finite_differences() {
        let (c, h, w) = (2, 4, 5);
        let f = t(&[c, h, w], &lcg(8, c * h * w));
        // generic non-integer flow, mostly in range
        let flow = t(&[2, h, w], &lcg(9, 2 * h * w)).scale(1.3);
        let dy = t(&[c, h, w], &lcg(10, c * h * w));
        let (df, dflow) = warp_backward(&f, &flow, &dy).unwrap();
        let obj = |f: &Tensor<f64>, fl: &Tensor<f64>| warp(f, fl).unwrap().mul(&dy).unwrap().sum();
        let eps = 1e-7;
        for i in 0..f.len() {
            let mut p = f.clone();
            p.data_mut()[i] += eps;
            let mut m = f.clone();
            m.data_mut()[i] -= eps;
            let fd = (obj(&p, &flow) - obj(&m, &flow)) / (2.0 * eps);
            assert!((fd - df.data()[i]).abs() < 1e-6, "dfeature[{i}]");
        }
        for i in 0..flow.len() {
            let mut p = flow.clone();
            p.data_mut()[i] += eps;
            let mut m = flow.clone();
            m.data_mut()[i] -= eps;
            let fd = (obj(&f, &p) - obj(&f, &m)) / (2.0 * eps);
            assert!(
                (fd - dflow.data()[i]).abs() < 1e-6,
                "dflow[{i}]: fd {fd} vs {}",
                dflow.data()[i]
            );
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
