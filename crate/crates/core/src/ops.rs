//! Numeric kernels: convolution, pooling, reductions, normalization,
//! activations, dense layers and the classification loss.
//!
//! All kernels are pure functions over immutable tensors and accumulate in
//! f64 regardless of the element width, so the f32 build stays close to the
//! f64 oracles. Forward functions are public; the matching backward functions
//! are consumed by the autodiff tape.

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Channel-wise reduction mode: collapse (B,C,H,W) to (B,1,H,W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ReduceMode {
    Max,
    Min,
    Mean,
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (b, c, h, w) = input.dims4().map_err(|_| {
        Error::shape("conv2d", "input rank", "4 (NCHW)", input.rank())
    })?;
    if c != spec.in_channels {
        return Err(Error::shape("conv2d", "input channels", spec.in_channels, c));
    }
    let want_w = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
    if weights.shape() != want_w {
        return Err(Error::shape(
            "conv2d",
            "weight shape",
            format!("{want_w:?}"),
            format!("{:?}", weights.shape()),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            "bias shape",
            format!("[{}]", spec.out_channels),
            format!("{:?}", bias.shape()),
        ));
    }
    if !input.all_finite() {
        return Err(Error::NonFinite { op: "conv2d", what: "input" });
    }
    if !weights.all_finite() || !bias.all_finite() {
        return Err(Error::NonFinite { op: "conv2d", what: "parameters" });
    }
    Ok((b, c, h, w))
}

/// Gather one sample's receptive fields into `cols`, laid out as
/// `[out_h*out_w, in_c*k*k]`. Out-of-bounds taps read as zero padding.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    sample: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
    cols: &mut [f64],
) {
    let (_, c, h, w) = input.dims4().expect("rank 4");
    let k = spec.kernel;
    let stride = spec.stride;
    let x = input.data();
    let kk = c * k * k;
    cols.fill(0.0);
    for oy in 0..oh {
        for ox in 0..ow {
            let col = &mut cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            for ic in 0..c {
                let plane = (sample * c + ic) * h * w;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = plane + iy as usize * w;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad_w as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[(ic * k + ky) * k + kx] = x[row + ix as usize].as_f64();
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with square kernels. `Same` padding keeps the
/// spatial extent at stride 1; `Valid` shrinks it.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = check_conv_shapes(input, weights, bias, spec)?;
    let (oh, pad_h) = spec.out_extent(h);
    let (ow, pad_w) = spec.out_extent(w);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {} does not fit {}x{} input", spec.kernel, h, w),
        ));
    }
    let k = spec.kernel;
    let kk = c * k * k;
    let oc_n = spec.out_channels;
    let wf: Vec<f64> = weights.data().iter().map(|v| v.as_f64()).collect();
    let bf: Vec<f64> = bias.data().iter().map(|v| v.as_f64()).collect();
    let mut out = vec![T::zero(); b * oc_n * oh * ow];
    let mut cols = vec![0.0f64; oh * ow * kk];
    for bi in 0..b {
        im2col(input, bi, spec, oh, ow, pad_h, pad_w, &mut cols);
        for oc in 0..oc_n {
            let wrow = &wf[oc * kk..(oc + 1) * kk];
            let dst = &mut out[(bi * oc_n + oc) * oh * ow..(bi * oc_n + oc + 1) * oh * ow];
            for (p, slot) in dst.iter_mut().enumerate() {
                let col = &cols[p * kk..(p + 1) * kk];
                let mut acc = bf[oc];
                for i in 0..kk {
                    acc += wrow[i] * col[i];
                }
                *slot = T::from_f64(acc);
            }
        }
    }
    Tensor::nchw(b, oc_n, oh, ow, out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = input.dims4().expect("conv2d input rank 4");
    let (oh, pad_h) = spec.out_extent(h);
    let (ow, pad_w) = spec.out_extent(w);
    let k = spec.kernel;
    let kk = c * k * k;
    let oc_n = spec.out_channels;
    let plane = oh * ow;
    let go = grad_out.data();
    let wf: Vec<f64> = weights.data().iter().map(|v| v.as_f64()).collect();

    let mut gw = vec![0.0f64; oc_n * kk];
    let mut gb = vec![0.0f64; oc_n];
    let mut gx = vec![0.0f64; b * c * h * w];
    let mut cols = vec![0.0f64; plane * kk];
    let mut gcols = vec![0.0f64; plane * kk];

    for bi in 0..b {
        im2col(input, bi, spec, oh, ow, pad_h, pad_w, &mut cols);
        gcols.fill(0.0);
        for oc in 0..oc_n {
            let go_row = &go[(bi * oc_n + oc) * plane..(bi * oc_n + oc + 1) * plane];
            let gw_row = &mut gw[oc * kk..(oc + 1) * kk];
            let w_row = &wf[oc * kk..(oc + 1) * kk];
            for (p, g) in go_row.iter().enumerate() {
                let g = g.as_f64();
                gb[oc] += g;
                let col = &cols[p * kk..(p + 1) * kk];
                let gcol = &mut gcols[p * kk..(p + 1) * kk];
                for i in 0..kk {
                    gw_row[i] += g * col[i];
                    gcol[i] += g * w_row[i];
                }
            }
        }
        // col2im: scatter receptive-field gradients back onto the input
        for oy in 0..oh {
            for ox in 0..ow {
                let gcol = &gcols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                for ic in 0..c {
                    let plane_x = (bi * c + ic) * h * w;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = plane_x + iy as usize * w;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - pad_w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[row + ix as usize] += gcol[(ic * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }

    let gx = Tensor::nchw(b, c, h, w, gx.iter().map(|&v| T::from_f64(v)).collect())
        .expect("grad input shape");
    let gw = Tensor::new(
        weights.shape().to_vec(),
        gw.iter().map(|&v| T::from_f64(v)).collect(),
    )
    .expect("grad weight shape");
    let gb = Tensor::new(vec![oc_n], gb.iter().map(|&v| T::from_f64(v)).collect())
        .expect("grad bias shape");
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pooling with floor semantics (trailing partial windows dropped).
/// Also returns the flat input index of each window's maximum; ties resolve
/// to the first element in scan order.
pub fn maxpool2d_with_argmax<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4().map_err(|_| {
        Error::shape("maxpool2d", "input rank", "4 (NCHW)", input.rank())
    })?;
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
        return Err(Error::invalid("maxpool2d", "window and stride must be >= 1"));
    }
    if wh > h || ww > w {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {wh}x{ww} larger than input {h}x{w}"),
        ));
    }
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;
    let x = input.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    let mut argmax = vec![0usize; b * c * oh * ow];
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = base + oy * sh * w + ox * sw;
                for ky in 0..wh {
                    let row = base + (oy * sh + ky) * w + ox * sw;
                    for kx in 0..ww {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                let o = bc * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok((Tensor::nchw(b, c, oh, ow, out)?, argmax))
}

pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    maxpool2d_with_argmax(input, window, stride).map(|(t, _)| t)
}

pub(crate) fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::<T>::zeros(input_shape);
    let g = grad_out.data().to_vec();
    let gd = gx.data_mut();
    for (o, &i) in argmax.iter().enumerate() {
        gd[i] += g[o];
    }
    gx
}

/// Average pooling with window == stride == `factor`; spatial dims must be
/// divisible. Used to downsample attention maps along skip connections.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4().map_err(|_| {
        Error::shape("avgpool2d", "input rank", "4 (NCHW)", input.rank())
    })?;
    if factor == 0 {
        return Err(Error::invalid("avgpool2d", "factor must be >= 1"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avgpool2d",
            format!("factor {factor} does not divide {h}x{w}"),
        ));
    }
    let oh = h / factor;
    let ow = w / factor;
    let x = input.data();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..factor {
                    let row = base + (oy * factor + ky) * w + ox * factor;
                    for kx in 0..factor {
                        acc += x[row + kx].as_f64();
                    }
                }
                out[bc * oh * ow + oy * ow + ox] = T::from_f64(acc * inv);
            }
        }
    }
    Tensor::nchw(b, c, oh, ow, out)
}

pub(crate) fn avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, oh, ow) = grad_out.dims4().expect("rank 4");
    let h = input_shape[2];
    let w = input_shape[3];
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    let go = grad_out.data().to_vec();
    let mut gx = Tensor::<T>::zeros(input_shape);
    let gd = gx.data_mut();
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[bc * oh * ow + oy * ow + ox] * inv;
                for ky in 0..factor {
                    let row = base + (oy * factor + ky) * w + ox * factor;
                    for kx in 0..factor {
                        gd[row + kx] += g;
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// channel reduction
// ---------------------------------------------------------------------------

/// Collapse the channel axis to 1 by max, min or mean at each spatial cell.
pub fn channel_reduce<T: Scalar>(input: &Tensor<T>, mode: ReduceMode) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4().map_err(|_| {
        Error::shape("channel_reduce", "input rank", "4 (NCHW)", input.rank())
    })?;
    let x = input.data();
    let hw = h * w;
    let mut out = vec![T::zero(); b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let v = match mode {
                ReduceMode::Max => {
                    let mut best = x[bi * c * hw + p];
                    for ic in 1..c {
                        let v = x[(bi * c + ic) * hw + p];
                        if v > best {
                            best = v;
                        }
                    }
                    best
                }
                ReduceMode::Min => {
                    let mut best = x[bi * c * hw + p];
                    for ic in 1..c {
                        let v = x[(bi * c + ic) * hw + p];
                        if v < best {
                            best = v;
                        }
                    }
                    best
                }
                ReduceMode::Mean => {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        acc += x[(bi * c + ic) * hw + p].as_f64();
                    }
                    T::from_f64(acc / c as f64)
                }
            };
            out[bi * hw + p] = v;
        }
    }
    Tensor::nchw(b, 1, h, w, out)
}

/// Gradient of [`channel_reduce`]. Max/min route to the first extremal
/// channel in scan order; mean spreads evenly.
pub(crate) fn channel_reduce_backward<T: Scalar>(
    input: &Tensor<T>,
    mode: ReduceMode,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (b, c, h, w) = input.dims4().expect("rank 4");
    let hw = h * w;
    let x = input.data();
    let go = grad_out.data().to_vec();
    let mut gx = Tensor::<T>::zeros(&[b, c, h, w]);
    let gd = gx.data_mut();
    for bi in 0..b {
        for p in 0..hw {
            let g = go[bi * hw + p];
            match mode {
                ReduceMode::Max | ReduceMode::Min => {
                    let mut best = x[bi * c * hw + p];
                    let mut best_c = 0usize;
                    for ic in 1..c {
                        let v = x[(bi * c + ic) * hw + p];
                        let better = match mode {
                            ReduceMode::Max => v > best,
                            _ => v < best,
                        };
                        if better {
                            best = v;
                            best_c = ic;
                        }
                    }
                    gd[(bi * c + best_c) * hw + p] += g;
                }
                ReduceMode::Mean => {
                    let share = g / T::from_f64(c as f64);
                    for ic in 0..c {
                        gd[(bi * c + ic) * hw + p] += share;
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// l2 normalization
// ---------------------------------------------------------------------------

/// Normalize each batch element (all channels and spatial positions) to unit
/// l2 norm: `x / max(||x||, eps)`. An all-zero sample stays all-zero.
pub fn l2_normalize_per_sample<T: Scalar>(input: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    if input.rank() < 2 {
        return Err(Error::shape(
            "l2_normalize_per_sample",
            "input rank",
            ">= 2 (leading batch axis)",
            input.rank(),
        ));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("l2_normalize_per_sample", "epsilon must be > 0"));
    }
    let b = input.shape()[0];
    let n = input.len() / b;
    let x = input.data();
    let mut out = vec![T::zero(); input.len()];
    for bi in 0..b {
        let row = &x[bi * n..(bi + 1) * n];
        let norm: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let denom = norm.max(epsilon);
        for (o, v) in out[bi * n..(bi + 1) * n].iter_mut().zip(row) {
            *o = T::from_f64(v.as_f64() / denom);
        }
    }
    let mut t = Tensor::new(input.shape().to_vec(), out)?;
    if input.rank() == 4 {
        t = t.reshaped(input.shape().to_vec())?;
    }
    Ok(t)
}

pub(crate) fn l2_normalize_backward<T: Scalar>(
    input: &Tensor<T>,
    epsilon: f64,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let b = input.shape()[0];
    let n = input.len() / b;
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); input.len()];
    for bi in 0..b {
        let xr = &x[bi * n..(bi + 1) * n];
        let gr = &g[bi * n..(bi + 1) * n];
        let norm: f64 = xr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let dst = &mut gx[bi * n..(bi + 1) * n];
        if norm > epsilon {
            let dot: f64 = xr
                .iter()
                .zip(gr)
                .map(|(xv, gv)| xv.as_f64() * gv.as_f64())
                .sum();
            let n3 = norm * norm * norm;
            for i in 0..n {
                dst[i] = T::from_f64(gr[i].as_f64() / norm - xr[i].as_f64() * dot / n3);
            }
        } else {
            // below the guard the map is linear: y = x / eps
            for i in 0..n {
                dst[i] = T::from_f64(gr[i].as_f64() / epsilon);
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gx).expect("grad shape")
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        let x = v.as_f64();
        let y = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        T::from_f64(y)
    })
}

pub(crate) fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let y = output.data();
    let g = grad_out.data();
    let data = y
        .iter()
        .zip(g)
        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("grad shape")
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let x = input.data();
    let g = grad_out.data();
    let data = x
        .iter()
        .zip(g)
        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("grad shape")
}

// ---------------------------------------------------------------------------
// dense / flatten
// ---------------------------------------------------------------------------

/// Affine map: `y[b,m] = sum_n x[b,n] w[n,m] + bias[m]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 2 {
        return Err(Error::shape("dense", "input rank", 2usize, input.rank()));
    }
    let (b, n) = (input.shape()[0], input.shape()[1]);
    if weights.rank() != 2 || weights.shape()[0] != n {
        return Err(Error::shape(
            "dense",
            "weight shape",
            format!("[{n}, M]"),
            format!("{:?}", weights.shape()),
        ));
    }
    let m = weights.shape()[1];
    if bias.shape() != [m] {
        return Err(Error::shape(
            "dense",
            "bias shape",
            format!("[{m}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    let x = input.data();
    let wd = weights.data();
    let mut out = vec![T::zero(); b * m];
    let mut acc = vec![0.0f64; m];
    for bi in 0..b {
        for (a, bv) in acc.iter_mut().zip(bias.data()) {
            *a = bv.as_f64();
        }
        for ni in 0..n {
            let xv = x[bi * n + ni].as_f64();
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[ni * m..(ni + 1) * m];
            for mi in 0..m {
                acc[mi] += xv * wrow[mi].as_f64();
            }
        }
        for mi in 0..m {
            out[bi * m + mi] = T::from_f64(acc[mi]);
        }
    }
    Tensor::new(vec![b, m], out)
}

pub(crate) fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let m = weights.shape()[1];
    let x = input.data();
    let wd = weights.data();
    let go = grad_out.data();
    let mut gx = vec![0.0f64; b * n];
    let mut gw = vec![0.0f64; n * m];
    let mut gb = vec![0.0f64; m];
    for bi in 0..b {
        let grow = &go[bi * m..(bi + 1) * m];
        for mi in 0..m {
            gb[mi] += grow[mi].as_f64();
        }
        for ni in 0..n {
            let wrow = &wd[ni * m..(ni + 1) * m];
            let xv = x[bi * n + ni].as_f64();
            let gwrow = &mut gw[ni * m..(ni + 1) * m];
            let mut acc = 0.0f64;
            for mi in 0..m {
                let g = grow[mi].as_f64();
                acc += g * wrow[mi].as_f64();
                gwrow[mi] += xv * g;
            }
            gx[bi * n + ni] = acc;
        }
    }
    let gx = Tensor::new(vec![b, n], gx.iter().map(|&v| T::from_f64(v)).collect()).expect("gx");
    let gw = Tensor::new(vec![n, m], gw.iter().map(|&v| T::from_f64(v)).collect()).expect("gw");
    let gb = Tensor::new(vec![m], gb.iter().map(|&v| T::from_f64(v)).collect()).expect("gb");
    (gx, gw, gb)
}

/// Collapse (B,C,H,W) to (B, C*H*W). Row-major layout makes this a reshape.
pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4().map_err(|_| {
        Error::shape("flatten", "input rank", "4 (NCHW)", input.rank())
    })?;
    input.reshaped(vec![b, c * h * w])
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax of (B,C) logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", "logits rank", 2usize, logits.rank()));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let x = logits.data();
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        let row = &x[bi * c..(bi + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut z = 0.0f64;
        let mut e = vec![0.0f64; c];
        for (i, v) in row.iter().enumerate() {
            e[i] = (v.as_f64() - max).exp();
            z += e[i];
        }
        for i in 0..c {
            out[bi * c + i] = T::from_f64(e[i] / z);
        }
    }
    Tensor::new(vec![b, c], out)
}

/// Mean sparse categorical cross-entropy. Returns the batch-mean loss and
/// the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            "logits rank",
            2usize,
            logits.rank(),
        ));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("softmax_cross_entropy", "labels length", b, labels.len()));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite { op: "softmax_cross_entropy", what: "logits" });
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c, sample: i });
        }
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); b * c];
    let mut loss = 0.0f64;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &x[bi * c..(bi + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut z = 0.0f64;
        let mut e = vec![0.0f64; c];
        for (i, v) in row.iter().enumerate() {
            e[i] = (v.as_f64() - max).exp();
            z += e[i];
        }
        for i in 0..c {
            probs[bi * c + i] = T::from_f64(e[i] / z);
        }
        // -log p[y] = log Z - (x[y] - max)
        loss += z.ln() - (row[y].as_f64() - max);
    }
    let loss = T::from_f64(loss / b as f64);
    Ok((loss, Tensor::new(vec![b, c], probs)?))
}

/// `d loss / d logits = (probs - onehot(labels)) / B`, scaled by the
/// upstream scalar gradient.
pub(crate) fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / T::from_f64(b as f64);
    let p = probs.data();
    let mut g = vec![T::zero(); b * c];
    for (bi, &y) in labels.iter().enumerate() {
        for i in 0..c {
            let mut v = p[bi * c + i];
            if i == y {
                v -= T::one();
            }
            g[bi * c + i] = v * scale;
        }
    }
    Tensor::new(vec![b, c], g).expect("grad shape")
}

// ---------------------------------------------------------------------------
// elementwise and broadcast ops
// ---------------------------------------------------------------------------

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "operand shapes",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gate a (B,C,H,W) feature map by a (B,1,H,W) map, broadcast over channels:
/// `out[b,c,h,w] = map[b,0,h,w] * feat[b,c,h,w]`.
pub fn gate_channels<T: Scalar>(map: &Tensor<T>, feat: &Tensor<T>) -> Result<Tensor<T>> {
    let (mb, mc, mh, mw) = map.dims4().map_err(|_| {
        Error::shape("gate_channels", "map rank", "4 (NCHW)", map.rank())
    })?;
    let (b, c, h, w) = feat.dims4().map_err(|_| {
        Error::shape("gate_channels", "feature rank", "4 (NCHW)", feat.rank())
    })?;
    if mc != 1 || mb != b || mh != h || mw != w {
        return Err(Error::shape(
            "gate_channels",
            "map shape",
            format!("[{b}, 1, {h}, {w}]"),
            format!("{:?}", map.shape()),
        ));
    }
    let m = map.data();
    let f = feat.data();
    let hw = h * w;
    let mut out = vec![T::zero(); feat.len()];
    for bi in 0..b {
        let mrow = &m[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let src = &f[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for p in 0..hw {
                dst[p] = mrow[p] * src[p];
            }
        }
    }
    Tensor::nchw(b, c, h, w, out)
}

pub(crate) fn gate_channels_backward<T: Scalar>(
    map: &Tensor<T>,
    feat: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = feat.dims4().expect("rank 4");
    let hw = h * w;
    let m = map.data();
    let f = feat.data();
    let go = grad_out.data();
    let mut gm = vec![T::zero(); map.len()];
    let mut gf = vec![T::zero(); feat.len()];
    for bi in 0..b {
        let mrow = &m[bi * hw..(bi + 1) * hw];
        let gmrow = &mut gm[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let o = (bi * c + ci) * hw;
            for p in 0..hw {
                gmrow[p] += go[o + p] * f[o + p];
                gf[o + p] = go[o + p] * mrow[p];
            }
        }
    }
    (
        Tensor::nchw(b, 1, h, w, gm).expect("gm"),
        Tensor::nchw(b, c, h, w, gf).expect("gf"),
    )
}

/// Stack two feature maps along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ab, ac, ah, aw) = a.dims4().map_err(|_| {
        Error::shape("concat_channels", "lhs rank", "4 (NCHW)", a.rank())
    })?;
    let (bb, bc, bh, bw) = b.dims4().map_err(|_| {
        Error::shape("concat_channels", "rhs rank", "4 (NCHW)", b.rank())
    })?;
    if ab != bb || ah != bh || aw != bw {
        return Err(Error::shape(
            "concat_channels",
            "batch/spatial dims",
            format!("[{ab}, _, {ah}, {aw}]"),
            format!("{:?}", b.shape()),
        ));
    }
    let hw = ah * aw;
    let mut out = vec![T::zero(); (ac + bc) * ab * hw];
    for bi in 0..ab {
        let dst_base = bi * (ac + bc) * hw;
        out[dst_base..dst_base + ac * hw]
            .copy_from_slice(&a.data()[bi * ac * hw..(bi + 1) * ac * hw]);
        out[dst_base + ac * hw..dst_base + (ac + bc) * hw]
            .copy_from_slice(&b.data()[bi * bc * hw..(bi + 1) * bc * hw]);
    }
    Tensor::nchw(ab, ac + bc, ah, aw, out)
}

pub(crate) fn concat_channels_backward<T: Scalar>(
    c_lhs: usize,
    c_rhs: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, _, h, w) = grad_out.dims4().expect("rank 4");
    let hw = h * w;
    let go = grad_out.data();
    let mut ga = vec![T::zero(); b * c_lhs * hw];
    let mut gb = vec![T::zero(); b * c_rhs * hw];
    for bi in 0..b {
        let src = bi * (c_lhs + c_rhs) * hw;
        ga[bi * c_lhs * hw..(bi + 1) * c_lhs * hw]
            .copy_from_slice(&go[src..src + c_lhs * hw]);
        gb[bi * c_rhs * hw..(bi + 1) * c_rhs * hw]
            .copy_from_slice(&go[src + c_lhs * hw..src + (c_lhs + c_rhs) * hw]);
    }
    (
        Tensor::nchw(b, c_lhs, h, w, ga).expect("ga"),
        Tensor::nchw(b, c_rhs, h, w, gb).expect("gb"),
    )
}
