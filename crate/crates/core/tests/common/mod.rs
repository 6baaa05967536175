//! Brute-force reference implementations used to cross-check the numeric
//! kernels. Everything here is written as a direct transcription of the
//! defining formulas (nested loops, no im2col, no shared code with the
//! library kernels) so agreement is meaningful.

#![allow(dead_code)]

use l2sa_core::tensor::{PadMode, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max)
}

fn pad_for(n: usize, k: usize, stride: usize, padding: PadMode) -> (usize, usize) {
    match padding {
        PadMode::Valid => ((n - k) / stride + 1, 0),
        PadMode::Same => {
            let out = (n + stride - 1) / stride;
            let total = ((out - 1) * stride + k).saturating_sub(n);
            (out, total / 2)
        }
    }
}

/// Seven-loop convolution straight from the definition:
/// `y[b,oc,oy,ox] = bias[oc] + sum_{ic,ky,kx} x[b,ic,oy*s+ky-p, ox*s+kx-p] * w[oc,ic,ky,kx]`.
pub fn conv2d_bruteforce(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &Tensor<f64>,
    kernel: usize,
    stride: usize,
    padding: PadMode,
) -> Tensor<f64> {
    let (b, c, h, wd) = x.dims4().unwrap();
    let oc_n = w.shape()[0];
    let (oh, pad_h) = pad_for(h, kernel, stride, padding);
    let (ow, pad_w) = pad_for(wd, kernel, stride, padding);
    let xd = x.data();
    let wdat = w.data();
    let bd = bias.data();
    let mut out = vec![0.0f64; b * oc_n * oh * ow];
    for bi in 0..b {
        for oc in 0..oc_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad_h as isize;
                                let ix = (ox * stride + kx) as isize - pad_w as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((oc * c + ic) * kernel + ky) * kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * oc_n + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::nchw(b, oc_n, oh, ow, out).unwrap()
}

/// Window-scan max pooling with floor semantics.
pub fn maxpool2d_bruteforce(
    x: &Tensor<f64>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let xd = x.data();
    let mut out = vec![0.0f64; b * c * oh * ow];
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..window.0 {
                    for kx in 0..window.1 {
                        let v = xd[bc * h * w + (oy * stride.0 + ky) * w + ox * stride.1 + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[bc * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    Tensor::nchw(b, c, oh, ow, out).unwrap()
}

/// Mean over non-overlapping `factor x factor` windows.
pub fn avgpool2d_bruteforce(x: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let oh = h / factor;
    let ow = w / factor;
    let xd = x.data();
    let mut out = vec![0.0f64; b * c * oh * ow];
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..factor {
                    for kx in 0..factor {
                        acc += xd[bc * h * w + (oy * factor + ky) * w + ox * factor + kx];
                    }
                }
                out[bc * oh * ow + oy * ow + ox] = acc / (factor * factor) as f64;
            }
        }
    }
    Tensor::nchw(b, c, oh, ow, out).unwrap()
}

pub enum Reduce {
    Max,
    Min,
    Mean,
}

/// Per-pixel reduction over the channel axis.
pub fn channel_reduce_bruteforce(x: &Tensor<f64>, mode: Reduce) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let xd = x.data();
    let mut out = vec![0.0f64; b * h * w];
    for bi in 0..b {
        for p in 0..h * w {
            let vals = (0..c).map(|ic| xd[(bi * c + ic) * h * w + p]);
            out[bi * h * w + p] = match mode {
                Reduce::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                Reduce::Min => vals.fold(f64::INFINITY, f64::min),
                Reduce::Mean => vals.sum::<f64>() / c as f64,
            };
        }
    }
    Tensor::nchw(b, 1, h, w, out).unwrap()
}

/// Two-loop dense layer from the definition.
pub fn dense_bruteforce(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut out = vec![0.0f64; b * m];
    for bi in 0..b {
        for mi in 0..m {
            let mut acc = bias.data()[mi];
            for ni in 0..n {
                acc += x.data()[bi * n + ni] * w.data()[ni * m + mi];
            }
            out[bi * m + mi] = acc;
        }
    }
    Tensor::new(vec![b, m], out).unwrap()
}
