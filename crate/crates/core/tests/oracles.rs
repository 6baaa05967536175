//! Randomized cross-checks of the numeric kernels against the brute-force
//! references in `common`. Shapes are drawn small enough that the naive
//! implementations stay fast; seeds are fixed so failures reproduce.

mod common;

use common::*;
use l2sa_core::ops::{self, ReduceMode};
use l2sa_core::tensor::{ConvSpec, PadMode, Tensor};
use rand::Rng;

const TOL: f64 = 1e-6;

#[test]
fn conv2d_matches_bruteforce_on_random_shapes() {
    let mut rng = rng(0x5eed_c0_01);
    for case in 0..50 {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let oc = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=9);
        let w = rng.gen_range(1..=9);
        let stride = rng.gen_range(1..=2);
        let padding = if rng.gen_bool(0.5) { PadMode::Same } else { PadMode::Valid };
        let max_k = match padding {
            PadMode::Valid => h.min(w),
            PadMode::Same => 6,
        };
        let kernel = rng.gen_range(1..=max_k.min(6));

        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        let wt = rand_tensor(&mut rng, &[oc, c, kernel, kernel]);
        let bias = rand_tensor(&mut rng, &[oc]);
        let spec = ConvSpec { in_channels: c, out_channels: oc, kernel, stride, padding };

        let got = ops::conv2d(&x, &wt, &bias, &spec).unwrap();
        let want = conv2d_bruteforce(&x, &wt, &bias, kernel, stride, padding);
        let err = max_rel_err(&got, &want);
        assert!(
            err < TOL,
            "conv case {case}: rel err {err:.3e} for b={b} c={c} oc={oc} {h}x{w} k={kernel} s={stride} {padding:?}"
        );
    }
}

#[test]
fn maxpool2d_matches_bruteforce_on_random_shapes() {
    let mut rng = rng(0x5eed_c0_02);
    for case in 0..50 {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(2..=9);
        let w = rng.gen_range(2..=9);
        let wh = rng.gen_range(1..=h.min(4));
        let ww = rng.gen_range(1..=w.min(4));
        let sh = rng.gen_range(1..=3);
        let sw = rng.gen_range(1..=3);

        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        let got = ops::maxpool2d(&x, (wh, ww), (sh, sw)).unwrap();
        let want = maxpool2d_bruteforce(&x, (wh, ww), (sh, sw));
        let err = max_rel_err(&got, &want);
        assert!(err < TOL, "maxpool case {case}: rel err {err:.3e}");
    }
}

#[test]
fn avgpool2d_matches_bruteforce_on_random_shapes() {
    let mut rng = rng(0x5eed_c0_03);
    for case in 0..50 {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let factor = rng.gen_range(1..=4);
        let h = factor * rng.gen_range(1..=3);
        let w = factor * rng.gen_range(1..=3);

        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        let got = ops::avgpool2d(&x, factor).unwrap();
        let want = avgpool2d_bruteforce(&x, factor);
        let err = max_rel_err(&got, &want);
        assert!(err < TOL, "avgpool case {case}: rel err {err:.3e}");
    }
}

#[test]
fn channel_reduce_matches_bruteforce_on_random_shapes() {
    let mut rng = rng(0x5eed_c0_04);
    for case in 0..50 {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=9);
        let w = rng.gen_range(1..=9);
        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        for (mode, oracle_mode) in [
            (ReduceMode::Max, Reduce::Max),
            (ReduceMode::Min, Reduce::Min),
            (ReduceMode::Mean, Reduce::Mean),
        ] {
            let got = ops::channel_reduce(&x, mode).unwrap();
            let want = channel_reduce_bruteforce(&x, oracle_mode);
            let err = max_rel_err(&got, &want);
            assert!(err < TOL, "reduce case {case} {mode:?}: rel err {err:.3e}");
        }
    }
}

#[test]
fn dense_matches_bruteforce_on_random_shapes() {
    let mut rng = rng(0x5eed_c0_05);
    for case in 0..50 {
        let b = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=16);
        let m = rng.gen_range(1..=16);
        let x = rand_tensor(&mut rng, &[b, n]);
        let w = rand_tensor(&mut rng, &[n, m]);
        let bias = rand_tensor(&mut rng, &[m]);
        let got = ops::dense(&x, &w, &bias).unwrap();
        let want = dense_bruteforce(&x, &w, &bias);
        let err = max_rel_err(&got, &want);
        assert!(err < TOL, "dense case {case}: rel err {err:.3e}");
    }
}

#[test]
fn l2_normalize_output_has_unit_norm_per_sample() {
    let mut rng = rng(0x5eed_c0_06);
    for _ in 0..20 {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(1..=6);
        let w = rng.gen_range(1..=6);
        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        let y = ops::l2_normalize_per_sample(&x, 1e-12).unwrap();
        let n = c * h * w;
        for bi in 0..b {
            let norm: f64 = y.data()[bi * n..(bi + 1) * n]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "sample {bi}: norm {norm}");
        }
    }
}

#[test]
fn softmax_cross_entropy_matches_direct_log_form() {
    // direct form: loss_b = -ln(exp(x_y) / sum exp(x_i)), computed without
    // max subtraction on logits small enough not to overflow
    let mut rng = rng(0x5eed_c0_07);
    for _ in 0..30 {
        let b = rng.gen_range(1..=4);
        let c = rng.gen_range(2..=5);
        let x = rand_tensor(&mut rng, &[b, c]);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let (loss, _) = ops::softmax_cross_entropy(&x, &labels).unwrap();
        let mut want = 0.0f64;
        for (bi, &y) in labels.iter().enumerate() {
            let row = &x.data()[bi * c..(bi + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / z).ln();
        }
        want /= b as f64;
        assert!(rel_err(loss, want) < 1e-9);
    }
}

#[test]
fn conv2d_same_padding_even_kernel_pads_extra_bottom_right() {
    // 1x4 input, kernel 2, stride 1, same padding: out width 4 and the pad
    // lands entirely on the right, so the last output sees one real sample.
    let x = Tensor::nchw(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let bias = Tensor::new(vec![1], vec![0.0]).unwrap();
    let spec = ConvSpec::same(1, 1, 2);
    let got = ops::conv2d(&x, &w, &bias, &spec).unwrap();
    let want = conv2d_bruteforce(&x, &w, &bias, 2, 1, PadMode::Same);
    assert_eq!(got.shape(), &[1, 1, 1, 4]);
    assert_eq!(got.data(), want.data());
    // bottom row of the kernel reads rows below the input, all padding
    assert!(got.data().iter().all(|&v| v == 0.0));
}
