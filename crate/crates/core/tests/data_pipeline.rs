//! End-to-end checks of image decoding, resizing, and the synthetic corpus.
//!
//! The resize oracle below interpolates each output pixel directly from the
//! four-tap formula, with no shared code with the library implementation.

use std::fs;

use l2sa_core::data::{
    self, load_directory, load_directory_expecting, resize_bilinear, synth_dataset, GrayImage,
    Split, SPLIT_FRACTIONS,
};
use l2sa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_resize(img: &GrayImage, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let sy = (oy as f64 + 0.5) * img.h as f64 / out_h as f64 - 0.5;
            let sx = (ox as f64 + 0.5) * img.w as f64 / out_w as f64 - 0.5;
            let y0 = sy.floor().max(0.0).min((img.h - 1) as f64) as usize;
            let x0 = sx.floor().max(0.0).min((img.w - 1) as f64) as usize;
            let y1 = (y0 + 1).min(img.h - 1);
            let x1 = (x0 + 1).min(img.w - 1);
            let wy = (sy - y0 as f64).clamp(0.0, 1.0);
            let wx = (sx - x0 as f64).clamp(0.0, 1.0);
            let at = |y: usize, x: usize| img.pixels[y * img.w + x];
            out[oy * out_w + ox] = at(y0, x0) * (1.0 - wy) * (1.0 - wx)
                + at(y0, x1) * (1.0 - wy) * wx
                + at(y1, x0) * wy * (1.0 - wx)
                + at(y1, x1) * wy * wx;
        }
    }
    out
}

#[test]
fn resize_matches_direct_interpolation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for &(h, w, oh, ow) in &[
        (4usize, 4usize, 256usize, 256usize),
        (512, 512, 256, 256),
        (300, 200, 256, 256),
        (17, 31, 64, 64),
        (64, 64, 17, 31),
    ] {
        let pixels: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = GrayImage::new(h, w, pixels).unwrap();
        let got = resize_bilinear(&img, oh, ow);
        let want = oracle_resize(&img, oh, ow);
        let worst = got
            .pixels
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-6, "{h}x{w} -> {oh}x{ow}: worst abs err {worst}");
    }
}

#[test]
fn checkerboard_upscale_matches_oracle_and_stays_in_range() {
    let pixels: Vec<f64> = (0..16)
        .map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    let img = GrayImage::new(4, 4, pixels).unwrap();
    let got = resize_bilinear(&img, 256, 256);
    let want = oracle_resize(&img, 256, 256);
    for (a, b) in got.pixels.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9);
        assert!((0.0..=1.0).contains(a));
    }
}

#[test]
fn directory_loading_orders_classes_alphabetically() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["meningioma", "glioma", "pituitary"] {
        fs::create_dir(dir.path().join(class)).unwrap();
    }
    // two tiny distinct images per class, written out of order
    for (class, names) in [
        ("pituitary", ["b.png", "a.png"]),
        ("glioma", ["x.png", "m.png"]),
        ("meningioma", ["2.png", "1.png"]),
    ] {
        for (i, name) in names.iter().enumerate() {
            let img = image::GrayImage::from_pixel(6, 6, image::Luma([40 * (i as u8 + 1)]));
            img.save(dir.path().join(class).join(name)).unwrap();
        }
    }
    let ds = load_directory(dir.path()).unwrap();
    assert_eq!(ds.class_names, vec!["glioma", "meningioma", "pituitary"]);
    assert_eq!(ds.len(), 6);
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(
        ids,
        vec![
            "glioma/m.png",
            "glioma/x.png",
            "meningioma/1.png",
            "meningioma/2.png",
            "pituitary/a.png",
            "pituitary/b.png"
        ]
    );
    assert_eq!(ds.samples[0].label, 0);
    assert_eq!(ds.samples[2].label, 1);
    assert_eq!(ds.samples[4].label, 2);
}

#[test]
fn decoded_gray_values_divide_by_255() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("only")).unwrap();
    let img = image::GrayImage::from_pixel(5, 4, image::Luma([128]));
    img.save(dir.path().join("only/flat.png")).unwrap();
    let ds = load_directory(dir.path()).unwrap();
    let gray = ds.decode(0).unwrap();
    assert_eq!((gray.h, gray.w), (4, 5));
    assert!(gray.pixels.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
}

#[test]
fn rgb_decoding_uses_rec601_luminance() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("only")).unwrap();
    let img = image::RgbImage::from_pixel(3, 3, image::Rgb([200, 60, 10]));
    img.save(dir.path().join("only/color.png")).unwrap();
    let ds = load_directory(dir.path()).unwrap();
    let gray = ds.decode(0).unwrap();
    let want = (0.299 * 200.0 + 0.587 * 60.0 + 0.114 * 10.0) / 255.0;
    assert!(gray.pixels.iter().all(|&v| (v - want).abs() < 1e-12));
}

#[test]
fn unreadable_image_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("only")).unwrap();
    fs::write(dir.path().join("only/broken.png"), b"not a png").unwrap();
    let ds = load_directory(dir.path()).unwrap();
    let err = ds.decode(0).unwrap_err().to_string();
    assert!(err.contains("broken.png"), "{err}");
}

#[test]
fn empty_class_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("full")).unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    image::GrayImage::from_pixel(2, 2, image::Luma([9]))
        .save(dir.path().join("full/a.png"))
        .unwrap();
    let err = load_directory(dir.path()).unwrap_err().to_string();
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn missing_expected_class_lists_the_names() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("glioma")).unwrap();
    image::GrayImage::from_pixel(2, 2, image::Luma([9]))
        .save(dir.path().join("glioma/a.png"))
        .unwrap();
    let err = load_directory_expecting(dir.path(), &["glioma", "meningioma", "pituitary"])
        .unwrap_err()
        .to_string();
    assert!(err.contains("meningioma") && err.contains("pituitary"), "{err}");
}

#[test]
fn synthetic_classes_separate_under_nearest_neighbor() {
    let mut ds = synth_dataset(3, 20, 11).unwrap();
    data::split(&mut ds, SPLIT_FRACTIONS, 11).unwrap();
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Test);
    assert!(!test.is_empty());

    let record = |i: usize| -> Vec<f64> {
        let t: Tensor<f64> = ds.record(i).unwrap();
        t.data().to_vec()
    };
    let train_recs: Vec<(Vec<f64>, usize)> =
        train.iter().map(|&i| (record(i), ds.samples[i].label)).collect();

    let mut correct = 0;
    for &i in &test {
        let probe = record(i);
        let mut dists: Vec<(f64, usize)> = train_recs
            .iter()
            .map(|(r, label)| {
                let d: f64 = r.iter().zip(&probe).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, *label)
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut votes = [0usize; 3];
        for &(_, label) in dists.iter().take(3) {
            votes[label] += 1;
        }
        let guess = votes
            .iter()
            .enumerate()
            .max_by_key(|&(_, v)| *v)
            .map(|(i, _)| i)
            .unwrap();
        if guess == ds.samples[i].label {
            correct += 1;
        }
    }
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "3-NN accuracy {acc} on held-out synthetic split");
}
