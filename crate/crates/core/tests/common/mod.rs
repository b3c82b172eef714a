//! Shared synthetic data for the integration suites: deterministic blob
//! images for classification and smooth colourful images for
//! reconstruction.

use chromacaps_core::colorspace::{rgb_to_lab, split_luminance, RgbImage};
use chromacaps_core::training::{LabeledSample, TrainSample};

/// Simple HSV-style hue to RGB on the unit circle.
pub fn hue_rgb(hue: f64) -> [f64; 3] {
    let h = (hue.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h.rem_euclid(2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b]
}

/// A gray background with one saturated Gaussian blob whose position and
/// hue identify the class; the variant jitters the position.
pub fn blob_image(class: usize, classes: usize, variant: usize, size: usize) -> RgbImage {
    let angle = class as f64 / classes as f64 * std::f64::consts::TAU;
    let jitter = (variant as f64 * 0.7).sin() * 0.08;
    let cx = size as f64 * (0.5 + (0.28 + jitter) * angle.cos());
    let cy = size as f64 * (0.5 + (0.28 + jitter) * angle.sin());
    let radius = size as f64 * 0.18;
    let color = hue_rgb(class as f64 / classes as f64);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (radius * radius);
            let m = (-d2).exp();
            let px = [
                0.5 * (1.0 - m) + color[0] * m,
                0.5 * (1.0 - m) + color[1] * m,
                0.5 * (1.0 - m) + color[2] * m,
            ];
            pixels.push(px);
        }
    }
    RgbImage::new(size, size, pixels).unwrap()
}

/// Smooth, saturated image built from phase-shifted sinusoids; easy for a
/// low-resolution chroma head to represent.
pub fn smooth_color_image(seed: u64, size: usize) -> RgbImage {
    let p1 = (seed as f64 * 0.61).sin() * 3.0;
    let p2 = (seed as f64 * 1.37).cos() * 3.0;
    let p3 = (seed as f64 * 2.11).sin() * 3.0;
    let f = std::f64::consts::TAU / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = 0.5 + 0.38 * (f * x as f64 + p1).sin();
            let g = 0.5 + 0.38 * (f * y as f64 + p2).sin();
            let b = 0.5 + 0.38 * (f * (x + y) as f64 * 0.5 + p3).sin();
            pixels.push([r, g, b]);
        }
    }
    RgbImage::new(size, size, pixels).unwrap()
}

pub fn to_sample(img: &RgbImage) -> TrainSample {
    let lab = rgb_to_lab(img);
    let (l, ab) = split_luminance(&lab);
    TrainSample { l, ab }
}

pub fn labeled_blob_set(classes: usize, per_class: usize, size: usize) -> Vec<LabeledSample> {
    let mut out = Vec::new();
    for class in 0..classes {
        for variant in 0..per_class {
            let img = blob_image(class, classes, variant, size);
            let lab = rgb_to_lab(&img);
            let (l, _) = split_luminance(&lab);
            out.push(LabeledSample { l, label: class });
        }
    }
    out
}

pub fn smooth_sample_set(count: usize, size: usize) -> Vec<TrainSample> {
    (0..count)
        .map(|i| to_sample(&smooth_color_image(i as u64 + 1, size)))
        .collect()
}
