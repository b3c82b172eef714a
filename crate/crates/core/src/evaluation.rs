//! Quantitative evaluation of reconstructed colourisations: PSNR and SSIM
//! against ground truth, plus report emission.

use thiserror::Error;

use crate::colorspace::{
    compose_with_luminance, lab_to_rgb, recombine, rgb_to_lab, split_luminance, AbPlanes, RgbImage,
};
use crate::network::{full_forward, ModelState, NetworkConfig};
use crate::tensor::Tensor;

/// PSNR reported for identical images (the error is zero, the ratio is
/// unbounded).
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image dimensions disagree: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} smaller than the {2}-pixel window")]
    TooSmall(usize, usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image size {0} does not match the network input {1}")]
    WrongSize(usize, usize),
}

/// Peak signal-to-noise ratio over all channels with peak 1.0, capped for
/// identical images.
pub fn psnr(x: &RgbImage, y: &RgbImage) -> Result<f64, EvalError> {
    if x.width() != y.width() || x.height() != y.height() {
        return Err(EvalError::DimensionMismatch(
            x.width(),
            x.height(),
            y.width(),
            y.height(),
        ));
    }
    let mut mse = 0.0;
    for (px, py) in x.pixels().iter().zip(y.pixels()) {
        for c in 0..3 {
            let d = px[c] - py[c];
            mse += d * d;
        }
    }
    mse /= (x.pixels().len() * 3) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Windowed structural similarity with an 11x11 Gaussian window, averaged
/// over valid window positions and the three channels.
pub fn ssim(x: &RgbImage, y: &RgbImage) -> Result<f64, EvalError> {
    if x.width() != y.width() || x.height() != y.height() {
        return Err(EvalError::DimensionMismatch(
            x.width(),
            x.height(),
            y.width(),
            y.height(),
        ));
    }
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall(w, h, SSIM_WINDOW));
    }
    let window = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for channel in 0..3 {
        for cy in half..h - half {
            for cx in half..w - half {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                let mut wi = 0usize;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let px = x.pixel(cx + dx - half, cy + dy - half)[channel];
                        let py = y.pixel(cx + dx - half, cy + dy - half)[channel];
                        let wt = window[wi];
                        wi += 1;
                        mx += wt * px;
                        my += wt * py;
                        mxx += wt * px * px;
                        myy += wt * py * py;
                        mxy += wt * px * py;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-image metric rows plus dataset aggregates. The schema reserves an
/// optional third metric column for a pluggable feature distance.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub model_id: String,
    pub config_id: String,
    pub rows: Vec<MetricRow>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub feat_mean: Option<f64>,
    pub feat_std: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub feat: Option<f64>,
}

impl MetricReport {
    fn from_rows(model_id: String, config_id: String, rows: Vec<MetricRow>) -> Self {
        let n = rows.len() as f64;
        let psnr_mean = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ssim_mean = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let psnr_std = (rows
            .iter()
            .map(|r| (r.psnr - psnr_mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let ssim_std = (rows
            .iter()
            .map(|r| (r.ssim - ssim_mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let (feat_mean, feat_std) = if rows.iter().all(|r| r.feat.is_some()) {
            let fm = rows.iter().map(|r| r.feat.unwrap()).sum::<f64>() / n;
            let fs = (rows
                .iter()
                .map(|r| (r.feat.unwrap() - fm).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            (Some(fm), Some(fs))
        } else {
            (None, None)
        };
        MetricReport {
            model_id,
            config_id,
            rows,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            feat_mean,
            feat_std,
        }
    }

    /// `image,psnr,ssim` rows (plus the optional `featdist` column)
    /// followed by `mean` and `std` aggregate rows.
    pub fn to_csv(&self) -> String {
        let with_feat = self.feat_mean.is_some();
        let mut out = format!("# model={} config={}\n", self.model_id, self.config_id);
        out.push_str(if with_feat {
            "image,psnr,ssim,featdist\n"
        } else {
            "image,psnr,ssim\n"
        });
        for row in &self.rows {
            if with_feat {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    row.image,
                    row.psnr,
                    row.ssim,
                    row.feat.unwrap()
                ));
            } else {
                out.push_str(&format!("{},{},{}\n", row.image, row.psnr, row.ssim));
            }
        }
        match (self.feat_mean, self.feat_std) {
            (Some(fm), Some(fs)) => {
                out.push_str(&format!(
                    "mean,{},{},{}\n",
                    self.psnr_mean, self.ssim_mean, fm
                ));
                out.push_str(&format!("std,{},{},{}\n", self.psnr_std, self.ssim_std, fs));
            }
            _ => {
                out.push_str(&format!("mean,{},{}\n", self.psnr_mean, self.ssim_mean));
                out.push_str(&format!("std,{},{}\n", self.psnr_std, self.ssim_std));
            }
        }
        out
    }
}

/// Mean squared distance between fixed random dilated-conv features of two
/// images; an internal diagnostic standing in for a learned perceptual
/// metric.
pub fn feature_distance(
    a: &RgbImage,
    b: &RgbImage,
    extractor: &crate::training::PerceptualExtractor,
) -> Result<f64, EvalError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(EvalError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let to_tensor = |img: &RgbImage| {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = p[c];
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    };
    let mut g = crate::graph::Graph::new();
    let av = g.leaf(to_tensor(a));
    let loss = crate::training::loss_perceptual(&mut g, av, to_tensor(b), extractor);
    Ok(g.value(loss).item())
}

/// Colorizes every luminance plane with the model, recombines with the
/// input L, and scores the composite against the ground-truth colour image.
pub fn evaluate_dataset(
    state: &ModelState,
    cfg: &NetworkConfig,
    images: &[(String, RgbImage)],
    model_id: &str,
) -> Result<MetricReport, EvalError> {
    evaluate_dataset_featured(state, cfg, images, model_id, None)
}

/// As `evaluate_dataset`, optionally filling the reserved feature-distance
/// column with the given extractor.
pub fn evaluate_dataset_featured(
    state: &ModelState,
    cfg: &NetworkConfig,
    images: &[(String, RgbImage)],
    model_id: &str,
    features: Option<&crate::training::PerceptualExtractor>,
) -> Result<MetricReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(images.len());
    for (name, truth) in images {
        let composite = colorize_image(state, cfg, truth)?;
        let feat = match features {
            Some(e) => Some(feature_distance(&composite, truth, e)?),
            None => None,
        };
        rows.push(MetricRow {
            image: name.clone(),
            psnr: psnr(&composite, truth)?,
            ssim: ssim(&composite, truth)?,
            feat,
        });
    }
    Ok(MetricReport::from_rows(
        model_id.to_string(),
        format!("input{}_q{}", cfg.input_size, cfg.bins),
        rows,
    ))
}

/// Full pipeline for one image: extract L, predict chroma, compose with
/// the source's own luminance floats (L is copied bit-exactly), and render
/// to RGB.
pub fn colorize_image(
    state: &ModelState,
    cfg: &NetworkConfig,
    source: &RgbImage,
) -> Result<RgbImage, EvalError> {
    if source.width() != cfg.input_size || source.height() != cfg.input_size {
        return Err(EvalError::WrongSize(source.width(), cfg.input_size));
    }
    let lab = rgb_to_lab(source);
    let (l, _) = split_luminance(&lab);
    let (ab, _) = full_forward(state, cfg, &l);
    let composite = compose_with_luminance(&lab, &ab).expect("network preserves spatial dims");
    Ok(lab_to_rgb(&composite))
}

/// Grayscale reconstruction baseline: zero chroma under the input L.
pub fn zero_chroma_scores(truth: &RgbImage) -> Result<(f64, f64), EvalError> {
    let lab = rgb_to_lab(truth);
    let (l, _) = split_luminance(&lab);
    let (h, w) = (truth.height(), truth.width());
    let zeros = AbPlanes {
        a: Tensor::zeros(&[h, w]),
        b: Tensor::zeros(&[h, w]),
    };
    let gray = lab_to_rgb(&recombine(&l, &zeros).expect("plane dims agree"));
    Ok((psnr(&gray, truth)?, ssim(&gray, truth)?))
}
