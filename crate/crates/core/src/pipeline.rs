//! Run configuration, dataset ingestion, the luminance archive tool and
//! checkpoint persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::colorspace::{
    l_to_u8, rgb_to_lab, split_luminance, u8_to_l, GamutGrid, LabImage, RgbImage,
};
use crate::network::{AblationFlags, ModelState, NetworkConfig, NetworkPlan, Phase, ScalePreset};
use crate::tensor::Tensor;
use crate::training::{AdamConfig, LossWeights, TrainOptions, TrainSample};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UWPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("config error: unknown key '{0}'")]
    UnknownKey(String),
    #[error("config error: bad value '{value}' for key '{key}'")]
    BadValue { key: String, value: String },
    #[error("dataset root {0} is empty or unreadable")]
    EmptyDataset(PathBuf),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {0} is not supported")]
    VersionMismatch(u32),
    #[error("checkpoint was written for an incompatible configuration (digest {found:#x}, expected {expected:#x})")]
    DigestMismatch { expected: u64, found: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

/// Everything a run needs beyond the dataset paths. Defaults follow the
/// scale preset; a flat `key=value` file (with `#` comments) and command
/// line flags override individual fields.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub scale: ScalePreset,
    pub seed: u64,
    pub rho: usize,
    pub epochs_class: usize,
    pub epochs_end2end: usize,
    pub epochs_gan: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_rebalance: f64,
    pub soft_k: usize,
    pub soft_sigma: f64,
    pub bin_size: f64,
    pub classes: usize,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub gan_keep_e2e: bool,
    pub grad_clip: Option<f64>,
    pub heterogeneous_conv: bool,
}

impl RunConfig {
    /// Desk preset: every mechanism runs in minutes on a laptop.
    pub fn desk() -> Self {
        RunConfig {
            scale: ScalePreset::Desk,
            seed: 0,
            rho: 2,
            epochs_class: 4,
            epochs_end2end: 16,
            epochs_gan: 20,
            batch_size: 4,
            lr: 2e-3,
            lambda_rebalance: crate::colorspace::REBALANCE_LAMBDA,
            soft_k: crate::colorspace::SOFT_ENCODE_K,
            soft_sigma: crate::colorspace::SOFT_ENCODE_SIGMA,
            bin_size: 10.0,
            classes: 7,
            flags: AblationFlags::default(),
            weights: LossWeights::default(),
            gan_keep_e2e: false,
            grad_clip: Some(10.0),
            heterogeneous_conv: false,
        }
    }

    /// Full-scale preset with the published epoch counts.
    pub fn reference() -> Self {
        RunConfig {
            scale: ScalePreset::Reference,
            rho: 30,
            epochs_class: 20,
            epochs_end2end: 240,
            epochs_gan: 1000,
            batch_size: 16,
            ..Self::desk()
        }
    }

    pub fn for_scale(scale: ScalePreset) -> Self {
        match scale {
            ScalePreset::Desk => Self::desk(),
            ScalePreset::Reference => Self::reference(),
        }
    }

    /// Parses a flat key=value file. The scale key is honoured first so the
    /// remaining keys override that preset's defaults, whatever their order
    /// in the file. Unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self, PipelineError> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::BadValue {
                    key: line.to_string(),
                    value: "(missing '=')".to_string(),
                })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "scale") {
            Self::for_scale(parse_scale(v)?)
        } else {
            Self::desk()
        };
        for (key, value) in &pairs {
            cfg.apply_kv(key, value)?;
        }
        Ok(cfg)
    }

    /// Applies one override; used by both the config file and CLI flags.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let bad = || PipelineError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "scale" => self.scale = parse_scale(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "rho" => self.rho = positive(value).ok_or_else(bad)?,
            "epochs_class" => self.epochs_class = value.parse().map_err(|_| bad())?,
            "epochs_end2end" => self.epochs_end2end = value.parse().map_err(|_| bad())?,
            "epochs_gan" => self.epochs_gan = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = positive(value).ok_or_else(bad)?,
            "lr" => self.lr = parse_pos_f64(value).ok_or_else(bad)?,
            "lambda" => {
                let v: f64 = value.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad());
                }
                self.lambda_rebalance = v;
            }
            "soft_k" => self.soft_k = positive(value).ok_or_else(bad)?,
            "soft_sigma" => self.soft_sigma = parse_pos_f64(value).ok_or_else(bad)?,
            "bin_size" => self.bin_size = parse_pos_f64(value).ok_or_else(bad)?,
            "classes" => self.classes = positive(value).ok_or_else(bad)?,
            "use_capsules" => self.flags.use_capsules = parse_bool(value).ok_or_else(bad)?,
            "use_classifier" => self.flags.use_classifier = parse_bool(value).ok_or_else(bad)?,
            "use_progl" => self.flags.use_progl = parse_bool(value).ok_or_else(bad)?,
            "use_gan" => self.flags.use_gan = parse_bool(value).ok_or_else(bad)?,
            "w_quant" => self.weights.quant = parse_pos_f64(value).ok_or_else(bad)?,
            "w_chroma" => self.weights.chroma = parse_pos_f64(value).ok_or_else(bad)?,
            "w_adv" => self.weights.adv = parse_pos_f64(value).ok_or_else(bad)?,
            "w_perc" => self.weights.perc = parse_pos_f64(value).ok_or_else(bad)?,
            "gan_keep_e2e" => self.gan_keep_e2e = parse_bool(value).ok_or_else(bad)?,
            "grad_clip" => {
                self.grad_clip = if value == "none" {
                    None
                } else {
                    Some(parse_pos_f64(value).ok_or_else(bad)?)
                }
            }
            "heterogeneous_conv" => self.heterogeneous_conv = parse_bool(value).ok_or_else(bad)?,
            _ => return Err(PipelineError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The network architecture for this run; `bins` comes from the built
    /// gamut grid.
    pub fn network(&self, bins: usize) -> NetworkConfig {
        let mut cfg = NetworkConfig::preset(self.scale, bins, self.classes);
        cfg.flags = self.flags;
        cfg.heterogeneous_conv = self.heterogeneous_conv;
        cfg
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            seed: self.seed,
            weights: self.weights,
            gan_grad_clip: self.grad_clip,
            gan_keep_e2e: self.gan_keep_e2e,
            soft_k: self.soft_k,
            soft_sigma: self.soft_sigma,
        }
    }
}

fn parse_scale(v: &str) -> Result<ScalePreset, PipelineError> {
    match v {
        "desk" => Ok(ScalePreset::Desk),
        "reference" => Ok(ScalePreset::Reference),
        _ => Err(PipelineError::BadValue {
            key: "scale".to_string(),
            value: v.to_string(),
        }),
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn positive(v: &str) -> Option<usize> {
    v.parse::<usize>().ok().filter(|n| *n > 0)
}

fn parse_pos_f64(v: &str) -> Option<f64> {
    v.parse::<f64>().ok().filter(|x| *x > 0.0 && x.is_finite())
}

// ---------------------------------------------------------------------------
// dataset ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetLayout {
    /// flat directory of colour images; luminance is derived on the fly
    Paired,
    /// one subdirectory per class, mapped to ids alphabetically
    Labeled,
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub name: String,
    pub path: PathBuf,
    pub image: RgbImage,
    pub label: Option<usize>,
    /// companion `<stem>.l.png` file holding the stored luminance
    pub stored_l: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub items: Vec<DatasetItem>,
    /// undecodable files and why they were skipped
    pub rejects: Vec<(PathBuf, String)>,
    pub class_names: Vec<String>,
}

/// Loads a dataset directory with deterministic lexicographic ordering.
/// Corrupt files land in the rejects list; the run continues as long as at
/// least one sample decodes.
pub fn ingest_dataset(root: &Path, layout: DatasetLayout) -> Result<PairedDataset, PipelineError> {
    let mut dataset = PairedDataset::default();
    match layout {
        DatasetLayout::Paired => {
            ingest_dir(root, None, &mut dataset)?;
        }
        DatasetLayout::Labeled => {
            let mut classes: Vec<PathBuf> = fs::read_dir(root)
                .map_err(io_err(root))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            classes.sort();
            for (label, class_dir) in classes.iter().enumerate() {
                dataset.class_names.push(
                    class_dir
                        .file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                );
                ingest_dir(class_dir, Some(label), &mut dataset)?;
            }
        }
    }
    if dataset.items.is_empty() {
        return Err(PipelineError::EmptyDataset(root.to_path_buf()));
    }
    Ok(dataset)
}

fn ingest_dir(
    dir: &Path,
    label: Option<usize>,
    dataset: &mut PairedDataset,
) -> Result<(), PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let is_companion = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().ends_with(".l"))
            .unwrap_or(false)
    };
    for path in &files {
        if is_companion(path) {
            continue; // stored-luminance side of a pair
        }
        // a colour file `x.png` may carry a stored-L companion `x.l.png`
        let stored_l = path
            .file_stem()
            .map(|stem| path.with_file_name(format!("{}.l.png", stem.to_string_lossy())))
            .filter(|p| p.is_file());
        match read_rgb_png(path) {
            Ok(image) => dataset.items.push(DatasetItem {
                name: path
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                path: path.clone(),
                image,
                label,
                stored_l,
            }),
            Err(e) => dataset.rejects.push((path.clone(), e.to_string())),
        }
    }
    Ok(())
}

/// Bilinear resize of an RGB image (used to fit arbitrary inputs onto the
/// configured network size).
pub fn resize_rgb(img: &RgbImage, size: usize) -> RgbImage {
    if img.width() == size && img.height() == size {
        return img.clone();
    }
    let mut pixels = Vec::with_capacity(size * size);
    let taps = |o: usize, n: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = f.floor() as usize;
        (lo, (lo + 1).min(n - 1), f - lo as f64)
    };
    for y in 0..size {
        let (y0, y1, wy) = taps(y, img.height());
        for x in 0..size {
            let (x0, x1, wx) = taps(x, img.width());
            let mut px = [0.0; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let top = img.pixel(x0, y0)[c] * (1.0 - wx) + img.pixel(x1, y0)[c] * wx;
                let bot = img.pixel(x0, y1)[c] * (1.0 - wx) + img.pixel(x1, y1)[c] * wx;
                *slot = top * (1.0 - wy) + bot * wy;
            }
            pixels.push(px);
        }
    }
    RgbImage::new(size, size, pixels).expect("resized image is valid")
}

/// Training-ready samples at the configured input size. When an item has
/// a stored-luminance companion, the network input comes from that file
/// (matching deployment, where only the archived L exists) while chroma
/// targets always derive from the colour image.
pub fn to_train_samples(dataset: &PairedDataset, input_size: usize) -> Vec<TrainSample> {
    dataset
        .items
        .iter()
        .map(|item| {
            let fitted = resize_rgb(&item.image, input_size);
            let lab = rgb_to_lab(&fitted);
            let (derived_l, ab) = split_luminance(&lab);
            let l = match &item.stored_l {
                Some(path) => match read_l_png(path) {
                    Ok(stored) => resize_l(&stored, input_size),
                    Err(_) => derived_l,
                },
                None => derived_l,
            };
            TrainSample { l, ab }
        })
        .collect()
}

/// Bilinear resize of a `[1,h,w]` luminance plane.
pub fn resize_l(l: &Tensor, size: usize) -> Tensor {
    let (h, w) = (l.shape()[1], l.shape()[2]);
    if (h, w) == (size, size) {
        return l.clone();
    }
    let taps = |o: usize, n: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = f.floor() as usize;
        (lo, (lo + 1).min(n - 1), f - lo as f64)
    };
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, wy) = taps(y, h);
        for x in 0..size {
            let (x0, x1, wx) = taps(x, w);
            let top = l.data()[y0 * w + x0] * (1.0 - wx) + l.data()[y0 * w + x1] * wx;
            let bot = l.data()[y1 * w + x0] * (1.0 - wx) + l.data()[y1 * w + x1] * wx;
            data.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Tensor::from_vec(&[1, size, size], data)
}

pub fn to_labeled_samples(
    dataset: &PairedDataset,
    input_size: usize,
) -> Vec<crate::training::LabeledSample> {
    dataset
        .items
        .iter()
        .map(|item| {
            let fitted = resize_rgb(&item.image, input_size);
            let lab = rgb_to_lab(&fitted);
            let (l, _) = split_luminance(&lab);
            crate::training::LabeledSample {
                l,
                label: item.label.unwrap_or(0),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// image file IO
// ---------------------------------------------------------------------------

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, PipelineError> {
    let img = image::open(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb
        .pixels()
        .map(|p| {
            [
                p.0[0] as f64 / 255.0,
                p.0[1] as f64 / 255.0,
                p.0[2] as f64 / 255.0,
            ]
        })
        .collect();
    RgbImage::new(w, h, pixels).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), PipelineError> {
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (p[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (p[2] * 255.0).round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    out.save(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Luminance sample width for stored files; 8 bits is the default archive
/// format, 16 bits is available for fidelity studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LuminanceDepth {
    Bits8,
    Bits16,
}

impl LuminanceDepth {
    pub fn from_bits(bits: usize) -> Option<Self> {
        match bits {
            8 => Some(LuminanceDepth::Bits8),
            16 => Some(LuminanceDepth::Bits16),
            _ => None,
        }
    }

    pub fn bytes_per_sample(self) -> usize {
        match self {
            LuminanceDepth::Bits8 => 1,
            LuminanceDepth::Bits16 => 2,
        }
    }
}

/// Writes a single-channel luminance file, L mapped linearly from
/// `[0,100]` onto the sample range.
pub fn write_l_png(path: &Path, lab: &LabImage) -> Result<(), PipelineError> {
    write_l_png_depth(path, lab, LuminanceDepth::Bits8)
}

pub fn write_l_png_depth(
    path: &Path,
    lab: &LabImage,
    depth: LuminanceDepth,
) -> Result<(), PipelineError> {
    let err = |e: image::ImageError| PipelineError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    match depth {
        LuminanceDepth::Bits8 => {
            let mut out = image::GrayImage::new(lab.width() as u32, lab.height() as u32);
            for y in 0..lab.height() {
                for x in 0..lab.width() {
                    let (l, _, _) = lab.lab(x, y);
                    out.put_pixel(x as u32, y as u32, image::Luma([l_to_u8(l)]));
                }
            }
            out.save(path).map_err(err)
        }
        LuminanceDepth::Bits16 => {
            let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                lab.width() as u32,
                lab.height() as u32,
            );
            for y in 0..lab.height() {
                for x in 0..lab.width() {
                    let (l, _, _) = lab.lab(x, y);
                    let v = (l / 100.0 * 65535.0).round().clamp(0.0, 65535.0) as u16;
                    out.put_pixel(x as u32, y as u32, image::Luma([v]));
                }
            }
            out.save(path).map_err(err)
        }
    }
}

/// Reads a stored luminance file (8 or 16 bit) into a normalised
/// `[1,h,w]` network input.
pub fn read_l_png(path: &Path) -> Result<Tensor, PipelineError> {
    let img = image::open(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma16(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let data: Vec<f64> = gray.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
            Ok(Tensor::from_vec(&[1, h, w], data))
        }
        other => {
            let gray = other.to_luma8();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let data: Vec<f64> = gray.pixels().map(|p| u8_to_l(p.0[0]) / 100.0).collect();
            Ok(Tensor::from_vec(&[1, h, w], data))
        }
    }
}

// ---------------------------------------------------------------------------
// luminance archive
// ---------------------------------------------------------------------------

/// Byte accounting of one archived image. The raw payload ratio is exactly
/// one third: one stored sample per pixel instead of three.
#[derive(Clone, Debug)]
pub struct ArchiveReport {
    pub width: usize,
    pub height: usize,
    pub raw_luminance_bytes: usize,
    pub raw_color_bytes: usize,
    pub stored_file_bytes: u64,
    pub source_file_bytes: u64,
}

impl ArchiveReport {
    pub fn raw_ratio(&self) -> f64 {
        self.raw_luminance_bytes as f64 / self.raw_color_bytes as f64
    }
}

/// Stores the luminance channel of a colour image as a gray file and
/// reports the byte savings; the raw payload is one sample per pixel
/// against three for colour, whatever the sample width.
pub fn archive_luminance(
    color_path: &Path,
    out_path: &Path,
) -> Result<ArchiveReport, PipelineError> {
    archive_luminance_depth(color_path, out_path, LuminanceDepth::Bits8)
}

pub fn archive_luminance_depth(
    color_path: &Path,
    out_path: &Path,
    depth: LuminanceDepth,
) -> Result<ArchiveReport, PipelineError> {
    let img = read_rgb_png(color_path)?;
    let lab = rgb_to_lab(&img);
    write_l_png_depth(out_path, &lab, depth)?;
    let source_file_bytes = fs::metadata(color_path).map_err(io_err(color_path))?.len();
    let stored_file_bytes = fs::metadata(out_path).map_err(io_err(out_path))?.len();
    let pixels = img.width() * img.height();
    Ok(ArchiveReport {
        width: img.width(),
        height: img.height(),
        raw_luminance_bytes: pixels * depth.bytes_per_sample(),
        raw_color_bytes: 3 * pixels * depth.bytes_per_sample(),
        stored_file_bytes,
        source_file_bytes,
    })
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// FNV-1a digest of the shape-relevant configuration fields; a checkpoint
/// only loads into a configuration with the same digest.
pub fn config_digest(cfg: &NetworkConfig) -> u64 {
    let caps = &cfg.capsules;
    let canonical = format!(
        "in={};pre={};dbdc={:?};dbds={:?};dbuc={:?};dbus={:?};caps={},{},{},{},{},{};clf={:?},{};disc={:?};bins={};flags={},{},{},{};het={}",
        cfg.input_size,
        cfg.preb_channels,
        cfg.dbd_channels,
        cfg.dbd_strides,
        cfg.dbu_channels,
        cfg.dbu_sizes,
        caps.count_in,
        caps.count_out,
        caps.conv_channels,
        caps.conv_stride,
        caps.pose_channels,
        caps.tconv_channels,
        cfg.classifier.blocks,
        cfg.classifier.classes,
        cfg.discriminator.layers,
        cfg.bins,
        cfg.flags.use_capsules,
        cfg.flags.use_classifier,
        cfg.flags.use_progl,
        cfg.flags.use_gan,
        cfg.heterogeneous_conv,
    );
    let mut h: u64 = 0xcbf29ce484222325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Serialises every parameter as a named little-endian f32 blob.
pub fn save_checkpoint(
    state: &ModelState,
    cfg: &NetworkConfig,
    path: &Path,
) -> Result<(), PipelineError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest(cfg).to_le_bytes());
    buf.push(state.phase.code());
    buf.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, tensor) in state.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

/// Loads and validates a checkpoint against the plan it is expected to
/// populate: magic, version, digest, and the full parameter inventory.
pub fn load_checkpoint(path: &Path, plan: &NetworkPlan) -> Result<ModelState, PipelineError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(PipelineError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::VersionMismatch(version));
    }
    let found = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let expected = config_digest(&plan.config);
    if found != expected {
        return Err(PipelineError::DigestMismatch { expected, found });
    }
    let phase_code = cur.take(1)?[0];
    let phase = Phase::from_code(phase_code)
        .ok_or_else(|| PipelineError::Format(format!("bad phase code {phase_code}")))?;
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;

    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| PipelineError::Format("non-utf8 tensor name".into()))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            data.push(v as f64);
        }
        params.insert(name, Tensor::from_vec(&shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(PipelineError::Format("trailing bytes".into()));
    }

    // the inventory must match exactly: same names, same shapes
    if params.len() != plan.inventory.len() {
        return Err(PipelineError::Format(format!(
            "checkpoint has {} tensors, inventory expects {}",
            params.len(),
            plan.inventory.len()
        )));
    }
    for spec in &plan.inventory {
        match params.get(&spec.name) {
            Some(t) if t.shape() == spec.shape.as_slice() => {}
            Some(t) => {
                return Err(PipelineError::Format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            None => {
                return Err(PipelineError::Format(format!(
                    "tensor '{}' missing from checkpoint",
                    spec.name
                )))
            }
        }
    }
    Ok(ModelState::from_parts(params, phase))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.pos + n > self.bytes.len() {
            return Err(PipelineError::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// gamut table files
// ---------------------------------------------------------------------------

pub fn save_gamut_table(grid: &GamutGrid, path: &Path) -> Result<(), PipelineError> {
    fs::write(path, grid.to_table()).map_err(io_err(path))
}

pub fn load_gamut_table(path: &Path) -> Result<GamutGrid, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    GamutGrid::from_table(&text).map_err(|e| PipelineError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkPlan;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn sample_image(seed: u64, size: usize) -> RgbImage {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..size * size)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        RgbImage::new(size, size, pixels).unwrap()
    }

    #[test]
    fn config_parsing_and_unknown_keys() {
        let cfg = RunConfig::from_str_contents(
            "# comment\nscale = desk\nseed = 9\nrho=3\nuse_capsules = false\nlr = 1e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.rho, 3);
        assert!(!cfg.flags.use_capsules);
        assert!((cfg.lr - 1e-3).abs() < 1e-15);

        assert!(matches!(
            RunConfig::from_str_contents("bogus_key = 1\n"),
            Err(PipelineError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_str_contents("lambda = 2.0\n"),
            Err(PipelineError::BadValue { .. })
        ));
        // scale key applies its preset even when it is not the first line
        let cfg = RunConfig::from_str_contents("seed = 5\nscale = reference\n").unwrap();
        assert_eq!(cfg.scale, ScalePreset::Reference);
        assert_eq!(cfg.rho, 30);
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn dataset_ingestion_orders_and_rejects() {
        let dir = tmpdir();
        for name in ["b.png", "a.png", "c.png"] {
            write_rgb_png(&dir.path().join(name), &sample_image(1, 8)).unwrap();
        }
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let ds = ingest_dataset(dir.path(), DatasetLayout::Paired).unwrap();
        let names: Vec<&str> = ds.items.iter().map(|i| i.name.as_str()).collect();
        assert_eq!(names, vec!["a.png", "b.png", "c.png"]);
        assert_eq!(ds.rejects.len(), 1);

        let empty = tmpdir();
        assert!(matches!(
            ingest_dataset(empty.path(), DatasetLayout::Paired),
            Err(PipelineError::EmptyDataset(_))
        ));
    }

    #[test]
    fn labeled_layout_maps_alphabetically() {
        let dir = tmpdir();
        for (i, class) in ["coral", "dive", "fish"].iter().enumerate() {
            let sub = dir.path().join(class);
            fs::create_dir(&sub).unwrap();
            write_rgb_png(&sub.join("x.png"), &sample_image(i as u64, 8)).unwrap();
        }
        let ds = ingest_dataset(dir.path(), DatasetLayout::Labeled).unwrap();
        assert_eq!(ds.class_names, vec!["coral", "dive", "fish"]);
        let labels: Vec<usize> = ds.items.iter().map(|i| i.label.unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn archive_ratio_and_round_trip() {
        let dir = tmpdir();
        let color = dir.path().join("in.png");
        let stored = dir.path().join("in_l.png");
        let img = sample_image(3, 24);
        write_rgb_png(&color, &img).unwrap();
        let report = archive_luminance(&color, &stored).unwrap();
        assert_eq!(report.raw_color_bytes, 3 * 24 * 24);
        assert_eq!(report.raw_luminance_bytes, 24 * 24);
        assert!((report.raw_ratio() - 1.0 / 3.0).abs() < 1e-15);

        // stored L re-reads to within one 8-bit level of the computed L
        let lab = rgb_to_lab(&read_rgb_png(&color).unwrap());
        let l = read_l_png(&stored).unwrap();
        for (a, b) in l.data().iter().zip(lab.l()) {
            let err = (a * 100.0 - b).abs();
            assert!(err <= 100.0 / 255.0 + 1e-9, "L error {}", err);
        }
    }

    #[test]
    fn archive_reference_scale_arithmetic() {
        // 224x224 -> 50,176 vs 150,528 raw bytes
        let report = ArchiveReport {
            width: 224,
            height: 224,
            raw_luminance_bytes: 224 * 224,
            raw_color_bytes: 3 * 224 * 224,
            stored_file_bytes: 0,
            source_file_bytes: 0,
        };
        assert_eq!(report.raw_luminance_bytes, 50_176);
        assert_eq!(report.raw_color_bytes, 150_528);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tmpdir();
        let plan = NetworkPlan::build(NetworkConfig::desk(17, 3)).unwrap();
        let state = ModelState::init(&plan, 11);
        let path = dir.path().join("model.uwpc");
        save_checkpoint(&state, &plan.config, &path).unwrap();
        let loaded = load_checkpoint(&path, &plan).unwrap();
        assert_eq!(loaded.phase, state.phase);
        for (name, tensor) in state.iter() {
            let lt = loaded.get(name);
            assert_eq!(lt.shape(), tensor.shape());
            for (a, b) in lt.data().iter().zip(tensor.data()) {
                assert!(a.to_bits() == b.to_bits(), "tensor {} not bit-exact", name);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_truncation_version_and_digest() {
        let dir = tmpdir();
        let plan = NetworkPlan::build(NetworkConfig::desk(17, 3)).unwrap();
        let state = ModelState::init(&plan, 11);
        let path = dir.path().join("model.uwpc");
        save_checkpoint(&state, &plan.config, &path).unwrap();

        // truncation -> format error, not a crash
        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.uwpc");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut, &plan),
            Err(PipelineError::Format(_))
        ));

        // digest mismatch (different Q) -> explicit incompatibility error
        let other_plan = NetworkPlan::build(NetworkConfig::desk(19, 3)).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &other_plan),
            Err(PipelineError::DigestMismatch { .. })
        ));

        // version bump -> version error
        let mut vbytes = bytes.clone();
        vbytes[4] = 9;
        let vpath = dir.path().join("v9.uwpc");
        fs::write(&vpath, &vbytes).unwrap();
        assert!(matches!(
            load_checkpoint(&vpath, &plan),
            Err(PipelineError::VersionMismatch(9))
        ));

        // bad magic -> format error
        let mut mbytes = bytes;
        mbytes[0] = b'X';
        let mpath = dir.path().join("badmagic.uwpc");
        fs::write(&mpath, &mbytes).unwrap();
        assert!(matches!(
            load_checkpoint(&mpath, &plan),
            Err(PipelineError::Format(_))
        ));
    }

    #[test]
    fn gamut_table_file_round_trip() {
        let dir = tmpdir();
        let grid = GamutGrid::build(10.0).unwrap();
        let path = dir.path().join("gamut.txt");
        save_gamut_table(&grid, &path).unwrap();
        let loaded = load_gamut_table(&path).unwrap();
        assert_eq!(loaded.bin_count(), grid.bin_count());
        assert_eq!(loaded.centers(), grid.centers());
    }

    #[test]
    fn resize_preserves_constants_and_size() {
        let img = RgbImage::filled(10, 10, [0.2, 0.4, 0.8]).unwrap();
        let r = resize_rgb(&img, 32);
        assert_eq!(r.width(), 32);
        for p in r.pixels() {
            assert!((p[0] - 0.2).abs() < 1e-12);
            assert!((p[2] - 0.8).abs() < 1e-12);
        }
    }
}
