//! Loss functions, the Adam optimiser, the progressive growth schedule and
//! the three training phases.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::colorspace::{AbPlanes, GamutGrid, SoftEncoding};
use crate::graph::{Graph, Var};
use crate::network::{
    classifier_logits, classifier_probs, discriminator_run, forward_to_stage, ModelState,
    NetSession, NetworkConfig, Phase, Stage,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("soft target row at pixel {0} sums to {1}, expected 1")]
    BadTargetRow(usize, f64),
    #[error("non-finite loss at {phase} epoch {epoch} step {step}")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("schedule cannot move backwards: epoch {requested} < {current}")]
    EpochRegression { requested: usize, current: usize },
    #[error("gamut bin count {grid} does not match configured {config}")]
    BinMismatch { grid: usize, config: usize },
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Softmax cross-entropy of classifier logits against a hard label.
pub fn loss_class(g: &mut Graph, logits: Var, label: usize) -> Var {
    g.cross_entropy_logits(logits, label)
}

/// Rebalanced quantisation loss: soft-target cross-entropy over the gamut
/// bins, each pixel weighted by the rarity of its dominant bin, averaged
/// over pixels. The logits are softmaxed internally.
pub fn loss_quant(
    g: &mut Graph,
    logits: Var,
    target: &SoftEncoding,
    rarity: &[f64],
) -> Result<Var, TrainError> {
    let (q, h, w) = {
        let s = g.value(logits).shape();
        (s[0], s[1], s[2])
    };
    assert_eq!(target.height(), h, "target height mismatch");
    assert_eq!(target.width(), w, "target width mismatch");
    assert_eq!(rarity.len(), q, "rarity weights must cover every bin");
    let px = h * w;
    for p in 0..px {
        let sum = target.pixel_sum(p);
        if (sum - 1.0).abs() > 1e-4 {
            return Err(TrainError::BadTargetRow(p, sum));
        }
    }
    let dense = target.to_tensor(q);
    let mut weights = Tensor::zeros(&[h, w]);
    for p in 0..px {
        weights.data_mut()[p] = rarity[target.argmax_bin(p)];
    }
    Ok(g.weighted_soft_cross_entropy(logits, dense, weights))
}

/// Chrominance regression: squared error summed over the two channels,
/// averaged over pixels.
pub fn loss_chroma(g: &mut Graph, ab_pred: Var, target: &AbPlanes) -> Var {
    let (h, w) = {
        let s = g.value(ab_pred).shape();
        assert_eq!(s[0], 2, "chroma prediction must have two channels");
        (s[1], s[2])
    };
    assert_eq!(target.height(), h);
    assert_eq!(target.width(), w);
    let t = g.leaf(target.to_tensor());
    let diff = g.sub(ab_pred, t);
    let sq = g.mul(diff, diff);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / (h * w) as f64)
}

/// Adversarial loss: mean binary cross-entropy with logits against an
/// all-real or all-fake patch target.
pub fn loss_adv(g: &mut Graph, disc_logits: Var, target_is_real: bool) -> Var {
    g.bce_with_logits(disc_logits, target_is_real)
}

/// A fixed (non-trained) dilated-convolution feature stack. Parameters are
/// deterministic in the seed and never updated; gradients still flow
/// through the extracted features to the prediction.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    layers: Vec<PercLayer>,
}

#[derive(Clone, Debug)]
struct PercLayer {
    weight: Tensor,
    bias: Tensor,
    dilation: usize,
    activate: bool,
}

impl PerceptualExtractor {
    /// Four 3x3 layers with dilations 1, 2, 4, 8.
    pub fn fixed(in_channels: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x30);
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for dilation in [1usize, 2, 4, 8] {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            layers.push(PercLayer {
                weight: Tensor::randn(&[width, cin, 3, 3], std, &mut rng),
                bias: Tensor::zeros(&[width]),
                dilation,
                activate: true,
            });
            cin = width;
        }
        PerceptualExtractor { layers }
    }

    /// Explicit layer list: `(weight, bias, dilation, activate)` tuples.
    pub fn from_layers(layers: Vec<(Tensor, Tensor, usize, bool)>) -> Self {
        assert!(!layers.is_empty());
        PerceptualExtractor {
            layers: layers
                .into_iter()
                .map(|(weight, bias, dilation, activate)| PercLayer {
                    weight,
                    bias,
                    dilation,
                    activate,
                })
                .collect(),
        }
    }

    /// Single identity layer; turns the perceptual distance into a plain
    /// mean squared error, used by tests.
    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            weight.data_mut()[c * channels + c] = 1.0;
        }
        PerceptualExtractor {
            layers: vec![PercLayer {
                weight,
                bias: Tensor::zeros(&[channels]),
                dilation: 1,
                activate: false,
            }],
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Tapped features, one per layer.
    pub fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let w = g.leaf(layer.weight.clone());
            let b = g.leaf(layer.bias.clone());
            let pad = layer.dilation; // keeps the spatial extent for 3x3
            let kernel = layer.weight.shape()[2];
            let pad = if kernel == 1 { 0 } else { pad };
            let c = g.conv2d(cur, w, b, 1, pad, layer.dilation);
            cur = if layer.activate { g.relu(c) } else { c };
            taps.push(cur);
        }
        taps
    }
}

/// Perceptual distance between two bin distributions: squared feature
/// differences per layer, intralayer mean, then mean across layers.
pub fn loss_perceptual(
    g: &mut Graph,
    pred_probs: Var,
    target_probs: Tensor,
    extractor: &PerceptualExtractor,
) -> Var {
    let tv = g.leaf(target_probs);
    let pred_taps = extractor.features(g, pred_probs);
    let target_taps = extractor.features(g, tv);
    let mut acc: Option<Var> = None;
    for (p, t) in pred_taps.iter().zip(target_taps.iter()) {
        let diff = g.sub(*p, *t);
        let sq = g.mul(diff, diff);
        let layer_mean = g.mean_all(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, layer_mean),
            None => layer_mean,
        });
    }
    let total = acc.expect("extractor has at least one layer");
    g.scale(total, 1.0 / extractor.layer_count() as f64)
}

// ---------------------------------------------------------------------------
// optimiser
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators per parameter plus the shared step
/// counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam step over the given gradients. Only parameters present in
    /// `grads` are touched; updated values are clamped back onto the f32
    /// grid so checkpoints stay bit-exact.
    pub fn step(
        &mut self,
        params: &mut ModelState,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) {
        self.step_count += 1;
        let t = self.step_count;
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            adam_update(
                p.data_mut(),
                grad.data(),
                m.data_mut(),
                v.data_mut(),
                t,
                cfg,
            );
            p.quantize_f32();
        }
    }
}

/// The standard bias-corrected Adam update on raw slices.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let b1t = 1.0 - cfg.beta1.powi(t as i32);
    let b2t = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / b1t;
        let vhat = v[i] / b2t;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Scales gradients in place so their global norm does not exceed `max`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max: f64) -> f64 {
    let mut total = 0.0;
    for g in grads.values() {
        for v in g.data() {
            total += v * v;
        }
    }
    let norm = total.sqrt();
    if norm > max && norm > 0.0 {
        let scale = max / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// progression schedule
// ---------------------------------------------------------------------------

/// Growth stages in attachment order; the last stage has no temporary head.
pub const STAGES: [&str; 6] = ["cd", "dbu1", "dbu2", "dbu3", "dbu4", "post"];

/// State machine growing the decoder one block every `rho` epochs and
/// swapping the temporary quantisation head along the way.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgressionSchedule {
    pub rho: usize,
    pub epoch: usize,
    /// index into `STAGES`
    pub active_stage: usize,
    /// label of the active temporary head; None once the final head owns
    /// the output
    pub active_tcqb: Option<String>,
    /// when false the schedule starts (and stays) at the completed network
    pub progressive: bool,
}

impl ProgressionSchedule {
    pub fn new(rho: usize) -> Self {
        assert!(rho >= 1);
        ProgressionSchedule {
            rho,
            epoch: 0,
            active_stage: 0,
            active_tcqb: Some(STAGES[0].to_string()),
            progressive: true,
        }
    }

    /// Ablated schedule: the completed network from epoch zero.
    pub fn fixed_full() -> Self {
        ProgressionSchedule {
            rho: 1,
            epoch: 0,
            active_stage: STAGES.len() - 1,
            active_tcqb: None,
            progressive: false,
        }
    }

    pub fn stage(&self) -> Stage {
        match self.active_stage {
            0 => Stage::Cd,
            m @ 1..=4 => Stage::Dbu(m),
            _ => Stage::Post,
        }
    }

    pub fn stage_label(&self) -> &'static str {
        STAGES[self.active_stage]
    }
}

/// Pure transition function: the schedule for `epoch`, given the schedule
/// of an earlier epoch. Stage changes only happen on multiples of rho; the
/// new stage's temporary head attaches as the previous one detaches, and
/// nothing remains after the final stage.
pub fn advance_schedule(
    s: &ProgressionSchedule,
    epoch: usize,
) -> Result<ProgressionSchedule, TrainError> {
    if epoch < s.epoch {
        return Err(TrainError::EpochRegression {
            requested: epoch,
            current: s.epoch,
        });
    }
    if !s.progressive {
        let mut next = s.clone();
        next.epoch = epoch;
        return Ok(next);
    }
    let stage = (epoch / s.rho).min(STAGES.len() - 1);
    let active_tcqb = if stage < STAGES.len() - 1 {
        Some(STAGES[stage].to_string())
    } else {
        None
    };
    Ok(ProgressionSchedule {
        rho: s.rho,
        epoch,
        active_stage: stage,
        active_tcqb,
        progressive: true,
    })
}

// ---------------------------------------------------------------------------
// loss reporting
// ---------------------------------------------------------------------------

/// One reported loss component.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub component: &'static str,
    pub value: f64,
}

impl LossReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.phase, self.epoch, self.step, self.component, self.value
        )
    }
}

pub const REPORT_HEADER: &str = "phase,epoch,step,component,value";

// ---------------------------------------------------------------------------
// training data views
// ---------------------------------------------------------------------------

/// One end-to-end training sample: normalised L plane plus chroma targets.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub l: Tensor,
    pub ab: AbPlanes,
}

/// One classifier training sample.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub l: Tensor,
    pub label: usize,
}

/// Area-averaging downsample of a single plane to the target grid; boxes
/// may cover fractional source cells.
pub fn area_downsample(plane: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let mut out = Tensor::zeros(&[oh, ow]);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..ow {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let iy0 = y0.floor() as usize;
            let iy1 = (y1.ceil() as usize).min(h);
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(w);
            for iy in iy0..iy1 {
                let oy_lo = y0.max(iy as f64);
                let oy_hi = y1.min((iy + 1) as f64);
                let wy = (oy_hi - oy_lo).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let ox_lo = x0.max(ix as f64);
                    let ox_hi = x1.min((ix + 1) as f64);
                    let wx = (ox_hi - ox_lo).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    acc += plane.data()[iy * w + ix] * wy * wx;
                    area += wy * wx;
                }
            }
            out.data_mut()[oy * ow + ox] = acc / area;
        }
    }
    out
}

/// Downsamples chroma targets to a head resolution by area averaging.
pub fn downsample_ab(ab: &AbPlanes, oh: usize, ow: usize) -> AbPlanes {
    AbPlanes {
        a: area_downsample(&ab.a, oh, ow),
        b: area_downsample(&ab.b, oh, ow),
    }
}

// ---------------------------------------------------------------------------
// training options
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub quant: f64,
    pub chroma: f64,
    pub adv: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            quant: 1.0,
            chroma: 1.0,
            adv: 1.0,
            perc: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// global-norm gradient clip for the adversarial phase
    pub gan_grad_clip: Option<f64>,
    /// keep the end-to-end losses alongside the adversarial pair
    pub gan_keep_e2e: bool,
    pub soft_k: usize,
    pub soft_sigma: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            adam: AdamConfig::default(),
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            gan_grad_clip: Some(10.0),
            gan_keep_e2e: false,
            soft_k: crate::colorspace::SOFT_ENCODE_K,
            soft_sigma: crate::colorspace::SOFT_ENCODE_SIGMA,
        }
    }
}

/// Accumulates rarity statistics over a dataset at the final head
/// resolution and installs the weights on the grid.
pub fn fit_rarity_weights(
    grid: &mut GamutGrid,
    samples: &[TrainSample],
    head_hw: usize,
    lambda: f64,
    opts: &TrainOptions,
) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encodings: Vec<SoftEncoding> = samples
        .iter()
        .map(|s| {
            let small = downsample_ab(&s.ab, head_hw, head_hw);
            grid.soft_encode(&small, opts.soft_k, opts.soft_sigma)
        })
        .collect();
    let weights = crate::colorspace::rarity_weights(encodings.iter(), grid.bin_count(), lambda)
        .map_err(|_| TrainError::EmptyDataset)?;
    grid.set_rarity_weights(weights);
    Ok(())
}

// ---------------------------------------------------------------------------
// phase 1: classifier finetune
// ---------------------------------------------------------------------------

/// Trains the classifier head on labeled luminance planes; every class in
/// `[0, P)` must be represented. Returns the per-epoch training accuracy
/// trajectory. The returned state carries the classifier phase tag; the
/// classifier is frozen from then on by construction (later phases never
/// bind its parameters into their tapes).
pub fn train_classifier(
    state: &mut ModelState,
    samples: &[LabeledSample],
    cfg: &NetworkConfig,
    epochs: usize,
    opts: &TrainOptions,
    mut sink: impl FnMut(&LossReport),
) -> Result<Vec<f64>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let p = cfg.classifier.classes;
    for class in 0..p {
        if !samples.iter().any(|s| s.label == class) {
            return Err(TrainError::EmptyClass(class));
        }
    }
    state.phase = Phase::Classifier;
    let mut opt = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0x20);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut accuracies = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &samples[idx];
                let mut sess = NetSession::new(state);
                let lv = sess.g.leaf(sample.l.clone());
                let logits = classifier_logits(&mut sess, cfg, lv);
                let loss = loss_class(&mut sess.g, logits, sample.label);
                let value = sess.g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        phase: "classifier",
                        epoch,
                        step,
                    });
                }
                batch_loss += value;
                let lv = sess.g.value(logits);
                let pred = lv
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if pred == sample.label {
                    correct += 1;
                }
                let g = sess.g.backward(loss);
                accumulate_grads(&mut grads, &sess, &g, 1.0 / batch.len() as f64, |_| true);
            }
            opt.step(state, &grads, &opts.adam);
            sink(&LossReport {
                phase: "classifier",
                epoch,
                step,
                component: "class",
                value: batch_loss / batch.len() as f64,
            });
        }
        let acc = correct as f64 / samples.len() as f64;
        accuracies.push(acc);
        sink(&LossReport {
            phase: "classifier",
            epoch,
            step: 0,
            component: "accuracy",
            value: acc,
        });
    }
    Ok(accuracies)
}

fn accumulate_grads(
    grads: &mut BTreeMap<String, Tensor>,
    sess: &NetSession,
    g: &crate::graph::Gradients,
    scale: f64,
    select: impl Fn(&str) -> bool,
) {
    for (name, var) in sess.bound() {
        if !select(name) {
            continue;
        }
        if let Some(grad) = g.get_opt(*var) {
            let entry = grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for (dst, src) in entry.data_mut().iter_mut().zip(grad.data()) {
                *dst += src * scale;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// phase 2: progressive end-to-end
// ---------------------------------------------------------------------------

/// One end-to-end step's loss pieces.
struct E2eLosses {
    quant: f64,
    chroma: f64,
    total: f64,
}

/// Builds the end-to-end loss for one sample at the given stage; returns
/// the loss var so the caller can run backward.
fn e2e_sample_loss(
    sess: &mut NetSession,
    cfg: &NetworkConfig,
    grid: &GamutGrid,
    sample: &TrainSample,
    probs: Option<&Tensor>,
    stage: Stage,
    opts: &TrainOptions,
) -> Result<(Var, E2eLosses), TrainError> {
    let lv = sess.g.leaf(sample.l.clone());
    let out = forward_to_stage(sess, cfg, lv, probs, stage);
    let (lh, lw) = {
        let s = sess.g.value(out.logits).shape();
        (s[1], s[2])
    };
    let (ah, aw) = {
        let s = sess.g.value(out.ab).shape();
        (s[1], s[2])
    };
    let quant_target_ab = downsample_ab(&sample.ab, lh, lw);
    let encoding = grid.soft_encode(&quant_target_ab, opts.soft_k, opts.soft_sigma);
    let lq = loss_quant(&mut sess.g, out.logits, &encoding, grid.rarity_weights())?;
    let chroma_target = if (ah, aw) == (sample.ab.height(), sample.ab.width()) {
        sample.ab.clone()
    } else {
        downsample_ab(&sample.ab, ah, aw)
    };
    let lch = loss_chroma(&mut sess.g, out.ab, &chroma_target);
    let wq = sess.g.scale(lq, opts.weights.quant);
    let wch = sess.g.scale(lch, opts.weights.chroma);
    let total = sess.g.add(wq, wch);
    let pieces = E2eLosses {
        quant: sess.g.value(lq).item(),
        chroma: sess.g.value(lch).item(),
        total: sess.g.value(total).item(),
    };
    Ok((total, pieces))
}

/// Progressive end-to-end training. The classifier stays frozen (its
/// probabilities enter the tape as constants); the schedule decides which
/// decoder prefix and head are live each epoch. Emits one report per loss
/// component per step and invokes `on_stage` whenever the stage changes
/// (including the initial stage at epoch zero).
#[allow(clippy::too_many_arguments)]
pub fn train_end2end(
    state: &mut ModelState,
    samples: &[TrainSample],
    grid: &GamutGrid,
    cfg: &NetworkConfig,
    rho: usize,
    epochs: usize,
    opts: &TrainOptions,
    mut sink: impl FnMut(&LossReport),
    mut on_stage: impl FnMut(&ModelState, usize, &str),
) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if grid.bin_count() != cfg.bins {
        return Err(TrainError::BinMismatch {
            grid: grid.bin_count(),
            config: cfg.bins,
        });
    }
    state.phase = Phase::EndToEnd;
    let mut schedule = if cfg.flags.use_progl {
        ProgressionSchedule::new(rho)
    } else {
        ProgressionSchedule::fixed_full()
    };
    let mut opt = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0x21);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_stage = usize::MAX;
    for epoch in 0..epochs {
        schedule = advance_schedule(&schedule, epoch)?;
        if schedule.active_stage != last_stage {
            on_stage(state, epoch, schedule.stage_label());
            last_stage = schedule.active_stage;
        }
        let stage = schedule.stage();
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut sums = E2eLosses {
                quant: 0.0,
                chroma: 0.0,
                total: 0.0,
            };
            for &idx in batch {
                let sample = &samples[idx];
                let probs = if cfg.flags.use_classifier {
                    Some(classifier_probs(state, cfg, &sample.l))
                } else {
                    None
                };
                let mut sess = NetSession::new(state);
                let (loss, pieces) =
                    e2e_sample_loss(&mut sess, cfg, grid, sample, probs.as_ref(), stage, opts)?;
                if !pieces.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        phase: "end2end",
                        epoch,
                        step,
                    });
                }
                sums.quant += pieces.quant;
                sums.chroma += pieces.chroma;
                sums.total += pieces.total;
                let g = sess.g.backward(loss);
                accumulate_grads(&mut grads, &sess, &g, 1.0 / batch.len() as f64, |n| {
                    !n.starts_with("clf.") && !n.starts_with("disc.")
                });
            }
            opt.step(state, &grads, &opts.adam);
            let n = batch.len() as f64;
            for (component, value) in [
                ("quant", sums.quant / n),
                ("chroma", sums.chroma / n),
                ("total", sums.total / n),
            ] {
                sink(&LossReport {
                    phase: "end2end",
                    epoch,
                    step,
                    component,
                    value,
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// phase 3: adversarial refinement
// ---------------------------------------------------------------------------

/// Adversarial refinement with the patch discriminator. Each batch runs a
/// discriminator update on (real, fake) pairs followed by a generator
/// update against the refreshed discriminator; the classifier stays
/// frozen throughout, and the two updates touch disjoint parameter sets.
#[allow(clippy::too_many_arguments)]
pub fn train_gan(
    state: &mut ModelState,
    samples: &[TrainSample],
    grid: &GamutGrid,
    cfg: &NetworkConfig,
    epochs: usize,
    opts: &TrainOptions,
    extractor: &PerceptualExtractor,
    mut sink: impl FnMut(&LossReport),
) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if grid.bin_count() != cfg.bins {
        return Err(TrainError::BinMismatch {
            grid: grid.bin_count(),
            config: cfg.bins,
        });
    }
    assert!(cfg.flags.use_gan, "gan phase requires the discriminator");
    state.phase = Phase::Gan;
    let mut gen_opt = OptimizerState::new();
    let mut disc_opt = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(0x22);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            // --- discriminator update ---
            let mut d_grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut d_loss_sum = 0.0;
            let mut fakes: Vec<Tensor> = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &samples[idx];
                let (fake_ab, _) = crate::network::full_forward(state, cfg, &sample.l);
                fakes.push(fake_ab.to_tensor());
            }
            for (&idx, fake) in batch.iter().zip(fakes.iter()) {
                let sample = &samples[idx];
                let mut sess = NetSession::new(state);
                let lv = sess.g.leaf(sample.l.clone());
                let real_ab = sess.g.leaf(sample.ab.to_tensor());
                let real_logits = discriminator_run(&mut sess, cfg, lv, real_ab);
                let real_loss = loss_adv(&mut sess.g, real_logits, true);
                let fake_ab = sess.g.leaf(fake.clone());
                let fake_logits = discriminator_run(&mut sess, cfg, lv, fake_ab);
                let fake_loss = loss_adv(&mut sess.g, fake_logits, false);
                let sum = sess.g.add(real_loss, fake_loss);
                let loss = sess.g.scale(sum, 0.5);
                let value = sess.g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        phase: "gan",
                        epoch,
                        step,
                    });
                }
                d_loss_sum += value;
                let g = sess.g.backward(loss);
                accumulate_grads(&mut d_grads, &sess, &g, 1.0 / batch.len() as f64, |n| {
                    n.starts_with("disc.")
                });
            }
            if let Some(max) = opts.gan_grad_clip {
                clip_global_norm(&mut d_grads, max);
            }
            disc_opt.step(state, &d_grads, &opts.adam);

            // --- generator update against the refreshed discriminator ---
            let mut g_grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut g_adv_sum = 0.0;
            let mut g_perc_sum = 0.0;
            let mut g_total_sum = 0.0;
            for &idx in batch {
                let sample = &samples[idx];
                let probs = if cfg.flags.use_classifier {
                    Some(classifier_probs(state, cfg, &sample.l))
                } else {
                    None
                };
                let mut sess = NetSession::new(state);
                let lv = sess.g.leaf(sample.l.clone());
                let out = forward_to_stage(&mut sess, cfg, lv, probs.as_ref(), Stage::Post);
                let adv_logits = discriminator_run(&mut sess, cfg, lv, out.ab);
                let adv = loss_adv(&mut sess.g, adv_logits, true);

                let (lh, lw) = {
                    let s = sess.g.value(out.logits).shape();
                    (s[1], s[2])
                };
                let target_ab = downsample_ab(&sample.ab, lh, lw);
                let encoding = grid.soft_encode(&target_ab, opts.soft_k, opts.soft_sigma);
                let target_probs = encoding.to_tensor(cfg.bins);
                let pred_probs = sess.g.softmax0(out.logits);
                let perc = loss_perceptual(&mut sess.g, pred_probs, target_probs, extractor);

                let wadv = sess.g.scale(adv, opts.weights.adv);
                let wperc = sess.g.scale(perc, opts.weights.perc);
                let mut total = sess.g.add(wadv, wperc);
                if opts.gan_keep_e2e {
                    let lq = loss_quant(&mut sess.g, out.logits, &encoding, grid.rarity_weights())?;
                    let lch = loss_chroma(&mut sess.g, out.ab, &sample.ab);
                    let wq = sess.g.scale(lq, opts.weights.quant);
                    let wch = sess.g.scale(lch, opts.weights.chroma);
                    let e2e = sess.g.add(wq, wch);
                    total = sess.g.add(total, e2e);
                }
                let adv_v = sess.g.value(adv).item();
                let perc_v = sess.g.value(perc).item();
                let total_v = sess.g.value(total).item();
                if !total_v.is_finite() {
                    return Err(TrainError::NonFinite {
                        phase: "gan",
                        epoch,
                        step,
                    });
                }
                g_adv_sum += adv_v;
                g_perc_sum += perc_v;
                g_total_sum += total_v;
                let g = sess.g.backward(total);
                accumulate_grads(&mut g_grads, &sess, &g, 1.0 / batch.len() as f64, |n| {
                    !n.starts_with("clf.") && !n.starts_with("disc.")
                });
            }
            if let Some(max) = opts.gan_grad_clip {
                clip_global_norm(&mut g_grads, max);
            }
            gen_opt.step(state, &g_grads, &opts.adam);

            let n = batch.len() as f64;
            for (component, value) in [
                ("disc", d_loss_sum / n),
                ("adv", g_adv_sum / n),
                ("perc", g_perc_sum / n),
                ("total", g_total_sum / n),
            ] {
                sink(&LossReport {
                    phase: "gan",
                    epoch,
                    step,
                    component,
                    value,
                });
            }
        }
    }
    Ok(())
}


#[cfg(test)]
mod schedule_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn replayed_schedules_hold_their_invariants(
            rho in 1usize..12,
            epochs in 1usize..120,
        ) {
            let mut s = ProgressionSchedule::new(rho);
            let mut last_stage = 0usize;
            for epoch in 0..epochs {
                s = advance_schedule(&s, epoch).unwrap();
                // stage index is monotone and advances only on rho boundaries
                prop_assert!(s.active_stage >= last_stage);
                prop_assert_eq!(s.active_stage, (epoch / rho).min(STAGES.len() - 1));
                // exactly one temporary head before the final stage, none after
                if s.active_stage < STAGES.len() - 1 {
                    prop_assert_eq!(s.active_tcqb.as_deref(), Some(STAGES[s.active_stage]));
                } else {
                    prop_assert!(s.active_tcqb.is_none());
                }
                last_stage = s.active_stage;
            }
            // long enough schedules end on the completed network
            if epochs > 5 * rho {
                prop_assert_eq!(s.stage(), Stage::Post);
            }
        }
    }
}
