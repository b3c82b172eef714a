//! Phase-level integration checks: classifier learning on the synthetic
//! blob set, the ablated schedule, the pinned grayscale baseline, and the
//! stored-luminance paths.

mod common;

use chromacaps_core::colorspace::{rgb_to_lab, split_luminance, GamutGrid};
use chromacaps_core::evaluation::{psnr, ssim, zero_chroma_scores, PSNR_CAP_DB};
use chromacaps_core::network::{init_model, ModelState, NetworkConfig, NetworkPlan};
use chromacaps_core::pipeline::{
    archive_luminance_depth, ingest_dataset, read_l_png, to_train_samples, write_rgb_png,
    DatasetLayout, LuminanceDepth,
};
use chromacaps_core::training::{train_classifier, train_end2end, TrainOptions};

/// Seven-class blob set reaches 95% training accuracy within the published
/// epoch budget.
#[test]
fn classifier_blobs_reach_95_percent_within_20_epochs() {
    let plan = NetworkPlan::build(NetworkConfig::desk(17, 7)).unwrap();
    let mut state = ModelState::init(&plan, 1);
    let samples = common::labeled_blob_set(7, 6, 32);
    let opts = TrainOptions {
        batch_size: 8,
        seed: 1,
        ..TrainOptions::default()
    };
    let acc = train_classifier(&mut state, &samples, &plan.config, 20, &opts, |_| {}).unwrap();
    let best = acc.iter().cloned().fold(0.0f64, f64::max);
    assert!(
        best >= 0.95,
        "accuracy only reached {best} within 20 epochs: {acc:?}"
    );
}

/// With the progressive schedule ablated, training starts on the completed
/// network: the first (and only) stage callback reports the final stage.
#[test]
fn no_progl_starts_at_the_final_stage() {
    let mut grid = GamutGrid::build(10.0).unwrap();
    let mut cfg = NetworkConfig::desk(grid.bin_count(), 3);
    cfg.flags.use_progl = false;
    let plan = NetworkPlan::build(cfg).unwrap();
    let mut state = init_model(&plan, &grid, 3);
    let samples = common::smooth_sample_set(2, 32);
    let opts = TrainOptions {
        batch_size: 2,
        seed: 3,
        ..TrainOptions::default()
    };
    chromacaps_core::training::fit_rarity_weights(&mut grid, &samples, plan.pre_hw, 0.5, &opts)
        .unwrap();
    let clf_before = state.digest_of(|n| n.starts_with("clf."));
    let mut stages = Vec::new();
    train_end2end(
        &mut state,
        &samples,
        &grid,
        &plan.config,
        1,
        2,
        &opts,
        |_| {},
        |_, epoch, stage| stages.push((epoch, stage.to_string())),
    )
    .unwrap();
    assert_eq!(stages, vec![(0, "post".to_string())]);
    // the frozen classifier is bit-identical after end-to-end training
    assert_eq!(clf_before, state.digest_of(|n| n.starts_with("clf.")));
}

/// Inference state and the gamut grid are plain data: shareable across
/// threads for concurrent evaluation over a frozen model.
#[test]
fn shared_inference_types_are_send_and_sync() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<GamutGrid>();
    assert_send_sync::<ModelState>();
    assert_send_sync::<NetworkPlan>();
}

/// Grayscale reconstruction scores for the standard overfit image, pinned
/// as the regression floor that any trained model must beat.
#[test]
fn zero_chroma_baseline_is_pinned() {
    let truth = common::smooth_color_image(5, 32);
    let (p, s) = zero_chroma_scores(&truth).unwrap();
    assert!((p - 12.257544).abs() < 1e-3, "baseline psnr {p}");
    assert!((s - 0.429996).abs() < 1e-3, "baseline ssim {s}");
}

/// An oracle that emits the true chroma drives the metrics to their
/// ceilings: PSNR hits the cap and SSIM is one to float precision.
#[test]
fn oracle_chroma_saturates_the_metrics() {
    let truth = common::smooth_color_image(8, 32);
    let lab = rgb_to_lab(&truth);
    let (_, ab) = split_luminance(&lab);
    let composite = chromacaps_core::colorspace::compose_with_luminance(&lab, &ab).unwrap();
    let rendered = chromacaps_core::colorspace::lab_to_rgb(&composite);
    assert_eq!(psnr(&rendered, &truth).unwrap(), PSNR_CAP_DB);
    assert!(ssim(&rendered, &truth).unwrap() > 1.0 - 1e-9);
}

/// The 16-bit storage option round-trips more finely than 8-bit and keeps
/// the exact 1/3 raw payload ratio.
#[test]
fn sixteen_bit_luminance_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let color = dir.path().join("c.png");
    write_rgb_png(&color, &common::smooth_color_image(2, 24)).unwrap();
    let out8 = dir.path().join("l8.png");
    let out16 = dir.path().join("l16.png");
    let r8 = archive_luminance_depth(&color, &out8, LuminanceDepth::Bits8).unwrap();
    let r16 = archive_luminance_depth(&color, &out16, LuminanceDepth::Bits16).unwrap();
    assert!((r8.raw_ratio() - 1.0 / 3.0).abs() < 1e-15);
    assert!((r16.raw_ratio() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r16.raw_luminance_bytes, 2 * r8.raw_luminance_bytes);

    // compare against the luminance of the colour file as stored on disk
    // (the PNG itself is 8-bit quantised)
    let lab = rgb_to_lab(&chromacaps_core::pipeline::read_rgb_png(&color).unwrap());
    let l16 = read_l_png(&out16).unwrap();
    let l8 = read_l_png(&out8).unwrap();
    let mut err16: f64 = 0.0;
    let mut err8: f64 = 0.0;
    for (i, truth) in lab.l().iter().enumerate() {
        err16 = err16.max((l16.data()[i] * 100.0 - truth).abs());
        err8 = err8.max((l8.data()[i] * 100.0 - truth).abs());
    }
    assert!(err16 <= 100.0 / 65535.0 + 1e-9, "16-bit error {err16}");
    assert!(err8 <= 100.0 / 255.0 + 1e-9, "8-bit error {err8}");
    assert!(err16 < err8);
}

/// A `<stem>.l.png` companion feeds the network input while the colour
/// image still provides the chroma targets.
#[test]
fn stored_luminance_companions_are_used() {
    let dir = tempfile::tempdir().unwrap();
    let img = common::smooth_color_image(4, 32);
    write_rgb_png(&dir.path().join("a.png"), &img).unwrap();
    archive_luminance_depth(
        &dir.path().join("a.png"),
        &dir.path().join("a.l.png"),
        LuminanceDepth::Bits8,
    )
    .unwrap();
    write_rgb_png(
        &dir.path().join("b.png"),
        &common::smooth_color_image(6, 32),
    )
    .unwrap();

    let ds = ingest_dataset(dir.path(), DatasetLayout::Paired).unwrap();
    // the companion is not a standalone item
    assert_eq!(ds.items.len(), 2);
    assert!(ds.items[0].stored_l.is_some());
    assert!(ds.items[1].stored_l.is_none());

    let samples = to_train_samples(&ds, 32);
    // sample 0's luminance is 8-bit quantised (from the stored file), so it
    // sits on the 1/255 grid; sample 1's is the derived float plane
    let quantised = samples[0]
        .l
        .data()
        .iter()
        .all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9);
    assert!(quantised, "stored-L input should be on the 8-bit grid");
    // match the derived plane of the on-disk colour image to one 8-bit level
    let reread = chromacaps_core::pipeline::read_rgb_png(&dir.path().join("a.png")).unwrap();
    let lab_disk = rgb_to_lab(&reread);
    let (derived_disk, _) = split_luminance(&lab_disk);
    let close = samples[0]
        .l
        .data()
        .iter()
        .zip(derived_disk.data())
        .all(|(a, b)| (a - b).abs() < 0.5 / 255.0 + 1e-9);
    assert!(
        close,
        "stored-L input should match the derived plane to 8-bit"
    );
}

/// The split 3x3/1x1 convolution variant is differentiable end to end.
#[test]
fn heterogeneous_block_is_differentiable() {
    use chromacaps_core::gradcheck::GradCheck;
    use chromacaps_core::tensor::Tensor;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::randn(&[4, 4, 4], 0.6, &mut rng);
    let w3 = Tensor::randn(&[3, 2, 3, 3], 0.4, &mut rng);
    let w1 = Tensor::randn(&[3, 2, 1, 1], 0.4, &mut rng);
    GradCheck::new(1e-3, 1e-3)
        .inputs(&[("x", &x), ("w3", &w3), ("w1", &w1)])
        .run(|g, vars| {
            // same composition the network uses for the variant: the first
            // channel half convolves 3x3, the second 1x1, summed before
            // normalisation
            let wide = g.slice_channels(vars[0], 0, 2);
            let b = g.leaf(Tensor::zeros(&[3]));
            let y3 = g.conv2d(wide, vars[1], b, 1, 1, 1);
            let narrow = g.slice_channels(vars[0], 2, 4);
            let zb = g.leaf(Tensor::zeros(&[3]));
            let y1 = g.conv2d(narrow, vars[2], zb, 1, 0, 1);
            let summed = g.add(y3, y1);
            let n = g.instance_norm(summed, 1e-5);
            let r = g.relu(n);
            let sq = g.mul(r, r);
            g.sum_all(sq)
        });
}

/// With gan_keep_e2e enabled, the adversarial phase trains against the
/// reconstruction losses too; the reported total strictly exceeds the
/// adversarial pair alone.
#[test]
fn gan_phase_can_keep_reconstruction_losses() {
    use chromacaps_core::training::{train_gan, LossReport, PerceptualExtractor};
    let mut grid = GamutGrid::build(10.0).unwrap();
    let plan = NetworkPlan::build(NetworkConfig::desk(grid.bin_count(), 3)).unwrap();
    let mut state = init_model(&plan, &grid, 31);
    let samples = common::smooth_sample_set(2, 32);
    let opts = TrainOptions {
        batch_size: 2,
        seed: 31,
        gan_keep_e2e: true,
        ..TrainOptions::default()
    };
    chromacaps_core::training::fit_rarity_weights(&mut grid, &samples, plan.pre_hw, 0.5, &opts)
        .unwrap();
    let extractor = PerceptualExtractor::fixed(plan.config.bins, 8, 31);
    let mut components: Vec<(String, f64)> = Vec::new();
    train_gan(
        &mut state,
        &samples,
        &grid,
        &plan.config,
        1,
        &opts,
        &extractor,
        |r: &LossReport| components.push((r.component.to_string(), r.value)),
    )
    .unwrap();
    let get = |name: &str| components.iter().find(|(n, _)| n == name).unwrap().1;
    let total = get("total");
    let pair = get("adv") + get("perc");
    assert!(
        total > pair + 1e-9,
        "total {total} should exceed adv+perc {pair} when reconstruction losses are kept"
    );
}

/// Flags for the adversarial phase and the growth heads change only their
/// own parameter tails: the shared forward pass is bit-identical with or
/// without them.
#[test]
fn gan_and_progl_flags_leave_the_shared_forward_untouched() {
    use chromacaps_core::network::full_forward;
    use chromacaps_core::Tensor;
    let grid = GamutGrid::build(10.0).unwrap();
    let l = Tensor::full(&[1, 32, 32], 0.4);

    let base = {
        let plan = NetworkPlan::build(NetworkConfig::desk(grid.bin_count(), 3)).unwrap();
        let state = init_model(&plan, &grid, 11);
        full_forward(&state, &plan.config, &l)
    };
    for mutate in [
        (|c: &mut NetworkConfig| c.flags.use_gan = false) as fn(&mut NetworkConfig),
        |c| c.flags.use_progl = false,
        |c| {
            c.flags.use_gan = false;
            c.flags.use_progl = false;
        },
    ] {
        let mut cfg = NetworkConfig::desk(grid.bin_count(), 3);
        mutate(&mut cfg);
        let plan = NetworkPlan::build(cfg).unwrap();
        let state = init_model(&plan, &grid, 11);
        let (ab, logits) = full_forward(&state, &plan.config, &l);
        assert_eq!(ab, base.0, "shared forward changed under an unrelated flag");
        assert_eq!(logits, base.1);
    }
}
