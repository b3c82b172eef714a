//! Command line front end for the colourisation pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use chromacaps_core::colorspace::{lab_to_rgb_with_stats, recombine, AbPlanes};
use chromacaps_core::evaluation::evaluate_dataset_featured;
use chromacaps_core::network::{full_forward, init_model, NetworkPlan, Phase};
use chromacaps_core::pipeline::{
    archive_luminance_depth, config_digest, ingest_dataset, load_checkpoint, load_gamut_table,
    read_l_png, resize_l, save_checkpoint, save_gamut_table, to_labeled_samples, to_train_samples,
    DatasetLayout, LuminanceDepth, RunConfig,
};
use chromacaps_core::training::{
    fit_rarity_weights, train_classifier, train_end2end, train_gan, LossReport,
    PerceptualExtractor, REPORT_HEADER,
};
use chromacaps_core::GamutGrid;

#[derive(Parser)]
#[command(
    name = "chromacaps",
    about = "Chrominance reconstruction for luminance-only imagery",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for initialisation and data ordering
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Scale preset
    #[arg(long, global = true, value_parser = ["desk", "reference"])]
    scale: Option<String>,

    /// Ablation: replace the capsule path with a 1x1 channel adapter
    #[arg(long = "no-capsules", global = true)]
    no_capsules: bool,

    /// Ablation: drop the parallel classifier branch
    #[arg(long = "no-classifier", global = true)]
    no_classifier: bool,

    /// Ablation: train the completed network from the start
    #[arg(long = "no-progl", global = true)]
    no_progl: bool,

    /// Ablation: skip the adversarial phase (drops the discriminator)
    #[arg(long = "no-gan", global = true)]
    no_gan: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier on a directory with one subdirectory per class
    TrainClassifier {
        /// labeled dataset root
        #[arg(long)]
        data: PathBuf,
        /// checkpoint to write
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// loss report CSV (defaults to stdout)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Progressive end-to-end training on a directory of colour images
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// resume from an existing checkpoint
        #[arg(long)]
        from: Option<PathBuf>,
        /// adopt the classifier parameters of this checkpoint
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        rho: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Adversarial refinement of an end-to-end checkpoint
    TrainGan {
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// checkpoint to refine
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reconstruct colour for a stored luminance image
    Colorize {
        /// single-channel luminance file
        input: PathBuf,
        /// RGB output image
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// also dump the raw chroma prediction as text
        #[arg(long)]
        dump_ab: Option<PathBuf>,
    },
    /// Score a model against ground-truth colour images
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// metrics CSV (defaults to stdout)
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// fill the reserved feature-distance column
        #[arg(long)]
        features: bool,
    },
    /// Store the luminance channel of a colour image
    Archive {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// stored sample width
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(usize))]
        bits: usize,
    },
    /// Build the gamut bin table
    Gamut {
        /// table file (defaults to stdout)
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// chroma bin width
        #[arg(long)]
        bin: Option<f64>,
        /// load an existing table instead of building one
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Resolves the run configuration: scale preset, then config file keys,
/// then command line overrides.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(scale) = &cli.scale {
        if cli.config.is_none() {
            // no file: the flag selects the whole preset
            cfg = RunConfig::from_str_contents(&format!("scale = {scale}\n"))?;
        } else {
            cfg.apply_kv("scale", scale)?;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.no_capsules {
        cfg.flags.use_capsules = false;
    }
    if cli.no_classifier {
        cfg.flags.use_classifier = false;
    }
    if cli.no_progl {
        cfg.flags.use_progl = false;
    }
    if cli.no_gan {
        cfg.flags.use_gan = false;
    }
    Ok(cfg)
}

fn build_grid(cfg: &RunConfig) -> Result<GamutGrid> {
    GamutGrid::build(cfg.bin_size).context("gamut discovery failed")
}

fn make_plan(cfg: &RunConfig, grid: &GamutGrid) -> Result<NetworkPlan> {
    NetworkPlan::build(cfg.network(grid.bin_count())).context("invalid network configuration")
}

/// Loss reports stream to a CSV file or stdout.
struct Reporter {
    out: Box<dyn std::io::Write>,
}

impl Reporter {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let mut out: Box<dyn std::io::Write> = match path {
            Some(p) => Box::new(
                fs::File::create(p).with_context(|| format!("creating report {}", p.display()))?,
            ),
            None => Box::new(std::io::stdout()),
        };
        writeln!(out, "{REPORT_HEADER}")?;
        Ok(Reporter { out })
    }

    fn sink(&mut self) -> impl FnMut(&LossReport) + '_ {
        move |r| {
            let _ = writeln!(self.out, "{}", r.csv_line());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Gamut { out, bin, table } => {
            let grid = match table {
                Some(path) => load_gamut_table(path)?,
                None => GamutGrid::build(bin.unwrap_or(cfg.bin_size))
                    .context("gamut discovery failed")?,
            };
            match out {
                Some(path) => {
                    save_gamut_table(&grid, path)?;
                    println!("Q = {}", grid.bin_count());
                }
                None => {
                    print!("{}", grid.to_table());
                    eprintln!("Q = {}", grid.bin_count());
                }
            }
            Ok(())
        }
        Command::Archive { input, out, bits } => {
            let depth = LuminanceDepth::from_bits(*bits)
                .ok_or_else(|| anyhow::anyhow!("--bits must be 8 or 16"))?;
            let report = archive_luminance_depth(input, out, depth)?;
            println!(
                "{}x{} image: {} raw luminance bytes vs {} raw colour bytes (ratio {:.6}, exactly 1/3)",
                report.width,
                report.height,
                report.raw_luminance_bytes,
                report.raw_color_bytes,
                report.raw_ratio()
            );
            println!(
                "stored file {} bytes, source file {} bytes (compressed sizes, informative only)",
                report.stored_file_bytes, report.source_file_bytes
            );
            Ok(())
        }
        Command::TrainClassifier {
            data,
            out,
            epochs,
            report,
        } => {
            let grid = build_grid(&cfg)?;
            let plan = make_plan(&cfg, &grid)?;
            print!("{}", plan.report());
            let dataset = ingest_dataset(data, DatasetLayout::Labeled)?;
            report_rejects(&dataset.rejects);
            if dataset.class_names.len() != cfg.classes {
                bail!(
                    "dataset has {} classes, configuration expects {}",
                    dataset.class_names.len(),
                    cfg.classes
                );
            }
            let samples = to_labeled_samples(&dataset, plan.config.input_size);
            let mut state = init_model(&plan, &grid, cfg.seed);
            let mut reporter = Reporter::open(report)?;
            let acc = train_classifier(
                &mut state,
                &samples,
                &plan.config,
                epochs.unwrap_or(cfg.epochs_class),
                &cfg.train_options(),
                reporter.sink(),
            )?;
            if let Some(final_acc) = acc.last() {
                eprintln!("final training accuracy {final_acc:.3}");
            }
            save_checkpoint(&state, &plan.config, out)?;
            eprintln!("saved {}", out.display());
            Ok(())
        }
        Command::Train {
            data,
            out,
            from,
            classifier,
            epochs,
            rho,
            report,
        } => {
            let mut grid = build_grid(&cfg)?;
            let plan = make_plan(&cfg, &grid)?;
            print!("{}", plan.report());
            let dataset = ingest_dataset(data, DatasetLayout::Paired)?;
            report_rejects(&dataset.rejects);
            let samples = to_train_samples(&dataset, plan.config.input_size);
            let mut state = match from {
                Some(path) => load_checkpoint(path, &plan)?,
                None => init_model(&plan, &grid, cfg.seed),
            };
            if let Some(path) = classifier {
                let donor = load_checkpoint(path, &plan)?;
                state.adopt_classifier(&donor);
            }
            fit_rarity_weights(
                &mut grid,
                &samples,
                plan.pre_hw,
                cfg.lambda_rebalance,
                &cfg.train_options(),
            )?;
            save_gamut_table(&grid, &out.with_extension("gamut"))?;
            let mut reporter = Reporter::open(report)?;
            let stage_dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let stem = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".to_string());
            let stage_cfg = plan.config.clone();
            train_end2end(
                &mut state,
                &samples,
                &grid,
                &plan.config,
                rho.unwrap_or(cfg.rho),
                epochs.unwrap_or(cfg.epochs_end2end),
                &cfg.train_options(),
                reporter.sink(),
                |state, epoch, stage| {
                    let path = stage_dir.join(format!("{stem}.stage-{stage}-e{epoch}.uwpc"));
                    if let Err(e) = save_checkpoint(state, &stage_cfg, &path) {
                        eprintln!("warning: stage checkpoint failed: {e}");
                    }
                },
            )?;
            save_checkpoint(&state, &plan.config, out)?;
            eprintln!("saved {}", out.display());
            Ok(())
        }
        Command::TrainGan {
            data,
            out,
            from,
            epochs,
            report,
        } => {
            if !cfg.flags.use_gan {
                bail!("the adversarial phase is disabled by --no-gan / use_gan=false");
            }
            let mut grid = build_grid(&cfg)?;
            let plan = make_plan(&cfg, &grid)?;
            print!("{}", plan.report());
            let dataset = ingest_dataset(data, DatasetLayout::Paired)?;
            report_rejects(&dataset.rejects);
            let samples = to_train_samples(&dataset, plan.config.input_size);
            let mut state = load_checkpoint(from, &plan)?;
            fit_rarity_weights(
                &mut grid,
                &samples,
                plan.pre_hw,
                cfg.lambda_rebalance,
                &cfg.train_options(),
            )?;
            let extractor = PerceptualExtractor::fixed(plan.config.bins, 16, cfg.seed);
            let mut reporter = Reporter::open(report)?;
            train_gan(
                &mut state,
                &samples,
                &grid,
                &plan.config,
                epochs.unwrap_or(cfg.epochs_gan),
                &cfg.train_options(),
                &extractor,
                reporter.sink(),
            )?;
            save_checkpoint(&state, &plan.config, out)?;
            eprintln!("saved {}", out.display());
            Ok(())
        }
        Command::Colorize {
            input,
            out,
            model,
            dump_ab,
        } => {
            let grid = build_grid(&cfg)?;
            let plan = make_plan(&cfg, &grid)?;
            let state = load_checkpoint(model, &plan)?;
            eprintln!("model phase: {}", state.phase.tag());
            if state.phase == Phase::Classifier {
                eprintln!("note: model has only been through classifier training");
            }
            let l = read_l_png(input)?;
            let l = resize_l(&l, plan.config.input_size);
            let (ab, _) = full_forward(&state, &plan.config, &l);
            if let Some(path) = dump_ab {
                dump_chroma(path, &ab)?;
            }
            let lab = recombine(&l, &ab).expect("network preserves spatial dims");
            let (rgb, clipped) = lab_to_rgb_with_stats(&lab);
            if clipped > 0 {
                eprintln!("{clipped} pixels clipped into the displayable range");
            }
            chromacaps_core::pipeline::write_rgb_png(out, &rgb)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            data,
            model,
            out,
            features,
        } => {
            let grid = build_grid(&cfg)?;
            let plan = make_plan(&cfg, &grid)?;
            let state = load_checkpoint(model, &plan)?;
            let dataset = ingest_dataset(data, DatasetLayout::Paired)?;
            report_rejects(&dataset.rejects);
            let images: Vec<(String, chromacaps_core::RgbImage)> = dataset
                .items
                .iter()
                .map(|item| {
                    (
                        item.name.clone(),
                        chromacaps_core::pipeline::resize_rgb(&item.image, plan.config.input_size),
                    )
                })
                .collect();
            let model_id = format!("{:016x}", config_digest(&plan.config));
            let extractor = features.then(|| PerceptualExtractor::fixed(3, 16, cfg.seed));
            let report = evaluate_dataset_featured(
                &state,
                &plan.config,
                &images,
                &model_id,
                extractor.as_ref(),
            )?;
            match out {
                Some(path) => fs::write(path, report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
            eprintln!(
                "mean psnr {:.3} dB, mean ssim {:.4} over {} images",
                report.psnr_mean,
                report.ssim_mean,
                report.rows.len()
            );
            Ok(())
        }
    }
}

fn report_rejects(rejects: &[(PathBuf, String)]) {
    for (path, why) in rejects {
        eprintln!("rejected {}: {}", path.display(), why);
    }
}

/// Raw chroma dump: `ab v1 <h> <w>` then one `a b` line per pixel.
fn dump_chroma(path: &Path, ab: &AbPlanes) -> Result<()> {
    let mut text = format!("ab v1 {} {}\n", ab.height(), ab.width());
    for i in 0..ab.a.len() {
        text.push_str(&format!("{} {}\n", ab.a.data()[i], ab.b.data()[i]));
    }
    fs::write(path, text)?;
    Ok(())
}
