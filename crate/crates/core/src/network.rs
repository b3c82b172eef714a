//! Full network assembly: encoder, classifier branch, capsule bottleneck,
//! decoder with skips, quantisation heads and the discriminator.
//!
//! `NetworkConfig` describes the whole architecture; `NetworkPlan` runs the
//! shape algebra once at construction, producing the parameter inventory,
//! the named activation shapes and any spatial departures worth logging.
//! `ModelState` owns the parameter tensors; forward functions bind them
//! into a tape through a `NetSession`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocks::{
    self, ConvBlockVars, ConvVars, DiscriminatorSpec, DiscriminatorVars, QuantHeadVars,
};
use crate::capsules::{self, CapsuleLayout};
use crate::colorspace::AbPlanes;
use crate::graph::{conv_out_size, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("input size {0} must be a multiple of 4 and at least 8")]
    BadInputSize(usize),
    #[error("channel count must be at least 1 (got {0})")]
    BadChannels(usize),
    #[error("stride {0} unsupported; only 1 and 2 are used")]
    BadStride(usize),
    #[error("spatial extent collapsed to zero at {0}")]
    CollapsedSpatial(String),
    #[error("decoder ladder entry {0} must be at least 1")]
    BadLadder(usize),
    #[error("capsule layout invalid: {0}")]
    BadCapsules(String),
    #[error("classifier needs at least one block and one class")]
    BadClassifier,
    #[error("discriminator produces no output patches for input {0}")]
    BadDiscriminator(usize),
    #[error("bin count {0} must be at least 2")]
    BadBins(usize),
}

/// Ablation switches; the full model has everything enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_capsules: bool,
    pub use_classifier: bool,
    pub use_progl: bool,
    pub use_gan: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_capsules: true,
            use_classifier: true,
            use_progl: true,
            use_gan: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalePreset {
    Desk,
    Reference,
}

/// Classifier branch: conv blocks followed by global average pooling and a
/// linear head over the class logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    /// (out_channels, stride) per Conv-IN-ReLU block
    pub blocks: Vec<(usize, usize)>,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// channels of the preprocessing output (and of the post block, whose
    /// output must sum with it)
    pub preb_channels: usize,
    /// encoder double-block output channels in application order
    pub dbd_channels: [usize; 4],
    pub dbd_strides: [usize; 4],
    /// decoder double-block output channels in application order
    pub dbu_channels: [usize; 4],
    /// decoder spatial ladder (output size of each decoder stage)
    pub dbu_sizes: [usize; 4],
    pub capsules: CapsuleLayout,
    pub classifier: ClassifierSpec,
    pub discriminator: DiscriminatorSpec,
    /// gamut bin count Q; the quantisation heads emit this many logits
    pub bins: usize,
    pub flags: AblationFlags,
    /// split double-block convolutions into a 3x3 and a 1x1 channel group
    pub heterogeneous_conv: bool,
}

impl NetworkConfig {
    /// Small configuration that exercises every mechanism in minutes.
    pub fn desk(bins: usize, classes: usize) -> Self {
        NetworkConfig {
            input_size: 32,
            preb_channels: 8,
            dbd_channels: [16, 32, 64, 64],
            dbd_strides: [2, 2, 1, 1],
            dbu_channels: [16, 16, 8, 8],
            dbu_sizes: [4, 5, 6, 7],
            capsules: CapsuleLayout {
                count_in: 4,
                count_out: 4,
                conv_channels: 4,
                conv_stride: 1,
                pose_channels: 8,
                routing_iterations: 3,
                tconv_channels: 4,
            },
            classifier: ClassifierSpec {
                blocks: vec![(8, 2), (16, 2), (32, 2), (64, 2)],
                classes,
            },
            discriminator: DiscriminatorSpec::desk(),
            bins,
            flags: AblationFlags::default(),
            heterogeneous_conv: false,
        }
    }

    /// Full-scale configuration matching the published channel contracts.
    pub fn reference(bins: usize, classes: usize) -> Self {
        NetworkConfig {
            input_size: 224,
            preb_channels: 32,
            dbd_channels: [64, 128, 256, 512],
            dbd_strides: [2, 2, 2, 1],
            dbu_channels: [256, 128, 64, 64],
            dbu_sizes: [16, 20, 24, 28],
            capsules: CapsuleLayout {
                count_in: 32,
                count_out: 32,
                conv_channels: 128,
                conv_stride: 2,
                pose_channels: 128,
                routing_iterations: 3,
                tconv_channels: 4,
            },
            classifier: ClassifierSpec {
                blocks: vec![(32, 2), (64, 2), (128, 2), (256, 2)],
                classes,
            },
            discriminator: DiscriminatorSpec::reference(),
            bins,
            flags: AblationFlags::default(),
            heterogeneous_conv: false,
        }
    }

    pub fn preset(scale: ScalePreset, bins: usize, classes: usize) -> Self {
        match scale {
            ScalePreset::Desk => Self::desk(bins, classes),
            ScalePreset::Reference => Self::reference(bins, classes),
        }
    }
}

// ---------------------------------------------------------------------------
// plan: shape algebra, inventory, departures
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// zero-mean normal scaled by sqrt(2 / fan_in)
    HeNormal {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Zero,
    One,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// The resolved shape algebra of a configuration.
#[derive(Clone, Debug)]
pub struct NetworkPlan {
    pub config: NetworkConfig,
    pub inventory: Vec<ParamSpec>,
    pub activations: Vec<(String, Vec<usize>)>,
    pub departures: Vec<String>,
    /// spatial sizes: preprocessing grid, deepest encoder grid, capsule grid
    pub pre_hw: usize,
    pub deep_hw: usize,
    pub caps_hw: usize,
    /// spatial size of the initial reconstruction consumed by the decoder
    pub recon_hw: usize,
}

fn conv3(in_size: usize, stride: usize) -> usize {
    conv_out_size(in_size, 3, stride, 1, 1)
}

impl NetworkPlan {
    pub fn build(config: NetworkConfig) -> Result<Self, ShapeError> {
        let cfg = &config;
        if cfg.input_size < 8 || cfg.input_size % 4 != 0 {
            return Err(ShapeError::BadInputSize(cfg.input_size));
        }
        if cfg.bins < 2 {
            return Err(ShapeError::BadBins(cfg.bins));
        }
        if cfg.preb_channels == 0 {
            return Err(ShapeError::BadChannels(0));
        }
        for &c in cfg.dbd_channels.iter().chain(cfg.dbu_channels.iter()) {
            if c == 0 {
                return Err(ShapeError::BadChannels(c));
            }
        }
        for &s in &cfg.dbd_strides {
            if s == 0 || s > 2 {
                return Err(ShapeError::BadStride(s));
            }
        }
        for &s in &cfg.dbu_sizes {
            if s == 0 {
                return Err(ShapeError::BadLadder(s));
            }
        }
        let caps = &cfg.capsules;
        if caps.count_in == 0
            || caps.count_out == 0
            || caps.conv_channels == 0
            || caps.pose_channels == 0
            || caps.tconv_channels == 0
            || caps.routing_iterations == 0
        {
            return Err(ShapeError::BadCapsules(
                "zero extent in capsule layout".into(),
            ));
        }
        if caps.conv_stride == 0 || caps.conv_stride > 2 {
            return Err(ShapeError::BadStride(caps.conv_stride));
        }
        if cfg.classifier.blocks.is_empty() || cfg.classifier.classes == 0 {
            return Err(ShapeError::BadClassifier);
        }
        for &(c, s) in &cfg.classifier.blocks {
            if c == 0 {
                return Err(ShapeError::BadChannels(c));
            }
            if s == 0 || s > 2 {
                return Err(ShapeError::BadStride(s));
            }
        }
        if cfg.flags.use_gan {
            if cfg.discriminator.layers.is_empty() {
                return Err(ShapeError::BadDiscriminator(cfg.input_size));
            }
            for &(c, s) in &cfg.discriminator.layers {
                if c == 0 {
                    return Err(ShapeError::BadChannels(c));
                }
                if s == 0 || s > 2 {
                    return Err(ShapeError::BadStride(s));
                }
            }
            let mut s = cfg.input_size;
            for (_, stride) in &cfg.discriminator.layers {
                if s + 2 < 4 {
                    return Err(ShapeError::BadDiscriminator(cfg.input_size));
                }
                s = conv_out_size(s, 4, *stride, 1, 1);
            }
            if s + 2 < 4 || conv_out_size(s, 4, 1, 1, 1) == 0 {
                return Err(ShapeError::BadDiscriminator(cfg.input_size));
            }
        }

        let mut activations = Vec::new();
        let mut inventory = Vec::new();
        let s_in = cfg.input_size;
        activations.push(("input".to_string(), vec![1, s_in, s_in]));

        // preprocessing: conv stride 2 + maxpool -> quarter resolution
        let after_conv = conv3(s_in, 2);
        if after_conv < 2 {
            return Err(ShapeError::CollapsedSpatial("pre".into()));
        }
        let pre_hw = after_conv / 2;
        push_conv_block(&mut inventory, "pre", 1, cfg.preb_channels);
        activations.push(("pre".to_string(), vec![cfg.preb_channels, pre_hw, pre_hw]));

        // encoder chain
        let mut enc_hw = [0usize; 4];
        let mut hw = pre_hw;
        let mut cin = cfg.preb_channels;
        for i in 0..4 {
            hw = conv3(hw, cfg.dbd_strides[i]);
            if hw == 0 {
                return Err(ShapeError::CollapsedSpatial(format!("enc{i}")));
            }
            enc_hw[i] = hw;
            push_double_block(
                &mut inventory,
                &format!("enc{i}"),
                cin,
                cfg.dbd_channels[i],
                cfg.heterogeneous_conv,
            );
            activations.push((format!("enc{i}"), vec![cfg.dbd_channels[i], hw, hw]));
            cin = cfg.dbd_channels[i];
        }
        let deep_hw = enc_hw[3];
        let deep_c = cfg.dbd_channels[3];

        // classifier branch
        let p = cfg.classifier.classes;
        if cfg.flags.use_classifier {
            let mut chw = s_in;
            let mut ccin = 3;
            for (i, (ch, stride)) in cfg.classifier.blocks.iter().enumerate() {
                chw = conv3(chw, *stride);
                if chw == 0 {
                    return Err(ShapeError::CollapsedSpatial(format!("clf.b{i}")));
                }
                push_conv_block(&mut inventory, &format!("clf.b{i}"), ccin, *ch);
                ccin = *ch;
            }
            inventory.push(ParamSpec {
                name: "clf.head.w".into(),
                shape: vec![p, ccin],
                init: InitKind::HeNormal { fan_in: ccin },
            });
            inventory.push(ParamSpec {
                name: "clf.head.b".into(),
                shape: vec![p],
                init: InitKind::Zero,
            });
            activations.push(("class_vector".to_string(), vec![p]));
        }

        // enriched deep features
        let enriched_c = deep_c + if cfg.flags.use_classifier { p } else { 0 };
        activations.push(("enriched".to_string(), vec![enriched_c, deep_hw, deep_hw]));

        // capsule path (or channel adapter)
        let caps_hw = conv3(deep_hw, caps.conv_stride);
        if caps_hw == 0 {
            return Err(ShapeError::CollapsedSpatial("capsules".into()));
        }
        let recon_c = caps.count_in * caps.tconv_channels;
        let recon_hw = if cfg.flags.use_capsules {
            for i in 0..caps.count_in {
                inventory.push(ParamSpec {
                    name: format!("caps.pc{i}.w"),
                    shape: vec![caps.conv_channels, enriched_c, 3, 3],
                    init: InitKind::HeNormal {
                        fan_in: enriched_c * 9,
                    },
                });
                inventory.push(ParamSpec {
                    name: format!("caps.pc{i}.b"),
                    shape: vec![caps.conv_channels],
                    init: InitKind::Zero,
                });
            }
            inventory.push(ParamSpec {
                name: "caps.predict.w".into(),
                shape: vec![
                    caps.count_in,
                    caps.count_out,
                    caps.conv_channels,
                    caps.conv_channels,
                ],
                init: InitKind::Normal { std: 0.1 },
            });
            if caps.pose_channels != caps.conv_channels {
                inventory.push(ParamSpec {
                    name: "caps.lift.w".into(),
                    shape: vec![caps.count_out, caps.pose_channels, caps.conv_channels],
                    init: InitKind::Normal { std: 0.1 },
                });
            }
            inventory.push(ParamSpec {
                name: "caps.reverse.w".into(),
                shape: vec![
                    caps.count_out,
                    caps.count_in,
                    caps.conv_channels,
                    caps.pose_channels,
                ],
                init: InitKind::Normal { std: 0.1 },
            });
            for i in 0..caps.count_in {
                inventory.push(ParamSpec {
                    name: format!("caps.tconv{i}.w"),
                    shape: vec![caps.conv_channels, caps.tconv_channels, 2, 2],
                    init: InitKind::HeNormal {
                        fan_in: caps.conv_channels * 4,
                    },
                });
                inventory.push(ParamSpec {
                    name: format!("caps.tconv{i}.b"),
                    shape: vec![caps.tconv_channels],
                    init: InitKind::Zero,
                });
            }
            let bank_p = caps_hw * caps_hw;
            activations.push((
                "capsule_bank".to_string(),
                vec![caps.count_in, bank_p, caps.conv_channels],
            ));
            activations.push((
                "poses".to_string(),
                vec![caps.count_out, bank_p, caps.pose_channels],
            ));
            caps_hw * 2
        } else {
            inventory.push(ParamSpec {
                name: "adapter.w".into(),
                shape: vec![recon_c, enriched_c, 1, 1],
                init: InitKind::HeNormal { fan_in: enriched_c },
            });
            inventory.push(ParamSpec {
                name: "adapter.b".into(),
                shape: vec![recon_c],
                init: InitKind::Zero,
            });
            deep_hw
        };
        activations.push(("recon".to_string(), vec![recon_c, recon_hw, recon_hw]));

        // decoder chain; stage i consumes the previous output concatenated
        // with the matching encoder skip (none for the first stage)
        let skip_c = [
            cfg.dbd_channels[3],
            cfg.dbd_channels[2],
            cfg.dbd_channels[1],
        ];
        let mut dec_in = recon_c;
        for i in 0..4 {
            push_double_block(
                &mut inventory,
                &format!("dec{i}"),
                dec_in,
                cfg.dbu_channels[i],
                cfg.heterogeneous_conv,
            );
            activations.push((
                format!("dec{i}"),
                vec![cfg.dbu_channels[i], cfg.dbu_sizes[i], cfg.dbu_sizes[i]],
            ));
            dec_in = cfg.dbu_channels[i];
            if i < 3 {
                dec_in += skip_c[i];
            }
        }

        // post block consumes cat(dec3, enc0) and restores the
        // preprocessing resolution and channel width for the residual sum
        push_conv_block(
            &mut inventory,
            "post",
            cfg.dbu_channels[3] + cfg.dbd_channels[0],
            cfg.preb_channels,
        );
        activations.push(("post".to_string(), vec![cfg.preb_channels, pre_hw, pre_hw]));

        // final quantisation head
        push_quant_head(&mut inventory, "head", cfg.preb_channels, cfg.bins);
        activations.push(("quant_logits".to_string(), vec![cfg.bins, pre_hw, pre_hw]));
        activations.push(("chroma".to_string(), vec![2, s_in, s_in]));

        // temporary heads, one per growth stage before the post block
        if cfg.flags.use_progl {
            push_quant_head(&mut inventory, "thead.cd", recon_c, cfg.bins);
            for i in 0..4 {
                push_quant_head(
                    &mut inventory,
                    &format!("thead.dbu{}", i + 1),
                    cfg.dbu_channels[i],
                    cfg.bins,
                );
            }
        }

        // discriminator
        if cfg.flags.use_gan {
            let mut din = 3;
            for (i, (ch, _)) in cfg.discriminator.layers.iter().enumerate() {
                inventory.push(ParamSpec {
                    name: format!("disc.c{i}.w"),
                    shape: vec![*ch, din, 4, 4],
                    init: InitKind::HeNormal { fan_in: din * 16 },
                });
                inventory.push(ParamSpec {
                    name: format!("disc.c{i}.b"),
                    shape: vec![*ch],
                    init: InitKind::Zero,
                });
                if i > 0 {
                    inventory.push(ParamSpec {
                        name: format!("disc.n{i}.g"),
                        shape: vec![*ch],
                        init: InitKind::One,
                    });
                    inventory.push(ParamSpec {
                        name: format!("disc.n{i}.b"),
                        shape: vec![*ch],
                        init: InitKind::Zero,
                    });
                }
                din = *ch;
            }
            inventory.push(ParamSpec {
                name: "disc.head.w".into(),
                shape: vec![1, din, 4, 4],
                init: InitKind::HeNormal { fan_in: din * 16 },
            });
            inventory.push(ParamSpec {
                name: "disc.head.b".into(),
                shape: vec![1],
                init: InitKind::Zero,
            });
        }

        // spatial departures of this ladder from the nominal full-scale
        // figures; pure stride arithmetic makes those figures unreachable
        let mut departures = Vec::new();
        if cfg.input_size == 224 && cfg.dbd_strides == [2, 2, 2, 1] {
            departures.push(format!(
                "deepest encoder feature is {dh}x{dh}x{dc}; a 16x16 grid is not reachable \
                 from 224x224 through /4 preprocessing and a stride-2 chain",
                dh = deep_hw,
                dc = deep_c
            ));
            departures.push(format!(
                "capsule poses sit on the {ch}x{ch} prediction grid ({k} values per pose) \
                 instead of an 8x8x128 grid",
                ch = caps_hw,
                k = caps_hw * caps_hw * caps.pose_channels
            ));
            departures.push(format!(
                "initial reconstruction enters the decoder at {r}x{r} per transposed-conv \
                 arithmetic rather than the tabulated 15x15",
                r = recon_hw
            ));
        }

        Ok(NetworkPlan {
            config,
            inventory,
            activations,
            departures,
            pre_hw,
            deep_hw,
            caps_hw,
            recon_hw,
        })
    }

    pub fn total_parameters(&self) -> usize {
        self.inventory
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn activation(&self, name: &str) -> Option<&[usize]> {
        self.activations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }

    /// Human-readable construction log.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "network: input {0}x{0}, {1} bins, {2} classes, {3} parameters\n",
            self.config.input_size,
            self.config.bins,
            self.config.classifier.classes,
            self.total_parameters()
        ));
        out.push_str("activations:\n");
        for (name, shape) in &self.activations {
            out.push_str(&format!("  {:<14} {:?}\n", name, shape));
        }
        if !self.departures.is_empty() {
            out.push_str("departures:\n");
            for d in &self.departures {
                out.push_str(&format!("  {}\n", d));
            }
        }
        out
    }
}

fn push_conv_block(inv: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    inv.push(ParamSpec {
        name: format!("{prefix}.conv.w"),
        shape: vec![cout, cin, 3, 3],
        init: InitKind::HeNormal { fan_in: cin * 9 },
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.conv.b"),
        shape: vec![cout],
        init: InitKind::Zero,
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.norm.g"),
        shape: vec![cout],
        init: InitKind::One,
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.norm.b"),
        shape: vec![cout],
        init: InitKind::Zero,
    });
}

fn push_het_conv(inv: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    let c3 = cin.div_ceil(2);
    let c1 = cin - c3;
    inv.push(ParamSpec {
        name: format!("{prefix}.conv.w3"),
        shape: vec![cout, c3, 3, 3],
        init: InitKind::HeNormal {
            fan_in: c3 * 9 + c1,
        },
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.conv.w1"),
        shape: vec![cout, c1, 1, 1],
        init: InitKind::HeNormal {
            fan_in: c3 * 9 + c1,
        },
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.conv.b"),
        shape: vec![cout],
        init: InitKind::Zero,
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.norm.g"),
        shape: vec![cout],
        init: InitKind::One,
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.norm.b"),
        shape: vec![cout],
        init: InitKind::Zero,
    });
}

fn push_double_block(inv: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, het: bool) {
    if het && cin >= 2 {
        push_het_conv(inv, &format!("{prefix}.1"), cin, cout);
    } else {
        push_conv_block(inv, &format!("{prefix}.1"), cin, cout);
    }
    if het && cout >= 2 {
        push_het_conv(inv, &format!("{prefix}.2"), cout, cout);
    } else {
        push_conv_block(inv, &format!("{prefix}.2"), cout, cout);
    }
}

fn push_quant_head(inv: &mut Vec<ParamSpec>, prefix: &str, cin: usize, bins: usize) {
    inv.push(ParamSpec {
        name: format!("{prefix}.quant.w"),
        shape: vec![bins, cin, 1, 1],
        init: InitKind::HeNormal { fan_in: cin },
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.quant.b"),
        shape: vec![bins],
        init: InitKind::Zero,
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.chroma.w"),
        shape: vec![2, bins, 1, 1],
        init: InitKind::HeNormal { fan_in: bins },
    });
    inv.push(ParamSpec {
        name: format!("{prefix}.chroma.b"),
        shape: vec![2],
        init: InitKind::Zero,
    });
}

// ---------------------------------------------------------------------------
// model state
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Classifier,
    EndToEnd,
    Gan,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Classifier => 0,
            Phase::EndToEnd => 1,
            Phase::Gan => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Phase::Classifier),
            1 => Some(Phase::EndToEnd),
            2 => Some(Phase::Gan),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Phase::Classifier => "classifier",
            Phase::EndToEnd => "end2end",
            Phase::Gan => "gan",
        }
    }
}

/// All learnable parameters plus the training-phase tag. Parameter values
/// always sit on the f32 grid so checkpoints round-trip bit-exactly.
#[derive(Clone, Debug)]
pub struct ModelState {
    params: BTreeMap<String, Tensor>,
    pub phase: Phase,
}

impl ModelState {
    /// Deterministic initialisation: tensors are drawn in inventory order
    /// from a ChaCha stream seeded by `seed`.
    pub fn init(plan: &NetworkPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x10);
        let mut params = BTreeMap::new();
        for spec in &plan.inventory {
            let mut t = match spec.init {
                InitKind::HeNormal { fan_in } => {
                    Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
                InitKind::Normal { std } => Tensor::randn(&spec.shape, std, &mut rng),
                InitKind::Zero => Tensor::zeros(&spec.shape),
                InitKind::One => Tensor::full(&spec.shape, 1.0),
            };
            t.quantize_f32();
            params.insert(spec.name.clone(), t);
        }
        ModelState {
            params,
            phase: Phase::Classifier,
        }
    }

    pub fn from_parts(params: BTreeMap<String, Tensor>, phase: Phase) -> Self {
        ModelState { params, phase }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copies trained classifier parameters from another state.
    pub fn adopt_classifier(&mut self, other: &ModelState) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with("clf."))
            .cloned()
            .collect();
        for name in names {
            let src = other.get(&name).clone();
            self.params.insert(name, src);
        }
    }

    /// FNV-1a digest over names and bit patterns; used to verify that
    /// updates touch exactly the intended parameter partition.
    pub fn digest_of<F: Fn(&str) -> bool>(&self, select: F) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let eat = |h: &mut u64, byte: u8| {
            *h ^= byte as u64;
            *h = h.wrapping_mul(0x100000001b3);
        };
        for (name, tensor) in &self.params {
            if !select(name) {
                continue;
            }
            for b in name.as_bytes() {
                eat(&mut h, *b);
            }
            for v in tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(&mut h, b);
                }
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Binds parameters of a `ModelState` into a tape, remembering which var
/// holds which parameter so gradients can be harvested by name.
pub struct NetSession<'a> {
    pub g: Graph,
    state: &'a ModelState,
    bound: BTreeMap<String, Var>,
}

impl<'a> NetSession<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        NetSession {
            g: Graph::new(),
            state,
            bound: BTreeMap::new(),
        }
    }

    /// Var for a named parameter, binding it as a leaf on first use.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.g.leaf(self.state.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    fn conv_block(&mut self, prefix: &str) -> ConvBlockVars {
        ConvBlockVars {
            weight: self.p(&format!("{prefix}.conv.w")),
            bias: self.p(&format!("{prefix}.conv.b")),
            gamma: self.p(&format!("{prefix}.norm.g")),
            beta: self.p(&format!("{prefix}.norm.b")),
        }
    }

    fn quant_head(&mut self, prefix: &str) -> QuantHeadVars {
        QuantHeadVars {
            quant: ConvVars {
                weight: self.p(&format!("{prefix}.quant.w")),
                bias: self.p(&format!("{prefix}.quant.b")),
            },
            chroma: ConvVars {
                weight: self.p(&format!("{prefix}.chroma.w")),
                bias: self.p(&format!("{prefix}.chroma.b")),
            },
        }
    }

    /// One double-block sequence (possibly heterogeneous), stride on the
    /// first convolution.
    fn double_block(&mut self, cfg: &NetworkConfig, prefix: &str, x: Var, stride: usize) -> Var {
        let a = self.het_or_conv_block(cfg, &format!("{prefix}.1"), x, stride);
        self.het_or_conv_block(cfg, &format!("{prefix}.2"), a, 1)
    }

    /// One Conv-IN-ReLU, using the split 3x3/1x1 kernel pair when the
    /// heterogeneous variant is enabled for this block.
    fn het_or_conv_block(
        &mut self,
        cfg: &NetworkConfig,
        prefix: &str,
        x: Var,
        stride: usize,
    ) -> Var {
        let w3_name = format!("{prefix}.conv.w3");
        if cfg.heterogeneous_conv && self.state.contains(&w3_name) {
            let cin = self.g.value(x).shape()[0];
            let c3 = cin.div_ceil(2);
            let w3 = self.p(&w3_name);
            let w1 = self.p(&format!("{prefix}.conv.w1"));
            let b = self.p(&format!("{prefix}.conv.b"));
            let wide = self.g.slice_channels(x, 0, c3);
            let y3 = self.g.conv2d(wide, w3, b, stride, 1, 1);
            let narrow = self.g.slice_channels(x, c3, cin);
            let cout = self.g.value(y3).shape()[0];
            let zero_b = self.g.leaf(Tensor::zeros(&[cout]));
            let y1 = self.g.conv2d(narrow, w1, zero_b, stride, 0, 1);
            let summed = self.g.add(y3, y1);
            let n = self.g.instance_norm(summed, blocks::INSTANCE_NORM_EPS);
            let gamma = self.p(&format!("{prefix}.norm.g"));
            let beta = self.p(&format!("{prefix}.norm.b"));
            let aff = self.g.channel_affine(n, gamma, beta);
            self.g.relu(aff)
        } else {
            let vars = self.conv_block(prefix);
            blocks::conv_in_relu(&mut self.g, x, &vars, stride)
        }
    }
}

/// Encoder products needed by the decoder.
pub struct EncoderOut {
    pub omega: Var,
    /// encoder double-block outputs in application order
    pub skips: [Var; 4],
    /// deep features, classifier-enriched when that branch is enabled
    pub enriched: Var,
}

/// Classifier logits for a normalised L plane (the plane is replicated to
/// three channels).
pub fn classifier_logits(sess: &mut NetSession, cfg: &NetworkConfig, l: Var) -> Var {
    let mut x = sess.g.concat_channels(&[l, l, l]);
    for i in 0..cfg.classifier.blocks.len() {
        let vars = sess.conv_block(&format!("clf.b{i}"));
        x = blocks::conv_in_relu(&mut sess.g, x, &vars, cfg.classifier.blocks[i].1);
    }
    let pooled = sess.g.global_avg_pool(x);
    let w = sess.p("clf.head.w");
    let b = sess.p("clf.head.b");
    sess.g.dense(pooled, w, b)
}

/// Classifier probabilities evaluated in a detached tape. The classifier is
/// frozen outside its own training phase, so the main tape receives the
/// probabilities as a constant and no gradient can reach the classifier.
pub fn classifier_probs(state: &ModelState, cfg: &NetworkConfig, l: &Tensor) -> Tensor {
    let mut sess = NetSession::new(state);
    let lv = sess.g.leaf(l.clone());
    let logits = classifier_logits(&mut sess, cfg, lv);
    let probs = sess.g.softmax0(logits);
    sess.g.value(probs).clone()
}

/// Runs the preprocessing block and encoder chain, then concatenates the
/// spatially broadcast classifier probabilities onto the deep features.
pub fn encoder_forward(
    sess: &mut NetSession,
    cfg: &NetworkConfig,
    l: Var,
    class_probs: Option<&Tensor>,
) -> EncoderOut {
    let pre_vars = sess.conv_block("pre");
    let omega = blocks::preb_forward(&mut sess.g, l, &pre_vars);
    let mut x = omega;
    let mut skips = [omega; 4];
    for i in 0..4 {
        x = sess.double_block(cfg, &format!("enc{i}"), x, cfg.dbd_strides[i]);
        skips[i] = x;
    }
    let enriched = if cfg.flags.use_classifier {
        let probs = class_probs.expect("classifier enabled but no probabilities supplied");
        let (h, w) = {
            let s = sess.g.value(x).shape();
            (s[1], s[2])
        };
        let pv = sess.g.leaf(probs.clone());
        let field = sess.g.broadcast_spatial(pv, h, w);
        sess.g.concat_channels(&[x, field])
    } else {
        x
    };
    EncoderOut {
        omega,
        skips,
        enriched,
    }
}

/// Decoder growth stages. `Dbu(m)` means decoder double blocks 1..=m are
/// attached with the stage-m temporary head; `Post` is the completed
/// network with the final head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cd,
    Dbu(usize),
    Post,
}

impl Stage {
    pub fn label(self) -> String {
        match self {
            Stage::Cd => "cd".to_string(),
            Stage::Dbu(m) => format!("dbu{m}"),
            Stage::Post => "post".to_string(),
        }
    }
}

/// Output of a forward pass to some head.
pub struct HeadOutput {
    /// quantisation logits `[Q, h, w]`
    pub logits: Var,
    /// chroma prediction `[2, H, W]` (stage resolution for temporary heads)
    pub ab: Var,
}

/// Initial reconstruction: the capsule path, or the 1x1 channel adapter
/// when capsules are ablated.
fn initial_reconstruction(sess: &mut NetSession, cfg: &NetworkConfig, enriched: Var) -> Var {
    if cfg.flags.use_capsules {
        let caps = &cfg.capsules;
        let convs: Vec<ConvVars> = (0..caps.count_in)
            .map(|i| ConvVars {
                weight: sess.p(&format!("caps.pc{i}.w")),
                bias: sess.p(&format!("caps.pc{i}.b")),
            })
            .collect();
        let (bank, spatial) = capsules::primary_capsules(&mut sess.g, enriched, caps, &convs);
        let predict = sess.p("caps.predict.w");
        let uhat = sess.g.predict_transform(bank, predict);
        let lift = if caps.pose_channels != caps.conv_channels {
            Some(sess.p("caps.lift.w"))
        } else {
            None
        };
        let outcome = capsules::route(&mut sess.g, uhat, lift, caps.routing_iterations);
        let reverse = sess.p("caps.reverse.w");
        let bank_back =
            capsules::reverse_predict(&mut sess.g, outcome.poses, reverse, outcome.state.coupling);
        let tconvs: Vec<ConvVars> = (0..caps.count_in)
            .map(|i| ConvVars {
                weight: sess.p(&format!("caps.tconv{i}.w")),
                bias: sess.p(&format!("caps.tconv{i}.b")),
            })
            .collect();
        capsules::capsule_decode(&mut sess.g, bank_back, spatial, &tconvs)
    } else {
        let w = sess.p("adapter.w");
        let b = sess.p("adapter.b");
        sess.g.conv2d(enriched, w, b, 1, 0, 1)
    }
}

/// Forward pass to the head of the given growth stage.
pub fn forward_to_stage(
    sess: &mut NetSession,
    cfg: &NetworkConfig,
    l: Var,
    class_probs: Option<&Tensor>,
    stage: Stage,
) -> HeadOutput {
    let enc = encoder_forward(sess, cfg, l, class_probs);
    let recon = initial_reconstruction(sess, cfg, enc.enriched);

    let depth = match stage {
        Stage::Cd => 0,
        Stage::Dbu(m) => {
            assert!((1..=4).contains(&m), "decoder stage out of range");
            m
        }
        Stage::Post => 4,
    };

    if depth == 0 {
        let head = sess.quant_head("thead.cd");
        let (logits, ab) = blocks::tcqb_forward(&mut sess.g, recon, &head);
        return HeadOutput { logits, ab };
    }

    // decoder chain up to `depth`; stage m>=2 concatenates the previous
    // output with the matching encoder skip resized to its grid
    let mut y = recon;
    for i in 0..depth {
        let input = if i == 0 {
            y
        } else {
            let skip = enc.skips[4 - i]; // dec1<-enc3, dec2<-enc2, dec3<-enc1
            let (h, w) = {
                let s = sess.g.value(y).shape();
                (s[1], s[2])
            };
            let resized = sess.g.resize_nearest(skip, h, w);
            sess.g.concat_channels(&[y, resized])
        };
        let target = cfg.dbu_sizes[i];
        let up = sess.g.resize_nearest(input, target, target);
        let a = sess.het_or_conv_block(cfg, &format!("dec{i}.1"), up, 1);
        y = sess.het_or_conv_block(cfg, &format!("dec{i}.2"), a, 1);
    }

    match stage {
        Stage::Post => {
            let (h, w) = {
                let s = sess.g.value(y).shape();
                (s[1], s[2])
            };
            let skip = enc.skips[0];
            let resized = sess.g.resize_nearest(skip, h, w);
            let cat = sess.g.concat_channels(&[y, resized]);
            let post_vars = sess.conv_block("post");
            let (oh, ow) = {
                let s = sess.g.value(enc.omega).shape();
                (s[1], s[2])
            };
            let psi = blocks::postb_forward(&mut sess.g, cat, &post_vars, (oh, ow));
            let head = sess.quant_head("head");
            let (logits, ab) = blocks::cqb_forward(&mut sess.g, psi, enc.omega, &head);
            HeadOutput { logits, ab }
        }
        Stage::Dbu(m) => {
            let head = sess.quant_head(&format!("thead.dbu{m}"));
            let (logits, ab) = blocks::tcqb_forward(&mut sess.g, y, &head);
            HeadOutput { logits, ab }
        }
        Stage::Cd => unreachable!(),
    }
}

/// Complete inference: the finished network, returning the chroma planes at
/// input resolution.
pub fn full_forward(state: &ModelState, cfg: &NetworkConfig, l: &Tensor) -> (AbPlanes, Tensor) {
    let probs = if cfg.flags.use_classifier {
        Some(classifier_probs(state, cfg, l))
    } else {
        None
    };
    let mut sess = NetSession::new(state);
    let lv = sess.g.leaf(l.clone());
    let out = forward_to_stage(&mut sess, cfg, lv, probs.as_ref(), Stage::Post);
    let ab = sess.g.value(out.ab);
    let (h, w) = (ab.shape()[1], ab.shape()[2]);
    let a = Tensor::from_vec(&[h, w], ab.data()[0..h * w].to_vec());
    let b = Tensor::from_vec(&[h, w], ab.data()[h * w..2 * h * w].to_vec());
    (AbPlanes { a, b }, sess.g.value(out.logits).clone())
}

/// Fresh model for a gamut: deterministic initialisation plus the
/// bin-centre chroma decode.
pub fn init_model(
    plan: &NetworkPlan,
    grid: &crate::colorspace::GamutGrid,
    seed: u64,
) -> ModelState {
    let mut state = ModelState::init(plan, seed);
    install_chroma_decode(&mut state, grid.centers());
    state
}

/// Sets every quantisation head's chroma layer to the bin-centre decode:
/// with fresh logits the chroma output is the expectation of the bin
/// centres under the softmax, so predictions live in native chroma units
/// from the first step and learning concentrates on the bin logits.
/// Applied to freshly initialised states only; loaded checkpoints keep
/// their trained weights.
pub fn install_chroma_decode(state: &mut ModelState, centers: &[(f64, f64)]) {
    let names: Vec<String> = state
        .names()
        .filter(|n| n.ends_with(".chroma.w"))
        .cloned()
        .collect();
    for name in names {
        let t = state.get_mut(&name);
        assert_eq!(t.shape()[0], 2, "chroma decode expects two output channels");
        assert_eq!(t.shape()[1], centers.len(), "bin count mismatch in {name}");
        for (q, (a, b)) in centers.iter().enumerate() {
            t.data_mut()[q] = *a;
            t.data_mut()[centers.len() + q] = *b;
        }
        t.quantize_f32();
    }
}

/// Discriminator parameter binding plus forward.
pub fn discriminator_run(sess: &mut NetSession, cfg: &NetworkConfig, l: Var, ab: Var) -> Var {
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    for i in 0..cfg.discriminator.layers.len() {
        convs.push(ConvVars {
            weight: sess.p(&format!("disc.c{i}.w")),
            bias: sess.p(&format!("disc.c{i}.b")),
        });
        norms.push(if i == 0 {
            None
        } else {
            Some((
                sess.p(&format!("disc.n{i}.g")),
                sess.p(&format!("disc.n{i}.b")),
            ))
        });
    }
    let vars = DiscriminatorVars {
        convs,
        norms,
        head: ConvVars {
            weight: sess.p("disc.head.w"),
            bias: sess.p("disc.head.b"),
        },
    };
    let run = blocks::DiscriminatorRun {
        spec: &cfg.discriminator,
        vars: &vars,
    };
    run.forward(&mut sess.g, l, ab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk_plan() -> NetworkPlan {
        NetworkPlan::build(NetworkConfig::desk(71, 7)).unwrap()
    }

    #[test]
    fn desk_plan_builds_with_expected_grids() {
        let plan = desk_plan();
        assert_eq!(plan.pre_hw, 8);
        assert_eq!(plan.deep_hw, 2);
        assert_eq!(plan.caps_hw, 2);
        assert_eq!(plan.recon_hw, 4);
        assert_eq!(plan.activation("chroma").unwrap(), &[2, 32, 32]);
        assert_eq!(plan.activation("quant_logits").unwrap(), &[71, 8, 8]);
        assert!(plan.departures.is_empty());
    }

    #[test]
    fn reference_plan_reproduces_channel_contracts() {
        let plan = NetworkPlan::build(NetworkConfig::reference(313, 7)).unwrap();
        assert_eq!(plan.activation("pre").unwrap()[0], 32);
        assert_eq!(plan.activation("enc3").unwrap()[0], 512);
        assert_eq!(plan.activation("enriched").unwrap()[0], 512 + 7);
        assert_eq!(plan.activation("poses").unwrap()[0], 32);
        assert_eq!(plan.activation("quant_logits").unwrap()[0], 313);
        assert_eq!(plan.activation("chroma").unwrap(), &[2, 224, 224]);
        // encoder ladder 56 -> 28 -> 14 -> 7 -> 7
        assert_eq!(plan.pre_hw, 56);
        assert_eq!(plan.activation("enc0").unwrap()[1], 28);
        assert_eq!(plan.activation("enc1").unwrap()[1], 14);
        assert_eq!(plan.activation("enc2").unwrap()[1], 7);
        assert_eq!(plan.deep_hw, 7);
        // decoder ladder 16 -> 20 -> 24 -> 28, then the post block restores
        // the preprocessing resolution
        for (i, expect) in [16usize, 20, 24, 28].iter().enumerate() {
            assert_eq!(plan.activation(&format!("dec{i}")).unwrap()[1], *expect);
        }
        assert_eq!(plan.activation("post").unwrap()[1], 56);
        assert_eq!(plan.departures.len(), 3);
        let report = plan.report();
        assert!(report.contains("departures"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.input_size = 30;
        assert!(NetworkPlan::build(cfg).is_err());

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.dbd_channels[2] = 0;
        assert!(NetworkPlan::build(cfg).is_err());

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.dbd_strides = [2, 2, 2, 2]; // collapses 8 -> 4 -> 2 -> 1 -> 0? (1->1 ok, stride 2 on 1 gives 1)
                                        // strides of 2 keep spatial at >= 1, so instead corrupt the ladder
        cfg.dbu_sizes[1] = 0;
        assert!(NetworkPlan::build(cfg).is_err());

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.bins = 1;
        assert!(NetworkPlan::build(cfg).is_err());

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.classifier.blocks.clear();
        assert!(NetworkPlan::build(cfg).is_err());

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.capsules.count_in = 0;
        assert!(NetworkPlan::build(cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_invalid_ladders_are_rejected(
            which in 0usize..6,
            bad_value in 0usize..1,
            seed_channel in 0usize..4,
        ) {
            let mut cfg = NetworkConfig::desk(71, 7);
            match which {
                0 => cfg.input_size = 10,            // not a multiple of 4
                1 => cfg.dbd_channels[seed_channel] = bad_value,
                2 => cfg.dbu_channels[seed_channel] = bad_value,
                3 => cfg.dbu_sizes[seed_channel] = bad_value,
                4 => cfg.dbd_strides[seed_channel] = 3,
                _ => cfg.capsules.conv_channels = bad_value,
            }
            prop_assert!(NetworkPlan::build(cfg).is_err());
        }
    }

    #[test]
    fn init_is_deterministic_and_f32_exact() {
        let plan = desk_plan();
        let a = ModelState::init(&plan, 42);
        let b = ModelState::init(&plan, 42);
        let c = ModelState::init(&plan, 43);
        assert_eq!(a.digest_of(|_| true), b.digest_of(|_| true));
        assert_ne!(a.digest_of(|_| true), c.digest_of(|_| true));
        for (_, t) in a.iter() {
            for v in t.data() {
                assert_eq!(*v, *v as f32 as f64);
            }
        }
        assert_eq!(a.len(), plan.inventory.len());
    }

    #[test]
    fn inventory_differs_per_ablation_exactly_as_declared() {
        let full: std::collections::BTreeSet<String> = desk_plan()
            .inventory
            .iter()
            .map(|p| p.name.clone())
            .collect();

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.flags.use_capsules = false;
        let nc: std::collections::BTreeSet<String> = NetworkPlan::build(cfg)
            .unwrap()
            .inventory
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let removed: Vec<_> = full.difference(&nc).collect();
        let added: Vec<_> = nc.difference(&full).collect();
        assert!(removed.iter().all(|n| n.starts_with("caps.")));
        assert_eq!(added.len(), 2);
        assert!(added.iter().all(|n| n.starts_with("adapter.")));

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.flags.use_classifier = false;
        let ncl: std::collections::BTreeSet<String> = NetworkPlan::build(cfg)
            .unwrap()
            .inventory
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let removed: Vec<_> = full.difference(&ncl).collect();
        assert!(!removed.is_empty());
        assert!(removed.iter().all(|n| n.starts_with("clf.")));

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.flags.use_progl = false;
        let np: std::collections::BTreeSet<String> = NetworkPlan::build(cfg)
            .unwrap()
            .inventory
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let removed: Vec<_> = full.difference(&np).collect();
        assert!(!removed.is_empty());
        assert!(removed.iter().all(|n| n.starts_with("thead.")));

        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.flags.use_gan = false;
        let ng: std::collections::BTreeSet<String> = NetworkPlan::build(cfg)
            .unwrap()
            .inventory
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let removed: Vec<_> = full.difference(&ng).collect();
        assert!(!removed.is_empty());
        assert!(removed.iter().all(|n| n.starts_with("disc.")));
    }

    #[test]
    fn full_forward_shapes_and_determinism() {
        let plan = desk_plan();
        let state = ModelState::init(&plan, 7);
        let cfg = &plan.config;
        let l = Tensor::full(&[1, 32, 32], 0.5);
        let (ab1, logits1) = full_forward(&state, cfg, &l);
        let (ab2, logits2) = full_forward(&state, cfg, &l);
        assert_eq!(ab1.a.shape(), &[32, 32]);
        assert_eq!(logits1.shape(), &[71, 8, 8]);
        assert_eq!(ab1, ab2);
        assert_eq!(logits1, logits2);
    }

    #[test]
    fn stage_forwards_use_ladder_resolutions() {
        let plan = desk_plan();
        let state = ModelState::init(&plan, 7);
        let cfg = &plan.config;
        let l = Tensor::full(&[1, 32, 32], 0.3);
        let probs = classifier_probs(&state, cfg, &l);

        let mut sess = NetSession::new(&state);
        let lv = sess.g.leaf(l.clone());
        let out = forward_to_stage(&mut sess, cfg, lv, Some(&probs), Stage::Cd);
        assert_eq!(sess.g.value(out.logits).shape(), &[71, 4, 4]);
        assert_eq!(sess.g.value(out.ab).shape(), &[2, 4, 4]);

        for m in 1..=4 {
            let mut sess = NetSession::new(&state);
            let lv = sess.g.leaf(l.clone());
            let out = forward_to_stage(&mut sess, cfg, lv, Some(&probs), Stage::Dbu(m));
            let expect = cfg.dbu_sizes[m - 1];
            assert_eq!(sess.g.value(out.logits).shape(), &[71, expect, expect]);
            assert_eq!(sess.g.value(out.ab).shape(), &[2, expect, expect]);
        }
    }

    #[test]
    fn classifier_probs_are_detached_from_main_tape() {
        let plan = desk_plan();
        let state = ModelState::init(&plan, 7);
        let cfg = &plan.config;
        let l = Tensor::full(&[1, 32, 32], 0.4);
        let probs = classifier_probs(&state, cfg, &l);
        let mut sess = NetSession::new(&state);
        let lv = sess.g.leaf(l);
        let out = forward_to_stage(&mut sess, cfg, lv, Some(&probs), Stage::Post);
        let sum = sess.g.sum_all(out.ab);
        let grads = sess.g.backward(sum);
        for (name, var) in sess.bound() {
            if name.starts_with("clf.") {
                panic!("classifier parameter {name} bound into end-to-end tape (var {var:?})");
            }
        }
        // a decoder parameter does receive gradient
        let head_w = sess.bound().get("head.chroma.w").copied().unwrap();
        assert!(grads.get_opt(head_w).is_some());
    }

    #[test]
    fn no_capsule_ablation_runs_through_adapter() {
        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.flags.use_capsules = false;
        let plan = NetworkPlan::build(cfg).unwrap();
        let state = ModelState::init(&plan, 9);
        let l = Tensor::full(&[1, 32, 32], 0.6);
        let (ab, logits) = full_forward(&state, &plan.config, &l);
        assert_eq!(ab.a.shape(), &[32, 32]);
        assert_eq!(logits.shape(), &[71, 8, 8]);
    }

    #[test]
    fn no_classifier_ablation_shrinks_enriched() {
        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.flags.use_classifier = false;
        let plan = NetworkPlan::build(cfg).unwrap();
        assert_eq!(plan.activation("enriched").unwrap()[0], 64);
        let state = ModelState::init(&plan, 9);
        let l = Tensor::full(&[1, 32, 32], 0.6);
        let (ab, _) = full_forward(&state, &plan.config, &l);
        assert_eq!(ab.a.shape(), &[32, 32]);
    }

    #[test]
    fn heterogeneous_variant_constructs_and_runs() {
        let mut cfg = NetworkConfig::desk(71, 7);
        cfg.heterogeneous_conv = true;
        let plan = NetworkPlan::build(cfg).unwrap();
        assert!(plan.inventory.iter().any(|p| p.name.ends_with(".conv.w3")));
        let state = ModelState::init(&plan, 5);
        let l = Tensor::full(&[1, 32, 32], 0.5);
        let (ab, _) = full_forward(&state, &plan.config, &l);
        assert_eq!(ab.a.shape(), &[32, 32]);
    }
}
