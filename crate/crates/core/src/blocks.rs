//! Convolutional building blocks with explicit shape contracts.
//!
//! Every block is a pure function over the tape: the caller supplies the
//! parameter variables, the block emits ops and returns the output var.
//! Shape arithmetic lives beside the builders so construction-time
//! validation and the forward path cannot drift apart.

use crate::graph::{conv_out_size, Graph, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Parameters of one Conv-IN-ReLU sequence.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Plain convolution parameters (no normalisation).
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Conv(3x3) - IN - ReLU with the given stride.
pub fn conv_in_relu(g: &mut Graph, x: Var, p: &ConvBlockVars, stride: usize) -> Var {
    let c = g.conv2d(x, p.weight, p.bias, stride, 1, 1);
    let n = g.instance_norm(c, INSTANCE_NORM_EPS);
    let a = g.channel_affine(n, p.gamma, p.beta);
    g.relu(a)
}

/// Preprocessing block: Conv-IN-ReLU-MaxPool, quartering the spatial size.
pub fn preb_forward(g: &mut Graph, x: Var, p: &ConvBlockVars) -> Var {
    let a = conv_in_relu(g, x, p, 2);
    g.max_pool2(a)
}

/// Downsampling double block: two Conv-IN-ReLU sequences, the first one
/// carrying the stride.
pub fn dbd_forward(
    g: &mut Graph,
    x: Var,
    first: &ConvBlockVars,
    second: &ConvBlockVars,
    stride: usize,
) -> Var {
    let a = conv_in_relu(g, x, first, stride);
    conv_in_relu(g, a, second, 1)
}

/// Upsampling double block: nearest-neighbour resize to the target size
/// followed by two Conv-IN-ReLU sequences.
pub fn dbu_forward(
    g: &mut Graph,
    x: Var,
    first: &ConvBlockVars,
    second: &ConvBlockVars,
    target: (usize, usize),
) -> Var {
    let up = g.resize_nearest(x, target.0, target.1);
    let a = conv_in_relu(g, up, first, 1);
    conv_in_relu(g, a, second, 1)
}

/// Final upsampling block, the reverse of the preprocessing block: resize to
/// the preprocessing resolution then one Conv-IN-ReLU.
pub fn postb_forward(g: &mut Graph, x: Var, p: &ConvBlockVars, target: (usize, usize)) -> Var {
    let up = g.resize_nearest(x, target.0, target.1);
    conv_in_relu(g, up, p, 1)
}

/// Colour-quantisation head parameters: a 1x1 conv to bin logits and a 1x1
/// conv from the softmaxed distribution to the two chroma channels.
#[derive(Clone, Copy, Debug)]
pub struct QuantHeadVars {
    pub quant: ConvVars,
    pub chroma: ConvVars,
}

/// Shared head structure: logits over the gamut bins, then the chroma pair
/// decoded from the softmaxed distribution. The final head bilinearly
/// upsamples the chroma output by a fixed factor; temporary heads emit at
/// the input resolution.
pub fn quant_head_forward(
    g: &mut Graph,
    x: Var,
    p: &QuantHeadVars,
    upsample_factor: Option<usize>,
) -> (Var, Var) {
    let logits = g.conv2d(x, p.quant.weight, p.quant.bias, 1, 0, 1);
    let probs = g.softmax0(logits);
    let chroma = g.conv2d(probs, p.chroma.weight, p.chroma.bias, 1, 0, 1);
    let ab = match upsample_factor {
        Some(f) => {
            let (h, w) = {
                let s = g.value(chroma).shape();
                (s[1] * f, s[2] * f)
            };
            g.resize_bilinear(chroma, h, w)
        }
        None => chroma,
    };
    (logits, ab)
}

/// Final head: adds the residual of the post block output and the
/// preprocessing features before quantisation, and upsamples chroma x4.
pub fn cqb_forward(g: &mut Graph, psi: Var, omega: Var, p: &QuantHeadVars) -> (Var, Var) {
    assert_eq!(
        g.value(psi).shape(),
        g.value(omega).shape(),
        "residual inputs must agree in shape"
    );
    let fused = g.add(psi, omega);
    quant_head_forward(g, fused, p, Some(4))
}

/// Temporary head attached to an inner decoder stage; no residual is
/// available at inner resolutions, outputs stay at the stage resolution.
pub fn tcqb_forward(g: &mut Graph, y: Var, p: &QuantHeadVars) -> (Var, Var) {
    quant_head_forward(g, y, p, None)
}

// ---------------------------------------------------------------------------
// patch discriminator
// ---------------------------------------------------------------------------

/// Layer widths and strides of the conditional patch discriminator. All
/// layers use 4x4 kernels with padding 1; a final 4x4 stride-1 conv maps to
/// one logit per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    /// (out_channels, stride) per intermediate layer
    pub layers: Vec<(usize, usize)>,
}

impl DiscriminatorSpec {
    /// The canonical 70x70-receptive-field configuration.
    pub fn reference() -> Self {
        DiscriminatorSpec {
            layers: vec![(64, 2), (128, 2), (256, 2), (512, 1)],
        }
    }

    /// Slimmed-down configuration for small inputs.
    pub fn desk() -> Self {
        DiscriminatorSpec {
            layers: vec![(8, 2), (16, 2), (32, 1)],
        }
    }

    /// Spatial size of the logit map for a square input.
    pub fn output_size(&self, input: usize) -> usize {
        let mut s = input;
        for (_, stride) in &self.layers {
            s = conv_out_size(s, 4, *stride, 1, 1);
        }
        conv_out_size(s, 4, 1, 1, 1)
    }

    /// Receptive field of one output logit.
    pub fn receptive_field(&self) -> usize {
        // walk backwards: rf += (k-1) * prod(earlier strides)
        let mut rf = 1usize;
        let mut jump = 1usize;
        for (_, stride) in self.layers.iter().chain(std::iter::once(&(1usize, 1usize))) {
            rf += 3 * jump;
            jump *= stride;
        }
        rf
    }
}

/// Per-layer discriminator parameters; instance norm applies from the
/// second layer on, matching the usual patch classifier layout.
#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    pub convs: Vec<ConvVars>,
    pub norms: Vec<Option<(Var, Var)>>,
    pub head: ConvVars,
}

/// Patch classifier over the channel-concatenated (L, ab) pair, bundling
/// the stride schedule with the parameters; returns one logit per patch.
pub struct DiscriminatorRun<'a> {
    pub spec: &'a DiscriminatorSpec,
    pub vars: &'a DiscriminatorVars,
}

impl<'a> DiscriminatorRun<'a> {
    pub fn forward(&self, g: &mut Graph, l_plane: Var, ab: Var) -> Var {
        {
            let ls = g.value(l_plane).shape();
            let abs = g.value(ab).shape();
            assert_eq!(&ls[1..], &abs[1..], "L and ab spatial dims must match");
        }
        let mut x = g.concat_channels(&[l_plane, ab]);
        for (i, conv) in self.vars.convs.iter().enumerate() {
            let stride = self.spec.layers[i].1;
            let c = g.conv2d(x, conv.weight, conv.bias, stride, 1, 1);
            let n = match &self.vars.norms[i] {
                Some((gamma, beta)) => {
                    let inorm = g.instance_norm(c, INSTANCE_NORM_EPS);
                    g.channel_affine(inorm, *gamma, *beta)
                }
                None => c,
            };
            x = g.leaky_relu(n, LEAKY_SLOPE);
        }
        g.conv2d(x, self.vars.head.weight, self.vars.head.bias, 1, 1, 1)
    }
}
