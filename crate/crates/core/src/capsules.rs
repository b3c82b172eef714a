//! Capsule encoder, routing by agreement, and the reversed capsule decoder.
//!
//! The capsule bank is laid out `[I, P, c]`: `I` capsules, `P` spatial
//! positions, `c` channels per position. The pairwise affine transforms are
//! shared across positions, so `W` is `[I, J, d, c]` and a prediction lives
//! in `R^(P*d)`. Routing runs over flattened prediction vectors exactly as
//! in the classic dynamic-routing loop; when the configured pose width
//! differs from the prediction width, a per-output-capsule linear map lifts
//! the aggregated vector into pose space before the output squash.

use crate::blocks::ConvVars;
use crate::graph::{Graph, Var};

/// Scalar squash: `v = s * |s| / (1 + |s|^2)`, zero-guarded.
pub fn squash_scalar(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    let n = n2.sqrt();
    if n < 1e-12 {
        return vec![0.0; s.len()];
    }
    let g = n / (1.0 + n2);
    s.iter().map(|v| v * g).collect()
}

/// Capsule stage configuration; counts and channel widths only, the
/// surrounding network decides spatial sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsuleLayout {
    /// input capsule count (C)
    pub count_in: usize,
    /// output capsule count (J)
    pub count_out: usize,
    /// channels per position of each input capsule
    pub conv_channels: usize,
    /// stride of the per-capsule convolutions over the enriched features
    pub conv_stride: usize,
    /// channels per position of each output pose
    pub pose_channels: usize,
    /// routing iterations
    pub routing_iterations: usize,
    /// output channels of each reversed capsule's transposed convolution
    pub tconv_channels: usize,
}

/// Parameter variables for the full capsule path.
pub struct CapsuleVars {
    /// per-capsule 3x3 convolutions over the enriched encoder output
    pub primary_convs: Vec<ConvVars>,
    /// `[I, J, d, c]` pairwise prediction transform
    pub predict: Var,
    /// `[J, pose_c, d]` per-output-capsule pose lift; None when pose and
    /// prediction widths agree
    pub pose_lift: Option<Var>,
    /// `[J, I, c, pose_c]` pairwise reverse transform
    pub reverse: Var,
    /// per-capsule 2x2 stride-2 transposed convolutions
    pub tconvs: Vec<ConvVars>,
}

/// Primary capsules: independent convolutions over the enriched features,
/// packed into a bank `[I, P, c]`. Returns the bank and the spatial grid.
pub fn primary_capsules(
    g: &mut Graph,
    enriched: Var,
    layout: &CapsuleLayout,
    convs: &[ConvVars],
) -> (Var, (usize, usize)) {
    assert_eq!(convs.len(), layout.count_in, "one conv per capsule");
    let mut fields = Vec::with_capacity(layout.count_in);
    for conv in convs {
        let f = g.conv2d(enriched, conv.weight, conv.bias, layout.conv_stride, 1, 1);
        fields.push(f);
    }
    let (h, w) = {
        let s = g.value(fields[0]).shape();
        (s[1], s[2])
    };
    (g.pack_capsules(&fields), (h, w))
}

/// State of the routing loop after the final iteration.
pub struct RoutingState {
    /// raw agreement logits `[I, J]`
    pub logits: Var,
    /// coupling coefficients `[I, J]`, rows summing to one
    pub coupling: Var,
    /// coupling snapshots, one per iteration
    pub coupling_history: Vec<Var>,
    pub iterations: usize,
}

/// Output of the routing step.
pub struct RoutingOutcome {
    /// output poses `[J, P, pose_c]`
    pub poses: Var,
    pub state: RoutingState,
}

/// Routing by agreement over prediction vectors.
///
/// Per iteration: couplings are the row softmax of the logits, predictions
/// are aggregated per output capsule, squashed, and the agreement between
/// predictions and the squashed vector is added to the logits. The returned
/// poses apply the optional pose lift before the output squash.
pub fn route(
    g: &mut Graph,
    uhat: Var,
    pose_lift: Option<Var>,
    iterations: usize,
) -> RoutingOutcome {
    assert!(iterations >= 1, "routing needs at least one iteration");
    let (i_n, j_n) = {
        let s = g.value(uhat).shape();
        (s[0], s[1])
    };
    let mut logits = g.leaf(crate::tensor::Tensor::zeros(&[i_n, j_n]));
    let mut history = Vec::with_capacity(iterations);
    let mut coupling = g.softmax_rows(logits);
    let mut aggregated = g.route_aggregate(uhat, coupling);
    history.push(coupling);
    for _ in 1..iterations {
        let squashed = g.squash_rows(aggregated);
        let agreement = g.route_agreement(uhat, squashed);
        logits = g.add(logits, agreement);
        coupling = g.softmax_rows(logits);
        aggregated = g.route_aggregate(uhat, coupling);
        history.push(coupling);
    }
    let poses = match pose_lift {
        Some(lift) => {
            let lifted = g.pose_map(aggregated, lift);
            g.squash_rows(lifted)
        }
        None => g.squash_rows(aggregated),
    };
    RoutingOutcome {
        poses,
        state: RoutingState {
            logits,
            coupling,
            coupling_history: history,
            iterations,
        },
    }
}

/// Reversed affine prediction: per-pair maps from pose space back to
/// capsule space, aggregated over output capsules with the final coupling
/// coefficients. Returns the reconstructed bank `[I, P, c]`.
pub fn reverse_predict(g: &mut Graph, poses: Var, reverse: Var, coupling: Var) -> Var {
    let per_pair = g.pair_map_j(poses, reverse);
    g.coupling_sum(per_pair, coupling)
}

/// Reversed capsules: each reconstructed capsule field goes through its own
/// 2x2 stride-2 transposed convolution; the results concatenate along
/// channels into the initial colour reconstruction.
pub fn capsule_decode(
    g: &mut Graph,
    bank: Var,
    spatial: (usize, usize),
    tconvs: &[ConvVars],
) -> Var {
    let count = g.value(bank).shape()[0];
    assert_eq!(tconvs.len(), count, "one transposed conv per capsule");
    let mut outputs = Vec::with_capacity(count);
    for (i, tconv) in tconvs.iter().enumerate() {
        let field = g.capsule_field(bank, i, spatial.0, spatial.1);
        let up = g.conv_transpose2d(field, tconv.weight, tconv.bias, 2);
        outputs.push(up);
    }
    g.concat_channels(&outputs)
}
