//! Full-scale construction smoke test. The forward pass takes several
//! seconds and ~1 GB, so it only runs on demand:
//!
//!     cargo test -p chromacaps-core --test reference_scale -- --ignored

use chromacaps_core::network::{full_forward, ModelState, NetworkConfig, NetworkPlan};
use chromacaps_core::Tensor;

#[test]
#[ignore = "slow; run explicitly to exercise the full-scale network"]
fn reference_network_initialises_and_runs_forward() {
    let plan = NetworkPlan::build(NetworkConfig::reference(313, 7)).unwrap();
    assert!(plan.total_parameters() > 60_000_000);
    let state = ModelState::init(&plan, 0);
    assert_eq!(state.len(), plan.inventory.len());
    let l = Tensor::full(&[1, 224, 224], 0.5);
    let (ab, logits) = full_forward(&state, &plan.config, &l);
    assert_eq!(ab.a.shape(), &[224, 224]);
    assert_eq!(logits.shape(), &[313, 56, 56]);
    assert!(logits.all_finite());
}
