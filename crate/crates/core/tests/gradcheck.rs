mod common;

use std::collections::BTreeSet;

use common::{finite_difference_probes, random_batch, tiny_gradcheck_model};
use htsr_core::tensor_io::ModuleKind;
use htsr_core::train::build_model;

#[test]
fn central_differences_match_backprop() {
    let cfg = tiny_gradcheck_model();
    let params = build_model(&cfg, 11).unwrap();
    let batch = random_batch(&cfg, 2, 8, 3);
    let probes = finite_difference_probes(&cfg, &params, &batch, 1e-3, 2, 32, 7);
    let kinds: BTreeSet<ModuleKind> = probes.iter().map(|p| p.kind).collect();
    assert_eq!(kinds.len(), 8, "all seven projections plus unscheduled tensors");
    let worst = probes.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).unwrap();
    eprintln!("worst probe: {worst:?} rel {:.3e}", worst.rel_err());
    for p in &probes {
        assert!(p.rel_err() < 1e-4, "{p:?} rel {:.3e}", p.rel_err());
    }
}

#[test]
fn gradients_hold_away_from_initialization() {
    // Larger weights make every nonlinearity matter; curvature grows with
    // them, so the step shrinks to keep truncation error small.
    let cfg = tiny_gradcheck_model();
    let mut params = build_model(&cfg, 12).unwrap();
    for t in params.tensors_mut() {
        t.mapv_inplace(|w| 8.0 * w);
    }
    let batch = random_batch(&cfg, 3, 6, 4);
    let probes = finite_difference_probes(&cfg, &params, &batch, 1e-5, 2, 32, 8);
    for p in &probes {
        assert!(p.rel_err() < 1e-4, "{p:?} rel {:.3e}", p.rel_err());
    }
}

#[test]
fn discrepancy_shrinks_quadratically_with_step() {
    let cfg = tiny_gradcheck_model();
    let mut params = build_model(&cfg, 12).unwrap();
    for t in params.tensors_mut() {
        t.mapv_inplace(|w| 8.0 * w);
    }
    let batch = random_batch(&cfg, 3, 6, 4);
    let worst = |h| {
        finite_difference_probes(&cfg, &params, &batch, h, 2, 32, 8)
            .iter()
            .map(|p| p.rel_err())
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (worst(1e-3), worst(1e-4));
    eprintln!("worst rel err: h=1e-3 {coarse:.3e}, h=1e-4 {fine:.3e}");
    assert!(fine < coarse / 20.0);
}
