//! Shared oracles for integration tests. These deliberately avoid the code
//! paths they check: gradients are compared against central finite
//! differences of a forward-only evaluation, and the sparsity schedule is
//! re-derived in exact rational arithmetic.

use num::{BigRational, FromPrimitive, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prunelab_core::pruning::PruneSchedule;
use prunelab_core::tape::{NodeId, Tape};

/// Exact-rational evaluation of
/// s_t = s_final + min(0, (s0 - s_final) * (1 - t/ramp)^3)
/// with s0 and s_final given as integer percents.
pub fn schedule_oracle_percent(t: u64, ramp: u64, s0_pct: u32, s_final_pct: u32) -> f64 {
    let pct = |p: u32| BigRational::new(p.into(), 100.into());
    let s0 = pct(s0_pct);
    let s_final = pct(s_final_pct);
    let ratio = BigRational::from_integer(1.into())
        - BigRational::new(
            num::BigInt::from_u64(t).unwrap(),
            num::BigInt::from_u64(ramp).unwrap(),
        );
    let cubic = (&s0 - &s_final) * (&ratio * &ratio * &ratio);
    let clamped = if cubic.is_positive() {
        BigRational::zero()
    } else {
        cubic
    };
    (s_final + clamped).to_f64().unwrap()
}

pub fn schedule_for_percent(s0_pct: u32, s_final_pct: u32, ramp: u64) -> PruneSchedule {
    PruneSchedule::new(
        s0_pct as f64 / 100.0,
        s_final_pct as f64 / 100.0,
        ramp,
        1,
    )
    .unwrap()
}

/// One differentiable input of a primitive under test.
pub struct ProbeInput {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ProbeInput {
    pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        ProbeInput {
            rows,
            cols,
            values: (0..rows * cols)
                .map(|_| rng.random::<f64>() * 4.0 - 2.0)
                .collect(),
        }
    }
}

/// Check d(loss)/d(input) of `build` against central finite differences for
/// every input element. `build` receives leaf nodes for the inputs and
/// returns the op output; the scalar loss is a fixed random weighting of
/// that output so every output element contributes.
///
/// Tolerance: relative error <= 1e-4 at h = 1e-5, with the denominator
/// guarded for near-zero gradients.
pub fn finite_difference_check(
    name: &str,
    rng: &mut ChaCha8Rng,
    inputs: &[ProbeInput],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
) {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    let loss_of = |perturbed: &[Vec<f64>], weights: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(perturbed)
            .map(|(p, v)| tape.leaf_matrix(p.rows, p.cols, v.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &ids);
        let (m, n) = tape.dims(out);
        let w = tape.leaf_matrix(m, n, weights.to_vec()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        tape.value(loss)[0]
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|p| tape.leaf_matrix(p.rows, p.cols, p.values.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &ids);
    let (m, n) = tape.dims(out);
    let weights: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let w = tape.leaf_matrix(m, n, weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs.iter().map(|p| p.values.clone()).collect();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).to_vec();
        for j in 0..input.values.len() {
            let mut plus = base.clone();
            plus[i][j] += H;
            let mut minus = base.clone();
            minus[i][j] -= H;
            let numeric = (loss_of(&plus, &weights) - loss_of(&minus, &weights)) / (2.0 * H);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[j] - numeric).abs() / denom;
            assert!(
                rel <= TOL,
                "{name}: input {i} element {j}: analytic {} vs numeric {} (rel {rel:.2e})",
                analytic[j],
                numeric
            );
        }
    }
}
