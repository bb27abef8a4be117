//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorId};
use crate::parallel::par_map_range;

/// Compares the tape gradient of `f` against central finite differences at
/// `points`, returning the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must be a pure scalar-valued function of the leaves it is handed, in
/// the order given. Coordinate perturbations are evaluated in parallel
/// (`workers` as in [`crate::parallel`]); each evaluation builds its own tape.
///
/// Panics if `step <= 0` or if any evaluation produces a non-finite value.
pub fn gradcheck<F>(f: &F, points: &[Tensor], step: f64, workers: usize) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId + Sync,
{
    assert!(step > 0.0, "gradcheck requires a positive step, got {step}");
    assert!(!points.is_empty(), "gradcheck requires at least one point");

    let eval = |pts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        // Perturbed evaluations are value-only; leave gradients off.
        let ids: Vec<TensorId> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &ids);
        let v = tape.value(out);
        assert!(
            v.is_scalar(),
            "gradcheck function must be scalar-valued, got {:?}",
            v.shape()
        );
        let value = v.scalar_value();
        assert!(
            value.is_finite(),
            "gradcheck: non-finite value {value} during evaluation"
        );
        value
    };

    // Analytic pass: one tape with grad-enabled leaves.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = points
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &ids);
    assert!(
        tape.value(out).is_scalar(),
        "gradcheck function must be scalar-valued, got {:?}",
        tape.value(out).shape()
    );
    assert!(
        tape.value(out).scalar_value().is_finite(),
        "gradcheck: non-finite value during evaluation"
    );
    tape.backward(out);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    // Flat coordinate index -> (point, offset) map.
    let mut coords = Vec::new();
    for (p, point) in points.iter().enumerate() {
        for c in 0..point.numel() {
            coords.push((p, c));
        }
    }

    let errors = par_map_range(coords.len(), workers, |ci| {
        let (p, c) = coords[ci];
        let mut plus = points.to_vec();
        plus[p].data_mut()[c] += step;
        let mut minus = points.to_vec();
        minus[p].data_mut()[c] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        assert!(
            numeric.is_finite(),
            "gradcheck: non-finite finite difference"
        );
        let a = analytic[p].data()[c];
        (a - numeric).abs() / f64::max(1.0, numeric.abs())
    });

    errors.into_iter().fold(0.0, f64::max)
}

/// Single-point convenience wrapper.
pub fn gradcheck_single<F>(f: &F, point: &Tensor, step: f64, workers: usize) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId + Sync,
{
    gradcheck(
        &|tape: &mut Tape, ids: &[TensorId]| f(tape, ids[0]),
        std::slice::from_ref(point),
        step,
        workers,
    )
}

/// Finite-difference verification of every tape operation on seeded random
/// inputs (sizes up to 16x16). Returns `(op name, max relative error)` pairs.
///
/// Each op is scalarized as `sum(op(...) ∘ R)` with a fixed random matrix `R`
/// so nonuniform output weights exercise the whole Jacobian. Inputs for ops
/// with kinks (relu, max-pool) are nudged away from ties; log inputs are kept
/// positive.
pub fn op_gradcheck_suite(step: f64, workers: usize) -> Vec<(&'static str, f64)> {
    use crate::rng::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    // Weighted-sum scalarizer with a fixed random matrix.
    fn weighted_sum(tape: &mut Tape, x: TensorId, weights: &Tensor) -> TensorId {
        let w = tape.constant(weights.clone());
        let prod = tape.mul(x, w);
        tape.sum(prod)
    }

    let mut rng = Rng::new(0x9d5f_11e7_c0de_cafe);
    let mut results = Vec::new();

    {
        let a = random(5, 7, &mut rng);
        let b = random(7, 4, &mut rng);
        let r = random(5, 4, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.matmul(ids[0], ids[1]);
            weighted_sum(tape, out, &r)
        };
        results.push(("matmul", gradcheck(&f, &[a, b], step, workers)));
    }
    {
        let x = random(6, 9, &mut rng);
        let r = random(9, 6, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.transpose(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("transpose", gradcheck(&f, &[x], step, workers)));
    }
    for (name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        let a = random(8, 8, &mut rng);
        let b = random(8, 8, &mut rng);
        let r = random(8, 8, &mut rng);
        let f = move |tape: &mut Tape, ids: &[TensorId]| {
            let out = match which {
                0 => tape.add(ids[0], ids[1]),
                1 => tape.sub(ids[0], ids[1]),
                _ => tape.mul(ids[0], ids[1]),
            };
            weighted_sum(tape, out, &r)
        };
        results.push((name, gradcheck(&f, &[a, b], step, workers)));
    }
    {
        let x = random(4, 11, &mut rng);
        let r = random(4, 11, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.scale(ids[0], -2.5);
            weighted_sum(tape, out, &r)
        };
        results.push(("scale", gradcheck(&f, &[x], step, workers)));
    }
    {
        // Keep inputs away from the relu kink.
        let mut x = random(7, 7, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let r = random(7, 7, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.relu(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("relu", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(6, 6, &mut rng).scale(3.0);
        let r = random(6, 6, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.sigmoid(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("sigmoid", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(5, 5, &mut rng);
        let r = random(5, 5, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.exp(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("exp", gradcheck(&f, &[x], step, workers)));
    }
    {
        let mut x = random(5, 6, &mut rng);
        for v in x.data_mut() {
            *v = 0.5 + v.abs();
        }
        let r = random(5, 6, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.log(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("log", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(6, 5, &mut rng).scale(2.0);
        let r = random(6, 5, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.row_softmax(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("row_softmax", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(6, 4, &mut rng);
        let indices = vec![0usize, 2, 2, 5, 1];
        let r = random(5, 4, &mut rng);
        let f = move |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.gather_rows(ids[0], &indices);
            weighted_sum(tape, out, &r)
        };
        results.push(("gather_rows", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(9, 5, &mut rng);
        let r = random(1, 5, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.mean_pool_rows(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("mean_pool_rows", gradcheck(&f, &[x], step, workers)));
    }
    {
        // Column maxima must clear the runner-up by more than the FD step.
        let mut x = random(8, 6, &mut rng);
        for j in 0..6 {
            let i = j % 8;
            let v = x.at(i, j) + 2.0;
            x.set(i, j, v);
        }
        let r = random(1, 6, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.max_pool_rows(ids[0]);
            weighted_sum(tape, out, &r)
        };
        results.push(("max_pool_rows", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(16, 16, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| tape.sum(ids[0]);
        results.push(("sum", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(16, 16, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| tape.frobenius_sq(ids[0]);
        results.push(("frobenius_sq", gradcheck(&f, &[x], step, workers)));
    }
    {
        let x = random(4, 9, &mut rng);
        let r = random(12, 3, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.reshape(ids[0], vec![12, 3]);
            weighted_sum(tape, out, &r)
        };
        results.push(("reshape", gradcheck(&f, &[x], step, workers)));
    }
    {
        let a = random(2, 5, &mut rng);
        let b = random(3, 5, &mut rng);
        let c = random(1, 5, &mut rng);
        let r = random(6, 5, &mut rng);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let out = tape.concat_rows(ids);
            weighted_sum(tape, out, &r)
        };
        results.push(("concat_rows", gradcheck(&f, &[a, b, c], step, workers)));
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn frobenius_norm_gradient_checks_out() {
        let x = random(3, 3, 21);
        let err = gradcheck_single(&|tape: &mut Tape, id| tape.frobenius_sq(id), &x, 1e-5, 1);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = random(2, 2, 22);
        let f = |tape: &mut Tape, _id: TensorId| tape.constant(Tensor::scalar(3.5));
        let err = gradcheck_single(&f, &x, 1e-5, 1);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn multi_point_composite_checks_out() {
        let a = random(4, 3, 23);
        let b = random(3, 5, 24);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let prod = tape.matmul(ids[0], ids[1]);
            let act = tape.sigmoid(prod);
            tape.frobenius_sq(act)
        };
        let err = gradcheck(&f, &[a, b], 1e-5, 1);
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let a = random(6, 6, 25);
        let f = |tape: &mut Tape, ids: &[TensorId]| {
            let s = tape.row_softmax(ids[0]);
            let l = tape.log(s);
            tape.sum(l)
        };
        let seq = gradcheck(&f, std::slice::from_ref(&a), 1e-5, 1);
        let par = gradcheck(&f, &[a], 1e-5, 4);
        assert_eq!(seq, par);
        assert!(seq < 1e-6);
    }

    #[test]
    #[should_panic(expected = "positive step")]
    fn non_positive_step_is_rejected() {
        let x = random(2, 2, 26);
        gradcheck_single(&|tape: &mut Tape, id| tape.sum(id), &x, 0.0, 1);
    }

    #[test]
    fn every_op_passes_the_suite() {
        for (name, err) in op_gradcheck_suite(1e-5, 0) {
            assert!(err < 1e-5, "{name}: max relative error {err}");
        }
    }
}
