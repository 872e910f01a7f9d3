//! Finite-difference verification of reverse-mode gradients.
//!
//! [`gradcheck`] takes a graph-building closure, evaluates the analytic
//! gradient with one backward pass, then probes every input coordinate
//! with central differences and reports the worst relative error. It runs
//! in `f64` only — checking `f32` graphs directly would drown the signal
//! in rounding noise.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error of `analytic` against `numeric`:
/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`.
///
/// `f` receives a fresh graph and the input leaf, and returns the output
/// node; non-scalar outputs are reduced by a fixed random-weighted sum so
/// every output coordinate influences the check. `f` must be
/// deterministic: it is evaluated twice at `x` and a single differing bit
/// is an error.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    // One weight per output coordinate, fixed across all evaluations.
    let probe = |point: &Tensor<f64>, weights: Option<&Tensor<f64>>| -> Result<(f64, Graph<f64>, Var, Tensor<f64>)> {
        let mut g = Graph::new();
        let xv = g.input(point.clone());
        let out = f(&mut g, xv)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut rng = Rng::new(0x6_0AD_C4EC).derive("reduction.weights");
                Tensor::uniform(g.shape(out), 0.5, 1.5, &mut rng)
            }
        };
        let scalar = if g.shape(out).is_empty() && g.value(out).numel() == 1 {
            out
        } else {
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            g.sum_all(prod)
        };
        Ok((g.value(scalar).item(), g, scalar, w))
    };

    let (y0, g0, root, weights) = probe(x, None)?;
    if !y0.is_finite() {
        return Err(Error::Contract(format!(
            "gradcheck output is non-finite at the base point: {y0}"
        )));
    }
    let (y1, _, _, _) = probe(x, Some(&weights))?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::Nondeterministic(format!(
            "two evaluations at the same point differ: {y0:?} vs {y1:?}"
        )));
    }
    let mut grads = g0.backward(root)?;
    // The input leaf is always the first node the probe creates.
    let analytic = grads
        .take(Var(0))
        .ok_or_else(|| Error::Contract("function does not depend on its input".into()))?;

    let mut worst = 0.0f64;
    let mut point = x.clone();
    for i in 0..x.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let (fp, _, _, _) = probe(&point, Some(&weights))?;
        point.data_mut()[i] = orig - eps;
        let (fm, _, _, _) = probe(&point, Some(&weights))?;
        point.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        // A silent NaN would compare as false against `worst` and slip
        // through; refuse non-finite values outright instead.
        if !analytic.data()[i].is_finite() || !numeric.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite gradient at coordinate {i}: analytic {}, numeric {numeric}",
                analytic.data()[i]
            )));
        }
        let err = rel_err(analytic.data()[i], numeric);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| 2.0 * rng.next_f64() - 1.0)
    }

    /// Strictly positive input, away from the kinks of sqrt/ln/recip.
    fn positive_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| 0.5 + rng.next_f64())
    }

    #[test]
    fn quadratic_has_tiny_error() {
        // f(x) = sum(x^2), analytic grad 2x.
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err:e}");
    }

    #[test]
    fn nondeterministic_functions_are_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = input(&[2], 1);
        let r = gradcheck(
            |g, x| {
                let n = calls.fetch_add(1, Ordering::SeqCst);
                let y = g.add_scalar(x, n as f64 * 1e-3);
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_EPS,
        );
        match r {
            Err(Error::Nondeterministic(_)) => {}
            other => panic!("expected determinism error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_outputs_are_rejected_not_reported_as_zero_error() {
        // sqrt of a negative coordinate: the forward value is NaN.
        let x = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let r = gradcheck(|g, x| Ok(g.sqrt(x)), &x, DEFAULT_EPS);
        match r {
            Err(Error::Contract(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected non-finite rejection, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        // recip near zero: the value is finite but the analytic gradient
        // -1/x^2 overflows to -inf.
        let x = Tensor::new(&[1], vec![1e-200]).unwrap();
        let r = gradcheck(|g, x| Ok(g.recip(x)), &x, DEFAULT_EPS);
        match r {
            Err(Error::Contract(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected non-finite rejection, got {other:?}"),
        }
    }

    #[test]
    fn frozen_rng_inside_the_function_is_deterministic() {
        // A fixed-seed generator used while building the graph produces the
        // same constants every call, so the determinism check passes.
        let x = input(&[4], 2);
        let err = gradcheck(
            |g, x| {
                let mut rng = Rng::new(99);
                let noise = g.constant(Tensor::from_fn(&[4], |_| rng.next_f64()));
                let y = g.mul(x, noise)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn elementwise_op_gradients() {
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var) -> crate::error::Result<Var>>)> = vec![
            ("tanh", Box::new(|g: &mut Graph<f64>, x: Var| Ok(g.tanh(x)))),
            ("sigmoid", Box::new(|g, x| Ok(g.sigmoid(x)))),
            ("gelu", Box::new(|g, x| Ok(g.gelu(x)))),
            ("exp", Box::new(|g, x| Ok(g.exp(x)))),
            ("add_scalar", Box::new(|g, x| Ok(g.add_scalar(x, 0.7)))),
            ("mul_scalar", Box::new(|g, x| Ok(g.mul_scalar(x, -1.3)))),
        ];
        for (name, f) in cases {
            let x = input(&[2, 5], 3);
            let err = gradcheck(|g, v| f(g, v), &x, DEFAULT_EPS).unwrap();
            assert!(err < 1e-5, "{name}: err = {err:e}");
        }
        // Positive-domain ops.
        let pos: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var) -> crate::error::Result<Var>>)> = vec![
            ("sqrt", Box::new(|g: &mut Graph<f64>, x: Var| Ok(g.sqrt(x)))),
            ("ln", Box::new(|g, x| Ok(g.ln(x)))),
            ("recip", Box::new(|g, x| Ok(g.recip(x)))),
            ("abs", Box::new(|g, x| Ok(g.abs(x)))),
        ];
        for (name, f) in pos {
            let x = positive_input(&[7], 4);
            let err = gradcheck(|g, v| f(g, v), &x, DEFAULT_EPS).unwrap();
            assert!(err < 1e-5, "{name}: err = {err:e}");
        }
    }

    #[test]
    fn matmul_gradients_both_sides() {
        // Spec-level case: random 3x4 @ 4x2, both operand gradients.
        let a = input(&[3, 4], 5);
        let b = input(&[4, 2], 6);
        let err_a = gradcheck(
            |g, x| {
                let bv = g.constant(b.clone());
                g.matmul(x, bv)
            },
            &a,
            DEFAULT_EPS,
        )
        .unwrap();
        let err_b = gradcheck(
            |g, x| {
                let av = g.constant(a.clone());
                g.matmul(av, x)
            },
            &b,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err_a < 1e-7, "lhs err = {err_a:e}");
        assert!(err_b < 1e-7, "rhs err = {err_b:e}");
    }

    #[test]
    fn batched_matmul_gradients() {
        let a = input(&[2, 3, 4], 7);
        let shared = input(&[4, 2], 8);
        let batched = input(&[2, 4, 2], 9);
        let err = gradcheck(
            |g, x| {
                let b = g.constant(shared.clone());
                g.matmul(x, b)
            },
            &a,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7);
        let err = gradcheck(
            |g, x| {
                let a = g.constant(a.clone());
                g.matmul(a, x)
            },
            &shared,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "shared rhs accumulates over the batch");
        let err = gradcheck(
            |g, x| {
                let a = g.constant(a.clone());
                g.matmul(a, x)
            },
            &batched,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7);
    }

    #[test]
    fn conv_gradients() {
        let x = input(&[2, 3, 8], 10);
        let w = input(&[4, 3, 3], 11);
        for (stride, dilation, padding) in [(1, 1, 1), (2, 1, 0), (1, 2, 2)] {
            let err = gradcheck(
                |g, v| {
                    let wv = g.constant(w.clone());
                    g.conv1d(v, wv, stride, dilation, padding)
                },
                &x,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-6, "conv1d input grad: {err:e}");
            let err = gradcheck(
                |g, v| {
                    let xv = g.constant(x.clone());
                    g.conv1d(xv, v, stride, dilation, padding)
                },
                &w,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-6, "conv1d weight grad: {err:e}");
        }
        let w1 = input(&[3, 3], 12);
        let err = gradcheck(
            |g, v| {
                let wv = g.constant(w1.clone());
                g.dwconv1d(v, wv, 1)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
        let err = gradcheck(
            |g, v| {
                let xv = g.constant(x.clone());
                g.dwconv1d(xv, v, 1)
            },
            &w1,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn conv3d_gradients() {
        let x = input(&[1, 2, 3, 4, 4], 13);
        let w = input(&[2, 2, 3, 3, 3], 14);
        let err = gradcheck(
            |g, v| {
                let wv = g.constant(w.clone());
                g.conv3d(v, wv, (1, 1, 1))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
        let err = gradcheck(
            |g, v| {
                let xv = g.constant(x.clone());
                g.conv3d(xv, v, (1, 1, 1))
            },
            &w,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
        let dw = input(&[2, 3, 3, 3], 15);
        let err = gradcheck(
            |g, v| {
                let wv = g.constant(dw.clone());
                g.dwconv3d(v, wv, (1, 1, 1))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
        let err = gradcheck(
            |g, v| {
                let xv = g.constant(x.clone());
                g.dwconv3d(xv, v, (1, 1, 1))
            },
            &dw,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn structural_op_gradients() {
        let x = input(&[2, 3, 4], 16);
        let err = gradcheck(|g, v| g.sum_axes(v, &[1], false), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8);
        let err = gradcheck(|g, v| g.mean_axes(v, &[0, 2], true), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8);
        let err = gradcheck(|g, v| g.reshape(v, &[6, 4]), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8);
        let err = gradcheck(|g, v| g.permute(v, &[2, 0, 1]), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8);
        let small = input(&[1, 3, 1], 17);
        let err = gradcheck(|g, v| g.broadcast(v, &[2, 3, 4]), &small, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8);
        // Gather with repeated indices exercises the scatter-add backward.
        let err = gradcheck(|g, v| g.index_select(v, 1, &[0, 2, 2, 1]), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8);
        let err = gradcheck(
            |g, v| {
                let other = g.mul_scalar(v, 2.0);
                g.concat(&[v, other], 2)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8);
        let err = gradcheck(|g, v| g.maxpool1d(v, 3, 1, 1), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn log_softmax_and_softmax_gradients() {
        let x = input(&[3, 5], 18);
        let err = gradcheck(|g, v| g.log_softmax(v, 1), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-7, "log_softmax err = {err:e}");
        let err = gradcheck(|g, v| g.softmax(v, 1), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-6, "softmax err = {err:e}");
        let inner = input(&[2, 4, 3], 19);
        let err = gradcheck(|g, v| g.log_softmax(v, 1), &inner, DEFAULT_EPS).unwrap();
        assert!(err < 1e-7, "inner-axis log_softmax err = {err:e}");
    }

    #[test]
    fn ctc_gradient_including_duplicate_targets() {
        for (targets, seed) in [(vec![1usize, 2], 20u64), (vec![1, 1], 21), (vec![2, 2, 2], 22)] {
            let x = input(&[6, 4], seed);
            let err = gradcheck(
                |g, v| {
                    let lp = g.log_softmax(v, 1)?;
                    g.ctc_loss(lp, &targets, 3)
                },
                &x,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-6, "targets {targets:?}: err = {err:e}");
        }
    }

    #[test]
    fn two_layer_matmul_chain() {
        let x = input(&[3, 4], 23);
        let w1 = input(&[4, 5], 24);
        let w2 = input(&[5, 2], 25);
        let err = gradcheck(
            |g, v| {
                let w1 = g.constant(w1.clone());
                let w2 = g.constant(w2.clone());
                let h = g.matmul(v, w1)?;
                let a = g.tanh(h);
                g.matmul(a, w2)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "chain err = {err:e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_pipelines_pass_gradcheck(seed in 0u64..10_000) {
            // A mixed pipeline over randomized shapes: every differentiable
            // op family participates across the seed range.
            let mut rng = Rng::new(seed);
            let b = 1 + rng.below(2);
            let c = 2 + rng.below(3);
            let t = 5 + rng.below(4);
            let x = Tensor::<f64>::from_fn(&[b, c, t], |_| 2.0 * rng.next_f64() - 1.0);
            let w = Tensor::<f64>::from_fn(&[c, c, 3], |_| rng.next_f64() - 0.5);
            let err = gradcheck(
                |g, v| {
                    let wv = g.constant(w.clone());
                    let h = g.conv1d(v, wv, 1, 1, 1)?;
                    let a = g.gelu(h);
                    let p = g.maxpool1d(a, 3, 1, 1)?;
                    let m = g.mean_axes(p, &[2], false)?;
                    let s = g.log_softmax(m, 1)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum_all(sq))
                },
                &x,
                DEFAULT_EPS,
            ).unwrap();
            prop_assert!(err < 1e-5, "seed {}: err = {:e}", seed, err);
        }
    }
}
