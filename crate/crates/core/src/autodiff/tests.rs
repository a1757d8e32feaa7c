// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::numerics::{RngStream, Tensor};

fn rand_tensor(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.normal())
}

/// Builds `sum(op(inputs) ⊙ R)` for a fixed random `R` so every output
/// element contributes to the scalar being differentiated.
fn projected<F>(tape: &mut Tape, vars: &[Var], op: &F, seed: u64) -> Var
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let out = op(tape, vars);
    let shape = tape.value(out).shape().to_vec();
    let mut rng = RngStream::new(seed);
    let n: usize = shape.iter().product();
    let r = Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap();
    let r = tape.constant(r);
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

fn check_primitive<F>(inputs: Vec<Tensor>, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = projected(&mut tape, &vars, &op, 99);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    for (k, base) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut t2 = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        t2.input(t)
                    })
                    .collect();
                let l = projected(&mut t2, &vs, &op, 99);
                t2.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            assert!(
                err < 1e-4,
                "input {k} coord {i}: analytic {} numeric {numeric} (rel {err})",
                analytic.data()[i]
            );
        }
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = RngStream::new(7);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 5);
    let c = rand_tensor(&mut rng, 3, 4);
    let bias = Tensor::vector((0..4).map(|_| rng.normal()).collect());
    let sq = rand_tensor(&mut rng, 4, 4);

    check_primitive(vec![a.clone(), b.clone()], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_primitive(vec![a.clone(), c.clone()], |t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
    check_primitive(vec![a.clone(), c.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_primitive(vec![a.clone(), bias.clone()], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check_primitive(vec![a.clone(), c.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check_primitive(vec![a.clone()], |t, v| t.scale(v[0], -1.7));
    check_primitive(vec![a.clone()], |t, v| t.softmax(v[0]));
    check_primitive(vec![sq.clone()], |t, v| t.causal_softmax(v[0]).unwrap());
    check_primitive(vec![a.clone(), bias.clone(), bias.scale(0.5)], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check_primitive(vec![a.clone()], |t, v| t.gelu(v[0]));
    check_primitive(vec![a.clone()], |t, v| {
        t.gather_rows(v[0], &[2, 0, 2]).unwrap()
    });
    check_primitive(vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap());
    check_primitive(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap());
    check_primitive(vec![a.clone(), c.clone()], |t, v| {
        t.concat_rows(&[v[0], v[1]]).unwrap()
    });
    check_primitive(vec![a.clone(), c.clone()], |t, v| {
        t.concat_cols(&[v[1], v[0]]).unwrap()
    });
    check_primitive(vec![a.clone()], |t, v| t.mean(v[0]));
    check_primitive(vec![a.clone(), c.clone()], |t, v| {
        t.cosine_rows(v[0], v[1]).unwrap()
    });
    check_primitive(vec![a.clone()], |t, v| {
        t.cross_entropy(v[0], &[3, 0, 1]).unwrap()
    });
}

#[test]
fn add_zero_is_identity() {
    let mut tape = Tape::new();
    let x = Tensor::from_rows(&[vec![1.5, -2.0]]);
    let a = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let s = tape.add(a, z).unwrap();
    assert_eq!(tape.value(s), &x);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 3]));
    let s = tape.softmax(a);
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = RngStream::new(3);
    let x = Tensor::from_fn(5, 16, |_, _| 3.0 + 2.0 * rng.normal());
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[16], 1.0));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
    let y = tape.value(y);
    for i in 0..5 {
        let row = y.row(i);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn stop_gradient_forward_is_bitwise_identity() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![0.1, -3.3, 7.0]));
    let s = tape.stop_gradient(x);
    assert_eq!(tape.value(s), tape.value(x));
}

#[test]
fn stop_gradient_blocks_one_factor() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::scalar(3.0));
    let sx = tape.stop_gradient(x);
    let y = tape.mul(x, sx).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 3.0);
}

#[test]
fn loss_through_stop_gradient_only_gives_zero_param_grads() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0]), true);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let s = tape.stop_gradient(wv);
    let sq = tape.mul(s, s).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    tape.accumulate_param_grads(&grads, &mut store).unwrap();
    assert!(store.get(w).grad.data().iter().all(|g| g.to_bits() == 0));
    let reach = tape.reachability(loss);
    assert!(!reach[wv.index()].direct && reach[wv.index()].through_stop);
}

#[test]
fn quadratic_gradient_and_accumulation() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.5, -1.5, 2.0]), true);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store).unwrap();
    }
    assert_eq!(store.get(w).grad.data(), &[2.0, -6.0, 8.0]);
    store.zero_grads();
    assert_eq!(store.get(w).grad.data(), &[0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = RngStream::new(11);
    let a = rand_tensor(&mut rng, 4, 3);
    let b = rand_tensor(&mut rng, 3, 2);
    let grad_of = |wa: f64, wb: f64| {
        let mut tape = Tape::new();
        let x = tape.input(a.clone());
        let w = tape.constant(b.clone());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.gelu(y);
        let l1 = tape.mean(y);
        let sq = tape.mul(x, x).unwrap();
        let l2 = tape.sum(sq);
        let s1 = tape.scale(l1, wa);
        let s2 = tape.scale(l2, wb);
        let l = tape.add(s1, s2).unwrap();
        tape.backward(l).unwrap().get(x).unwrap().clone()
    };
    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    let combo = grad_of(0.7, -1.3);
    let expected = g1.scale(0.7).add(&g2.scale(-1.3)).unwrap();
    assert!(combo.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn cosine_loss_gradient_matches_finite_differences() {
    let mut rng = RngStream::new(5);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&mut rng, 3, 4), true);
    let target = rand_tensor(&mut rng, 2, 4);
    let input = rand_tensor(&mut rng, 2, 3);
    let eval = |store: &ParamStore, backward: bool| -> (f64, Option<(Tape, Grads)>) {
        let mut tape = Tape::new();
        let wv = tape.param(store, w);
        let x = tape.constant(input.clone());
        let t = tape.constant(target.clone());
        let h = tape.matmul(x, wv).unwrap();
        let h = tape.gelu(h);
        let c = tape.cosine_rows(h, t).unwrap();
        let l = tape.mean(c);
        let v = tape.value(l).item();
        if backward {
            let g = tape.backward(l).unwrap();
            (v, Some((tape, g)))
        } else {
            (v, None)
        }
    };
    let (_, tg) = eval(&store, true);
    let (tape, grads) = tg.unwrap();
    tape.accumulate_param_grads(&grads, &mut store).unwrap();
    let report =
        finite_diff_check(&mut store, |s| Ok(eval(s, false).0), &FdOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn finite_diff_sum_of_squares_and_constant() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.3, -1.1, 2.5, 0.0]), true);
    let f = |s: &ParamStore| Ok(s.value(w).norm_sq());
    let grad = store.value(w).scale(2.0);
    store.accumulate_grad(w, &grad).unwrap();
    let r = finite_diff_check(&mut store, f, &FdOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    store.zero_grads();
    let r = finite_diff_check(&mut store, |_| Ok(4.0), &FdOptions::default()).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert_eq!(r.coords_checked, 4);
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(1e-11, -5e-11), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
}
