//! Autodiff checked against central finite differences and naive oracles.

use mpma::rng::SeededRng;
use mpma::{Tape, Tensor, Var};
use proptest::prelude::*;

type T = f64;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.range(-2.0, 2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `graph(inputs)` to a scalar, then compares autodiff gradients
/// against central differences on every input entry.
fn check_gradients(
    inputs: &[Tensor<T>],
    graph: &dyn Fn(&Tape<T>, &[Var]) -> Var,
) -> f64 {
    let eval = |xs: &[Tensor<T>]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = graph(&tape, &vars);
        tape.item(out)
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = graph(&tape, &vars);
    let grads = tape.backward(out).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

/// Weighted sum with fixed non-uniform weights so every output entry
/// contributes a distinct gradient.
fn weighted_sum(tape: &Tape<T>, y: Var) -> Var {
    let shape = tape.shape(y);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * (i as f64 * 1.3).sin()).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_identity_and_known_product() {
    let tape = Tape::<T>::new();
    let a = tape.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let i = tape.constant(Tensor::eye(2));
    let ai = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(ai).data(), &[1., 2., 3., 4.]);

    let b = tape.constant(Tensor::from_f64(&[2, 2], &[5., 6., 7., 8.]).unwrap());
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let tape = Tape::<T>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn elementwise_shape_mismatch_is_rejected() {
    let tape = Tape::<T>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn softmax_spot_values() {
    let tape = Tape::<T>::new();
    let x = tape.constant(Tensor::from_f64(&[2], &[0., 0.]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    // Direct formula e^k / (e + e² + e³) at f64.
    let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    let expected: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
    for (got, (want, quoted)) in tape.value(y).data().iter().zip(expected.iter().zip([0.09003, 0.24473, 0.66524])) {
        assert!((got - want).abs() < 1e-12);
        assert!((got - quoted).abs() < 1e-5);
    }

    let x = tape.constant(Tensor::from_f64(&[2], &[1000., 0.]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y);
    assert!(v.all_finite());
    assert_eq!(v.data()[0], 1.0);
    assert!(v.data()[1] < 1e-300);
}

#[test]
fn layer_norm_spot_values() {
    let tape = Tape::<T>::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::from_f64(&[2], &[1., 3.]).unwrap());
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

    let x = tape.constant(Tensor::full(&[4], 2.5));
    let g4 = tape.constant(Tensor::ones(&[4]));
    let b4 = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g4, b4, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::from_f64(&[2, 3], &[1., -2., 4., 0.5, 0.7, 9.]).unwrap());
    let g0 = tape.constant(Tensor::zeros(&[3]));
    let bias = tape.constant(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
    let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::<T>::new();
    let x = tape.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::<T>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[2., 4., 6.]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let tape = Tape::<T>::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    assert!(tape.backward(x).is_err());

    let other = Tape::<T>::new();
    let y = other.leaf(Tensor::zeros(&[1]));
    assert!(tape.backward(y).is_err());
}

#[test]
fn fan_out_accumulates() {
    // y = sum(x * 3) + sum(exp(x)); x feeds two consumers.
    let tape = Tape::<T>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
    let a = tape.scale(x, 3.0);
    let b = tape.exp(x);
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    let y = tape.add(sa, sb).unwrap();
    let g = tape.backward(y).unwrap();
    let got = g.wrt(x);
    assert!((got.data()[0] - (3.0 + 0.5f64.exp())).abs() < 1e-12);
    assert!((got.data()[1] - (3.0 + (-1.0f64).exp())).abs() < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<T>::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let x = tape.leaf(Tensor::ones(&[2]));
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

/// Every differentiable op, each through a weighted scalar readout.
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = SeededRng::new(11);
    let tol = 1e-4;
    type Graph = Box<dyn Fn(&Tape<T>, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Graph)> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| weighted_sum(t, t.add(v[0], v[1]).unwrap()))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| weighted_sum(t, t.sub(v[0], v[1]).unwrap()))),
        ("mul", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| weighted_sum(t, t.mul(v[0], v[1]).unwrap()))),
        (
            "div",
            vec![vec![4], vec![4]],
            Box::new(|t, v| {
                // Keep the denominator away from zero: 3 + exp(x).
                let e = t.exp(v[1]);
                let three = t.constant(Tensor::full(&[4], 3.0));
                let den = t.add(e, three).unwrap();
                weighted_sum(t, t.div(v[0], den).unwrap())
            }),
        ),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|t, v| weighted_sum(t, t.add_row(v[0], v[1]).unwrap()))),
        ("scale", vec![vec![5]], Box::new(|t, v| weighted_sum(t, t.scale(v[0], -1.7)))),
        ("exp", vec![vec![2, 2]], Box::new(|t, v| weighted_sum(t, t.exp(v[0])))),
        (
            "log",
            vec![vec![3]],
            Box::new(|t, v| {
                let e = t.exp(v[0]);
                let one = t.constant(Tensor::ones(&[3]));
                let pos = t.add(e, one).unwrap();
                weighted_sum(t, t.log(pos))
            }),
        ),
        ("gelu", vec![vec![6]], Box::new(|t, v| weighted_sum(t, t.gelu(v[0])))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| weighted_sum(t, t.matmul(v[0], v[1]).unwrap()))),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], Box::new(|t, v| weighted_sum(t, t.matmul_nt(v[0], v[1]).unwrap()))),
        ("transpose", vec![vec![2, 3]], Box::new(|t, v| weighted_sum(t, t.transpose(v[0]).unwrap()))),
        ("reshape", vec![vec![2, 3]], Box::new(|t, v| weighted_sum(t, t.reshape(v[0], &[3, 2]).unwrap()))),
        ("softmax0", vec![vec![3, 4]], Box::new(|t, v| weighted_sum(t, t.softmax(v[0], 0).unwrap()))),
        ("softmax1", vec![vec![3, 4]], Box::new(|t, v| weighted_sum(t, t.softmax(v[0], 1).unwrap()))),
        ("log_softmax", vec![vec![3, 4]], Box::new(|t, v| weighted_sum(t, t.log_softmax(v[0], 1).unwrap()))),
        ("logsumexp", vec![vec![2, 3, 2]], Box::new(|t, v| weighted_sum(t, t.logsumexp(v[0], 1).unwrap()))),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|t, v| weighted_sum(t, t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        ),
        ("sum", vec![vec![2, 3]], Box::new(|t, v| t.sum(t.exp(v[0])))),
        ("mean", vec![vec![2, 3]], Box::new(|t, v| t.mean(t.exp(v[0])))),
        ("sum_axis", vec![vec![2, 3, 2]], Box::new(|t, v| weighted_sum(t, t.sum_axis(v[0], 1).unwrap()))),
        ("mean_axis", vec![vec![4, 3]], Box::new(|t, v| weighted_sum(t, t.mean_axis(v[0], 0).unwrap()))),
        ("max_axis", vec![vec![4, 3]], Box::new(|t, v| weighted_sum(t, t.max_axis(v[0], 0).unwrap()))),
        (
            "concat0",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(|t, v| weighted_sum(t, t.concat(&[v[0], v[1]], 0).unwrap())),
        ),
        (
            "concat1",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(|t, v| weighted_sum(t, t.concat(&[v[0], v[1]], 1).unwrap())),
        ),
        (
            "gather_rows",
            vec![vec![4, 3]],
            Box::new(|t, v| weighted_sum(t, t.gather_rows(v[0], &[2, 0, 2]).unwrap())),
        ),
        (
            "embedding",
            vec![vec![5, 2]],
            Box::new(|t, v| weighted_sum(t, t.embedding(v[0], &[4, 1, 1, 0]).unwrap())),
        ),
        (
            "scatter_rows",
            vec![vec![2, 3]],
            Box::new(|t, v| weighted_sum(t, t.scatter_rows(v[0], &[3, 1], 4).unwrap())),
        ),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, v| weighted_sum(t, t.slice_cols(v[0], 1, 3).unwrap()))),
        ("normalize_rows", vec![vec![3, 4]], Box::new(|t, v| weighted_sum(t, t.normalize_rows(v[0], 1e-12)))),
        (
            "pick_per_row",
            vec![vec![3, 4]],
            Box::new(|t, v| weighted_sum(t, t.pick_per_row(v[0], &[3, 0, 1]).unwrap())),
        ),
    ];
    for (name, shapes, graph) in cases {
        for _ in 0..3 {
            let inputs: Vec<Tensor<T>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = check_gradients(&inputs, graph.as_ref());
            assert!(err < tol, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = SeededRng::new(5);
    let inputs = vec![random(&[3, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4], &mut rng)];
    let err = check_gradients(&inputs, &|t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let h = t.gelu(h);
        let s = t.softmax(h, 1).unwrap();
        let k = t.matmul_nt(s, v[0]).unwrap();
        let l = t.log_softmax(k, 0).unwrap();
        weighted_sum(t, l)
    });
    assert!(err < 1e-4, "{err:e}");
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, axis in 0usize..2) {
        let mut rng = SeededRng::new(seed);
        let x = random(&[rows, cols], &mut rng).map(|v| v * 10.0);
        let tape = Tape::<T>::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, axis).unwrap();
        let y = tape.value(y).clone();
        let (outer, len) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        for o in 0..outer {
            let mut s = 0.0;
            for l in 0..len {
                let v = if axis == 0 { y.at2(l, o) } else { y.at2(o, l) };
                prop_assert!(v > 0.0 && v <= 1.0);
                s += v;
            }
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
