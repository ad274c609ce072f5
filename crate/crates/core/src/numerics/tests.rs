use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![r, c], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::<f64>::standalone();
    let i2 = g.leaf(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.leaf(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.leaf(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let b = g.leaf(&Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let out = g.matmul(p, b).unwrap();
    assert_eq!(g.value(out), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let mut expected = [0.0f64; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
    let mut g = Graph::<f64>::standalone();
    let (va, vb) = (g.leaf(&a), g.leaf(&b));
    let out = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(out).iter().zip(expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::standalone();
    let a = g.leaf(&Tensor::zeros(vec![2, 3]));
    let b = g.leaf(&Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f64>::standalone();
    let x = g.leaf(&Tensor::from_rows(&[&[0.0, 0.0, 0.0]]));
    let y = g.softmax(x, 1).unwrap();
    for v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.leaf(&Tensor::from_rows(&[&[1000.0, 0.0]]));
    let y = g.softmax(x, 1).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-12 && g.value(y)[1] >= 0.0);
    assert!(g.value(y).iter().all(|v| v.is_finite()));

    let x = g.leaf(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
    let y = g.softmax(x, 1).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in g.value(y).iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
    // column axis
    let x = g.leaf(&Tensor::from_rows(&[&[1.0, 5.0], &[1.0, 5.0]]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::standalone();
    let ones = g.constant(1, 4, vec![1.0; 4]).unwrap();
    let zeros = g.constant(1, 4, vec![0.0; 4]).unwrap();
    let x = g.leaf(&Tensor::from_rows(&[&[3.0, 3.0, 3.0, 3.0]]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let bias = g.constant(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let x = g.leaf(&Tensor::from_rows(&[&[1.0, 2.0, 7.0, -3.0]]));
    let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.5, -1.0, 2.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random(&mut rng, 4, 8);
    let ones8 = g.constant(1, 8, vec![1.0; 8]).unwrap();
    let zeros8 = g.constant(1, 8, vec![0.0; 8]).unwrap();
    let x = g.leaf(&t);
    let y = g.layer_norm(x, ones8, zeros8, 1e-5).unwrap();
    for row in g.value(y).chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn backward_simple_rules() {
    let mut g = Graph::<f64>::standalone();
    let t = Tensor::from_rows(&[&[1.0, -2.0, 3.0]]).with_grad();
    let x = g.leaf(&t);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::standalone();
    let x = g.leaf(&t);
    let xx = g.mul(x, x).unwrap();
    let s = g.sum(xx);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_twice_is_a_state_error() {
    let mut g = Graph::<f64>::standalone();
    let x = g.leaf(&Tensor::from_rows(&[&[1.0]]).with_grad());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(NumericsError::State(_))));
    g.reset_grads();
    g.backward(s).unwrap();
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::<f64>::standalone();
    let x = g.leaf(&Tensor::from_rows(&[&[1.0, 2.0]]).with_grad());
    let sg = g.stop_gradient(x);
    assert_eq!(g.value(sg), g.value(x));
    let prod = g.mul(sg, x).unwrap();
    let s = g.sum(prod);
    g.backward(s).unwrap();
    // only the direct path contributes: d/dx (c·x) = c
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    assert!(g.grad(sg).is_none());
}

#[test]
fn non_finite_loss_is_rejected() {
    let mut g = Graph::<f64>::standalone();
    let x = g.leaf(&Tensor::from_rows(&[&[f64::NAN]]).with_grad());
    let s = g.sum(x);
    assert!(matches!(g.backward(s), Err(NumericsError::NonFinite(_))));
}

/// Builds a composite expression touching every primitive and returns the
/// scalar loss; `inputs` are the trainable leaves.
fn composite(g: &mut Graph<'static, f64>, inputs: &[Tensor<f64>]) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let (a, b, gain, bias, table) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
    let ab = g.matmul(a, b).unwrap(); // 3×4
    let bt = g.transpose(b); // 4×5
    let abt = g.matmul(ab, bt).unwrap(); // 3×5
    let rows = g.slice(abt, 1, 0, 4).unwrap(); // 3×4
    let ln = g.layer_norm(rows, gain, bias, 1e-5).unwrap();
    let act = g.gelu(ln);
    let emb = g.gather_rows(table, &[2, 0, 2]).unwrap(); // 3×4
    let mixed = g.mul(act, emb).unwrap();
    let sum = g.add(mixed, ab).unwrap();
    let diff = g.sub(sum, emb).unwrap();
    let shifted = g.add_row(diff, bias).unwrap();
    let scaled = g.mul_row(shifted, gain).unwrap();
    let sc = g.scale(scaled, 0.7);
    let plus = g.add_scalar(sc, 0.1);
    let cat = g.concat(&[plus, ab], 0).unwrap(); // 6×4
    let catc = g.concat(&[cat, cat], 1).unwrap(); // 6×8
    let keep: Vec<bool> = (0..48).map(|i| i % 7 != 3).collect();
    let filled = g.masked_fill(catc, &keep, -1e9).unwrap();
    let sm = g.softmax(filled, 1).unwrap();
    let sm0 = g.softmax(catc, 0).unwrap();
    let r = g.reshape(sm, 8, 6).unwrap();
    let logits = g.slice(r, 0, 2, 4).unwrap();
    let logits = g.scale(logits, 3.0);
    let ce = g.cross_entropy(logits, &[1, 5, 0, 3]).unwrap();
    let extra = g.mean(sm0);
    let total = g.add(ce, extra).unwrap();
    (total, vars)
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Tensor<f64>> = [(3, 5), (5, 4), (1, 4), (1, 4), (3, 4)]
        .iter()
        .map(|&(r, c)| random(&mut rng, r, c).with_grad())
        .collect();
    let mut g = Graph::<f64>::standalone();
    let (loss, vars) = composite(&mut g, &inputs);
    g.backward(loss).unwrap();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(|s| s.to_vec())
            .unwrap_or(vec![0.0; t.len()]);
        let numeric = finite_difference(t.data(), 1e-4, |x| {
            let mut probe = inputs.clone();
            probe[k] = Tensor::new(t.shape().to_vec(), x.to_vec())
                .unwrap()
                .with_grad();
            let mut g2 = Graph::<f64>::standalone();
            let (l, _) = composite(&mut g2, &probe);
            g2.scalar(l)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                relative_error(*a, *n) < 1e-4,
                "input {k}: analytic {a} numeric {n}"
            );
        }
    }
}

#[test]
fn gradients_accumulate_for_reused_leaves() {
    let mut g = Graph::<f64>::standalone();
    let x = g.leaf(&Tensor::from_rows(&[&[2.0, 3.0]]).with_grad());
    let y = g.add(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let s = g.sum(z);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn param_leaves_are_shared() {
    let params = vec![Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).with_grad()];
    let mut g = Graph::new(&params);
    let p1 = g.param(0);
    let p2 = g.param(0);
    assert_eq!(p1, p2);
    let m = g.mul(p1, p2).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.param_grad(0).unwrap(), &[2.0, 4.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
            let rows = vals.len() / cols;
            prop_assume!(rows >= 1);
            let data = vals[..rows * cols].to_vec();
            let mut g = Graph::<f64>::standalone();
            let x = g.constant(rows, cols, data).unwrap();
            let y = g.softmax(x, 1).unwrap();
            for row in g.value(y).chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn stop_gradient_is_value_identity(vals in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
            let n = vals.len();
            let mut g = Graph::<f64>::standalone();
            let x = g.leaf(&Tensor::new(vec![1, n], vals.clone()).unwrap().with_grad());
            let y = g.stop_gradient(x);
            prop_assert_eq!(g.value(y), vals.as_slice());
            let s = g.sum(y);
            g.backward(s).unwrap();
            prop_assert!(g.grad(x).is_none());
        }
    }
}
