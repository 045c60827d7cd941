use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> rng::Rng {
    SeedStream::new(seed).rng()
}

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f32>::new();
    let eye = g.leaf(&t32(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.leaf(&t32(&[2, 2], &[1., 2., 3., 4.]));
    let out = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(out), &[1., 2., 3., 4.]);

    let a = g.leaf(&t32(&[1, 2], &[1., 2.]));
    let b = g.leaf(&t32(&[2, 1], &[3., 4.]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out), &[11.]);
    assert_eq!(g.shape(out), &[1, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(&Tensor::zeros(&[2, 3]));
    let b = g.leaf(&Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
}

#[test]
fn matmul_grad_matches_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::<f32>::uniform(&[4, 2], -1.0, 1.0, &mut r);
    let err = grad_check(
        |g, x| {
            let bv = g.leaf(&b);
            let c = g.matmul(x, bv)?;
            Ok(g.sum(c))
        },
        &a,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");

    // dB path through the same op, and the transposed variant.
    let err = grad_check(
        |g, x| {
            let av = g.leaf(&a);
            let c = g.matmul(av, x)?;
            let c = g.tanh(c);
            Ok(g.sum(c))
        },
        &b,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
    let bt = Tensor::<f32>::uniform(&[5, 4], -1.0, 1.0, &mut r);
    for which in 0..2 {
        let x0 = if which == 0 { a.clone() } else { bt.clone() };
        let err = grad_check(
            |g, x| {
                let (l, rr) = if which == 0 { (x, g.leaf(&bt)) } else { (g.leaf(&a), x) };
                let c = g.matmul_bt(l, rr)?;
                let c = g.tanh(c);
                Ok(g.sum(c))
            },
            &x0,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
    let y = g.gelu(x);
    assert_eq!(g.value(y)[0], 0.0);
    assert!((g.value(y)[1] - 0.841345).abs() < 1e-5);

    let a = g.leaf(&Tensor::from_f64(&[2], &[1., 2.]).unwrap());
    let b = g.leaf(&Tensor::from_f64(&[2], &[3., 4.]).unwrap());
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s), &[4., 6.]);

    let m = g.leaf(&Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let bias = g.leaf(&Tensor::from_f64(&[2], &[10., 20.]).unwrap());
    let s = g.add(m, bias).unwrap();
    assert_eq!(g.value(s), &[11., 22., 13., 24.]);
    let p = g.mul(m, bias).unwrap();
    assert_eq!(g.value(p), &[10., 40., 30., 80.]);

    let bad = g.leaf(&Tensor::zeros(&[3]));
    assert!(matches!(g.add(m, bad), Err(Error::Dimension(_))));
    assert!(matches!(g.mul(bad, m), Err(Error::Dimension(_))));
}

#[test]
fn gelu_oracle_against_erf() {
    // Exact-form GELU evaluated independently in f64.
    for x in [-3.0, -1.0, -0.25, 0.5, 1.0, 2.0] {
        let expect = 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::scalar(x));
        let y = g.gelu(v);
        assert!((g.item(y) - expect).abs() < 1e-12);
    }
}

#[test]
fn elementwise_grads() {
    let mut r = rng(2);
    let x = Tensor::<f32>::uniform(&[8], -2.0, 2.0, &mut r);
    let w = Tensor::<f32>::uniform(&[8], -1.0, 1.0, &mut r);
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f32>, Var) -> crate::Result<Var>>)> = vec![
        ("sum", Box::new(|g, x| Ok(g.sum(x)))),
        ("gelu", Box::new(|g, x| {
            let y = g.gelu(x);
            Ok(g.sum(y))
        })),
        ("tanh", Box::new(|g, x| {
            let y = g.tanh(x);
            Ok(g.sum(y))
        })),
        ("exp", Box::new(|g, x| {
            let y = g.exp(x);
            Ok(g.sum(y))
        })),
        ("mul", Box::new(move |g, x| {
            let wv = g.leaf(&w);
            let y = g.mul(x, wv)?;
            let y = g.mul(y, x)?;
            Ok(g.sum(y))
        })),
        ("scale", Box::new(|g, x| {
            let y = g.scale(x, 0.3);
            let y = g.exp(y);
            Ok(g.sum(y))
        })),
    ];
    for (name, f) in cases {
        let err = grad_check(f, &x, DEFAULT_STEP).unwrap();
        let tol = if name == "sum" { 1e-6 } else { 1e-3 };
        assert!(err < tol, "{name}: {err}");
    }
}

#[test]
fn broadcast_grads() {
    let mut r = rng(3);
    let x = Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::<f32>::uniform(&[4], -1.0, 1.0, &mut r);
    let err = grad_check(
        |g, bv| {
            let xv = g.leaf(&x);
            let y = g.add(xv, bv)?;
            let y = g.mul(y, bv)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        },
        &b,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.leaf(&Tensor::full(&[4], 3.7));
    let y = g.softmax(c);
    assert!(g.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-12));
    let x = g.leaf(&Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
    let y = g.softmax(x);
    assert!((g.value(y)[0] - 0.25).abs() < 1e-12);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_grad() {
    let mut r = rng(4);
    let x = Tensor::<f32>::uniform(&[2, 5], -1.0, 1.0, &mut r);
    let w = Tensor::<f32>::uniform(&[2, 5], -1.0, 1.0, &mut r);
    let err = grad_check(
        |g, xv| {
            let y = g.softmax(xv);
            let wv = g.leaf(&w);
            let y = g.mul(y, wv)?;
            Ok(g.sum(y))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let one = g.leaf(&Tensor::full(&[2], 1.0));
    let zero = g.leaf(&Tensor::zeros(&[2]));
    let c = g.leaf(&Tensor::full(&[3, 2], 5.0));
    let y = g.layer_norm(c, one, zero, LN_EPS).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let x = g.leaf(&Tensor::from_f64(&[2], &[1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, one, zero, 0.0).unwrap();
    assert_eq!(g.value(y), &[-1.0, 1.0]);

    let bad = g.leaf(&Tensor::zeros(&[3]));
    assert!(g.layer_norm(x, bad, zero, 0.0).is_err());
}

#[test]
fn layer_norm_grads() {
    let mut r = rng(5);
    let x = Tensor::<f32>::uniform(&[3, 6], -1.0, 1.0, &mut r);
    let gain = Tensor::<f32>::uniform(&[6], 0.5, 1.5, &mut r);
    let bias = Tensor::<f32>::uniform(&[6], -0.5, 0.5, &mut r);
    let w = Tensor::<f32>::uniform(&[3, 6], -1.0, 1.0, &mut r);
    let head = |g: &mut Graph<f32>, y: Var| -> crate::Result<Var> {
        let wv = g.leaf(&w);
        let y = g.mul(y, wv)?;
        Ok(g.sum(y))
    };
    let err = grad_check(
        |g, xv| {
            let (gv, bv) = (g.leaf(&gain), g.leaf(&bias));
            let y = g.layer_norm(xv, gv, bv, LN_EPS)?;
            head(g, y)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "x: {err}");
    let err = grad_check(
        |g, gv| {
            let (xv, bv) = (g.leaf(&x), g.leaf(&bias));
            let y = g.layer_norm(xv, gv, bv, LN_EPS)?;
            head(g, y)
        },
        &gain,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "gain: {err}");
    let err = grad_check(
        |g, bv| {
            let (xv, gv) = (g.leaf(&x), g.leaf(&gain));
            let y = g.layer_norm(xv, gv, bv, LN_EPS)?;
            head(g, y)
        },
        &bias,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "bias: {err}");
}

/// Scalar log-sum-exp transcription of the masked mean NLL.
fn ce_oracle(logits: &[f64], v: usize, labels: &[i64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (t, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        let row = &logits[t * v..(t + 1) * v];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[l as usize];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f32>::new();
    let logits = g.leaf(&Tensor::zeros(&[3, 4]).with_requires_grad(true));
    let loss = g.masked_cross_entropy(logits, &[IGNORE_INDEX; 3], IGNORE_INDEX).unwrap();
    assert_eq!(g.item(loss), 0.0);
    g.backward(loss).unwrap();
    assert!(g.grad(logits).unwrap().iter().all(|&v| v == 0.0));

    let two = g.leaf(&Tensor::zeros(&[1, 2]));
    let loss = g.masked_cross_entropy(two, &[1], IGNORE_INDEX).unwrap();
    assert!((g.item(loss) as f64 - 2f64.ln()).abs() < 1e-6);

    let err = g.masked_cross_entropy(two, &[2], IGNORE_INDEX).unwrap_err();
    assert!(matches!(err, Error::Validation(ref m) if m.contains("position 0")), "{err}");
}

#[test]
fn cross_entropy_matches_oracle() {
    let mut r = rng(6);
    let (t, v) = (6, 11);
    let x = Tensor::<f64>::uniform(&[t, v], -3.0, 3.0, &mut r);
    let labels: Vec<i64> = (0..t)
        .map(|i| if i % 3 == 1 { IGNORE_INDEX } else { r.random_range(0..v as i64) })
        .collect();
    let mut g = Graph::new();
    let lv = g.leaf(&x);
    let loss = g.masked_cross_entropy(lv, &labels, IGNORE_INDEX).unwrap();
    assert!((g.item(loss) - ce_oracle(x.data(), v, &labels)).abs() < 1e-6);

    let xf: Tensor<f32> = x.cast();
    let err = grad_check(|g, xv| g.masked_cross_entropy(xv, &labels, IGNORE_INDEX), &xf, DEFAULT_STEP).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    let h = 1e-4;
    let fd = ((3.0 + h) * (3.0 + h) - (3.0 - h) * (3.0 - h)) / (2.0 * h);
    let grad = g.grad(x).unwrap()[0];
    assert_eq!(grad, 6.0);
    assert!((grad - fd).abs() / fd < 1e-6);

    // Accumulation across calls.
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap()[0], 12.0);

    let v = g.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(matches!(g.backward(v), Err(Error::Usage(_))));
}

#[test]
fn frozen_leaf_gets_no_grad_and_others_are_unchanged() {
    let mut r = rng(7);
    let a = Tensor::<f32>::uniform(&[2, 3], -1.0, 1.0, &mut r);
    let b = Tensor::<f32>::uniform(&[3, 2], -1.0, 1.0, &mut r);
    let run = |freeze_b: bool| {
        let mut g = Graph::new();
        let av = g.leaf(&a.clone().with_requires_grad(true));
        let bv = g.leaf(&b.clone().with_requires_grad(!freeze_b));
        let c = g.matmul(av, bv).unwrap();
        let c = g.gelu(c);
        let s = g.sum(c);
        g.backward(s).unwrap();
        (g.grad(av).unwrap().to_vec(), g.grad(bv).map(<[f32]>::to_vec))
    };
    let (ga_full, gb_full) = run(false);
    let (ga_frozen, gb_frozen) = run(true);
    assert!(gb_full.is_some());
    assert!(gb_frozen.is_none());
    assert_eq!(ga_full, ga_frozen);
}

#[test]
fn row_and_column_ops_grad() {
    let mut r = rng(8);
    let x = Tensor::<f32>::uniform(&[4, 6], -1.0, 1.0, &mut r);
    let w = Tensor::<f32>::uniform(&[7, 5], -1.0, 1.0, &mut r);
    let err = grad_check(
        |g, xv| {
            let left = g.slice_cols(xv, 0, 2)?;
            let right = g.slice_cols(xv, 3, 6)?;
            let cat = g.concat_cols(&[right, left])?; // [4,5]
            let top = g.slice_rows(cat, 1, 3)?;
            let picked = g.gather_rows(cat, &[3, 0, 0])?;
            let stacked = g.concat_rows(&[top, picked, cat])?; // wait: [2+3+4, 5]
            let stacked = g.slice_rows(stacked, 0, 7)?;
            let wv = g.leaf(&w);
            let y = g.mul(stacked, wv)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn grad_check_on_toy_transformer() {
    // Two pre-norm self-attention blocks over 4 tokens, differentiated
    // w.r.t. the input embeddings.
    let d = 8;
    let mut r = rng(9);
    let weights: Vec<Tensor<f32>> = (0..2 * 6)
        .map(|i| {
            let shape = if i % 6 == 5 { [d, d] } else { [d, d] };
            Tensor::randn(&shape, 0.3, &mut r)
        })
        .collect();
    let x = Tensor::<f32>::uniform(&[4, d], -1.0, 1.0, &mut r);
    let labels = [3i64, IGNORE_INDEX, 1, 5];
    let err = grad_check(
        |g, mut h| {
            let one = g.leaf(&Tensor::full(&[d], 1.0));
            let zero = g.leaf(&Tensor::zeros(&[d]));
            let mut mask = vec![0.0f32; 16];
            for i in 0..4 {
                for j in i + 1..4 {
                    mask[i * 4 + j] = MASK_VALUE as f32;
                }
            }
            for layer in 0..2 {
                let w: Vec<Var> = weights[layer * 6..layer * 6 + 6].iter().map(|t| g.leaf(t)).collect();
                let n = g.layer_norm(h, one, zero, LN_EPS)?;
                let q = g.matmul(n, w[0])?;
                let k = g.matmul(n, w[1])?;
                let v = g.matmul(n, w[2])?;
                let s = g.matmul_bt(q, k)?;
                let s = g.scale(s, 1.0 / (d as f32).sqrt());
                let s = g.add_const(s, &mask)?;
                let p = g.softmax(s);
                let a = g.matmul(p, v)?;
                let a = g.matmul(a, w[3])?;
                h = g.add(h, a)?;
                let n = g.layer_norm(h, one, zero, LN_EPS)?;
                let f = g.matmul(n, w[4])?;
                let f = g.gelu(f);
                let f = g.matmul(f, w[5])?;
                h = g.add(h, f)?;
            }
            g.masked_cross_entropy(h, &labels, IGNORE_INDEX)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-2, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_positive(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f32..30.0, 5), 1..4)
    ) {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let x = g.input(&[rows.len(), 5], flat, false).unwrap();
        let y = g.softmax(x);
        for row in g.value(y).chunks(5) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant(
        logits in proptest::collection::vec(-5.0f32..5.0, 12),
        shifts in proptest::collection::vec(-20.0f32..20.0, 3),
        labels in proptest::collection::vec(0i64..4, 3),
    ) {
        let loss = |data: Vec<f32>| {
            let mut g = Graph::new();
            let x = g.input(&[3, 4], data, false).unwrap();
            let l = g.masked_cross_entropy(x, &labels, IGNORE_INDEX).unwrap();
            g.item(l) as f64
        };
        let shifted: Vec<f32> = logits.iter().enumerate().map(|(i, &v)| v + shifts[i / 4]).collect();
        prop_assert!((loss(logits) - loss(shifted)).abs() < 1e-5);
    }
}
