use adalink::tensor::{attention_probs, grad_check, relative_error, AttentionSpec};
use adalink::{Error, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Weighted sum against a fixed random tensor, so upstream gradients are not all ones.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(g.shape(v), seed));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_zero_operand() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let z = g.constant(Tensor::from_rows(&[[0.0], [0.0]]).unwrap());
    let c = g.matmul(a, z).unwrap();
    assert_eq!(g.shape(c), &[1, 1]);
    assert_eq!(g.value(c).data(), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 2]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

/// Central differences computed by hand, independent of `grad_check`.
#[test]
fn matmul_gradients_match_central_differences() {
    let a0 = rand_tensor(&[3, 4], 1);
    let b0 = rand_tensor(&[4, 2], 2);
    let w = rand_tensor(&[3, 2], 3);
    let loss = |a: &Tensor, b: &Tensor| -> f64 {
        let c = a.matmul(b).unwrap();
        c.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
    };

    let mut g = Graph::new();
    let a = g.param(&a0, true);
    let b = g.param(&b0, true);
    let c = g.matmul(a, b).unwrap();
    let wv = g.constant(w.clone());
    let p = g.mul(c, wv).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();

    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (which, analytic) in [
        (0, g.grad(a).unwrap().to_vec()),
        (1, g.grad(b).unwrap().to_vec()),
    ] {
        for (j, &an) in analytic.iter().enumerate() {
            let (mut ap, mut bp) = (a0.clone(), b0.clone());
            let (mut am, mut bm) = (a0.clone(), b0.clone());
            if which == 0 {
                ap.data_mut()[j] += h;
                am.data_mut()[j] -= h;
            } else {
                bp.data_mut()[j] += h;
                bm.data_mut()[j] -= h;
            }
            let num = (loss(&ap, &bp) - loss(&am, &bm)) / (2.0 * h);
            worst = worst.max(relative_error(an, num));
        }
    }
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let d = g.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

    let x = g.constant(rand_tensor(&[5, 7], 11));
    let y = g.softmax_rows(x).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn grad_check_on_sum_of_squares() {
    let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    };
    let err = grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");

    let mut g = Graph::new();
    let v = g.param(&x, true);
    let l = f(&mut g, &[v]).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(v).unwrap();
    for (a, e) in grad.iter().zip([2.0, 4.0, 6.0]) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn grad_check_on_constant_function() {
    let x = rand_tensor(&[4], 5);
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let z = g.scale(v[0], 0.0);
        let s = g.sum(z);
        let c = g.constant(Tensor::scalar(3.5));
        g.add(s, c)
    };
    assert_eq!(grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap(), 0.0);
    let mut g = Graph::new();
    let v = g.param(&x, true);
    let l = f(&mut g, &[v]).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| d == 0.0));
}

#[test]
fn grad_check_rejects_non_scalar() {
    let x = rand_tensor(&[2, 2], 1);
    let err = grad_check(|g, v| Ok(g.relu(v[0])), &[x], 1e-5).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn shared_subexpression_accumulates() {
    // f(x) = sum((x·W) ⊙ (x·W) + x·W), reusing x·W twice and x once more
    let x = rand_tensor(&[3, 4], 21);
    let w = rand_tensor(&[4, 4], 22);
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let xw = g.matmul(v[0], v[1])?;
        let sq = g.mul(xw, xw)?;
        let both = g.add(sq, xw)?;
        let again = g.add(both, v[0])?;
        probe(g, again, 23)
    };
    let err = grad_check(f, &[x, w], 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn dropout_eval_is_identity_and_train_is_seeded() {
    let x = rand_tensor(&[6, 5], 4);
    let mut g = Graph::with_seed(9);
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.3, false).unwrap();
    assert!(g.value(y).bit_eq(&x));

    let run = |seed| {
        let mut g = Graph::with_seed(seed);
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.3, true).unwrap();
        g.value(y).clone()
    };
    assert!(run(1).bit_eq(&run(1)));
    assert!(!run(1).bit_eq(&run(2)));
    let kept = run(1);
    for (o, i) in kept.data().iter().zip(x.data()) {
        assert!(*o == 0.0 || (o - i / 0.7).abs() < 1e-12);
    }

    let mut g = Graph::new();
    let v = g.constant(x);
    assert!(g.dropout(v, 1.0, true).is_err());
}

#[test]
fn gather_checks_vocabulary_and_scatters() {
    let table = rand_tensor(&[5, 3], 8);
    let mut g = Graph::new();
    let t = g.param(&table, true);
    assert!(matches!(
        g.gather(t, &[1, 5]),
        Err(Error::Vocabulary {
            index: 5,
            vocab_size: 5
        })
    ));
    let e = g.gather(t, &[2, 2, 4]).unwrap();
    assert_eq!(g.value(e).row(0), table.row(2));
    assert_eq!(g.value(e).row(1), table.row(2));
    let s = g.sum(e);
    g.backward(s).unwrap();
    let grad = g.grad(t).unwrap();
    assert_eq!(&grad[6..9], &[2.0, 2.0, 2.0]);
    assert_eq!(&grad[12..15], &[1.0, 1.0, 1.0]);
    assert_eq!(&grad[0..3], &[0.0, 0.0, 0.0]);
}

#[test]
fn attention_rows_sum_to_one_and_respect_masks() {
    let q = rand_tensor(&[2 * 3, 8], 30);
    let k = rand_tensor(&[2 * 4, 8], 31);
    let mask = vec![true, true, false, true, true, false, false, true];
    let spec = AttentionSpec {
        batch: 2,
        q_len: 3,
        k_len: 4,
        heads: 2,
        causal: false,
        key_mask: Some(mask.clone()),
    };
    let p = attention_probs(q.data(), k.data(), 8, &spec);
    for (r, row) in p.chunks(4).enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let b = r / (2 * 3);
        for j in 0..4 {
            if !mask[b * 4 + j] {
                assert_eq!(row[j], 0.0);
            }
        }
    }
}

#[test]
fn unknown_backward_on_non_scalar_is_contract_error() {
    let mut g = Graph::new();
    let x = g.param(&rand_tensor(&[2, 2], 1), true);
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(&rand_tensor(&[2, 3], 1), true);
    let w = g.param(&rand_tensor(&[3, 2], 2), false);
    let y = g.matmul(x, w).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(w).is_none());
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 100)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y, 101)
        }),
        ("mul", vec![vec![2, 5], vec![2, 5]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 102)
        }),
        ("add_bias", vec![vec![4, 3], vec![3]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            probe(g, y, 103)
        }),
        ("matmul", vec![vec![3, 5], vec![5, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 104)
        }),
        ("transpose", vec![vec![3, 5]], |g, v| {
            let y = g.transpose(v[0])?;
            probe(g, y, 105)
        }),
        ("reshape", vec![vec![4, 6]], |g, v| {
            let y = g.reshape(v[0], &[2, 3, 4])?;
            probe(g, y, 106)
        }),
        ("concat0", vec![vec![2, 3], vec![4, 3]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 0)?;
            probe(g, y, 107)
        }),
        ("concat1", vec![vec![2, 3, 2], vec![2, 1, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            probe(g, y, 108)
        }),
        ("slice", vec![vec![3, 6, 2]], |g, v| {
            let y = g.slice(v[0], 1, 2, 3)?;
            probe(g, y, 109)
        }),
        ("gather", vec![vec![5, 3]], |g, v| {
            let y = g.gather(v[0], &[4, 0, 4, 2])?;
            probe(g, y, 110)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, 111)
        }),
        ("relu", vec![vec![4, 4]], |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, 112)
        }),
        ("dropout", vec![vec![4, 4]], |g, v| {
            let y = g.dropout(v[0], 0.25, true)?;
            probe(g, y, 113)
        }),
        ("softmax", vec![vec![3, 6]], |g, v| {
            let y = g.softmax_rows(v[0])?;
            probe(g, y, 114)
        }),
        ("cross_entropy", vec![vec![4, 5]], |g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
        }),
        ("scale", vec![vec![2, 2]], |g, v| {
            let y = g.scale(v[0], -1.7);
            probe(g, y, 115)
        }),
        (
            "attention",
            vec![vec![6, 8], vec![8, 8], vec![8, 8]],
            |g, v| {
                let spec = AttentionSpec {
                    batch: 2,
                    q_len: 3,
                    k_len: 4,
                    heads: 2,
                    causal: false,
                    key_mask: Some(vec![true, false, true, true, true, true, true, false]),
                };
                let y = g.attention(v[0], v[1], v[2], spec)?;
                probe(g, y, 116)
            },
        ),
        (
            "causal_attention",
            vec![vec![8, 4], vec![8, 4], vec![8, 4]],
            |g, v| {
                let spec = AttentionSpec {
                    batch: 2,
                    q_len: 4,
                    k_len: 4,
                    heads: 1,
                    causal: true,
                    key_mask: None,
                };
                let y = g.attention(v[0], v[1], v[2], spec)?;
                probe(g, y, 117)
            },
        ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn every_op_passes_grad_check(seed in 0u64..10_000) {
        for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
            let params: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(j, s)| rand_tensor(s, seed * 97 + (i * 7 + j) as u64))
                .collect();
            let err = grad_check(f, &params, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..8, cols in 1usize..8) {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[rows, cols], seed));
        let x = g.scale(x, 50.0);
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
