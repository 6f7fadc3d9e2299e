use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tridentse::gradsuite::{ABS_FLOOR, REL_TOL, STEP};
use tridentse::tensor::{gradient_check, Activation, ConvSpec, GradCheckOptions, Tape, Tensor, Var};

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Max relative error of `sum(f(..) * R)` for a fixed random `R`.
fn check(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> tridentse::Result<Var<f64>>,
) -> f64 {
    let opts = GradCheckOptions { step: STEP, abs_floor: ABS_FLOOR, ..Default::default() };
    let report = gradient_check(
        |t, v| {
            let y = f(t, v)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = t.constant(Tensor::from_fn(y.shape().to_vec(), |_| rng.random_range(-1.0..1.0)));
            let p = t.mul(&y, &r)?;
            t.sum(&p)
        },
        &inputs,
        opts,
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_err
}

fn dim() -> impl Strategy<Value = usize> {
    1usize..=6
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

    #[test]
    fn dense_primitives_match_finite_differences(seed in any::<u64>(), m in dim(), k in dim(), n in dim(), g in dim()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let errs = [
            check(seed, vec![rand_t(r, &[m, k]), rand_t(r, &[k, n])], |t, v| t.matmul(&v[0], &v[1])),
            check(seed, vec![rand_t(r, &[g, m, k]), rand_t(r, &[k, n]), rand_t(r, &[n])], |t, v| t.linear(&v[0], &v[1], Some(&v[2]))),
            check(seed, vec![rand_t(r, &[g, m, k]), rand_t(r, &[g, n, k])], |t, v| t.bmm(&v[0], &v[1], true)),
            check(seed, vec![rand_t(r, &[g, m, k]), rand_t(r, &[g, k, n])], |t, v| t.bmm(&v[0], &v[1], false)),
            check(seed, vec![rand_t(r, &[m, k]), rand_t(r, &[m, k])], |t, v| t.mul(&v[0], &v[1])),
            check(seed, vec![rand_t(r, &[g, m, k])], |t, v| t.permute(&v[0], &[1, 2, 0])),
            check(seed, vec![rand_t(r, &[g, m, k])], |t, v| t.mean_middle(&v[0])),
        ];
        for e in errs {
            prop_assert!(e < REL_TOL, "{e}");
        }
    }

    #[test]
    fn normalizations_match_finite_differences(seed in any::<u64>(), a in dim(), b in dim(), c in 2usize..=6, axis in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let errs = [
            check(seed, vec![rand_t(r, &[a, b, c])], move |t, v| t.softmax(&v[0], axis)),
            check(seed, vec![rand_t(r, &[a, b, c]), rand_t(r, &[c]), rand_t(r, &[c])], |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-5)),
            check(seed, vec![rand_t(r, &[a + 1, b, c]), rand_t(r, &[c]), rand_t(r, &[c])], |t, v| {
                Ok(t.batch_norm_train(&v[0], &v[1], &v[2], 1e-5)?.0)
            }),
        ];
        for e in errs {
            prop_assert!(e < REL_TOL, "{e}");
        }
    }

    #[test]
    fn convolutions_match_finite_differences(
        seed in any::<u64>(), h in 3usize..=6, w in 3usize..=6, cin in 1usize..=3, cout in 1usize..=3,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..=2, pad in 0usize..=1,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let spec = ConvSpec { stride: (stride, stride), padding: (pad, pad) };
        let e1 = check(seed, vec![rand_t(r, &[1, h, w, cin]), rand_t(r, &[k, k, cin, cout]), rand_t(r, &[cout])], move |t, v| {
            t.conv2d(&v[0], &v[1], Some(&v[2]), spec)
        });
        let e2 = check(seed, vec![rand_t(r, &[2, h, w, cin]), rand_t(r, &[k, k, cin]), rand_t(r, &[cin])], |t, v| {
            t.depthwise_conv2d(&v[0], &v[1], Some(&v[2]))
        });
        prop_assert!(e1 < REL_TOL, "conv2d {e1}");
        prop_assert!(e2 < REL_TOL, "depthwise {e2}");
    }

    #[test]
    fn pointwise_and_complex_match_finite_differences(seed in any::<u64>(), a in dim(), b in dim()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut errs = vec![
            check(seed, vec![rand_t(r, &[a, b, 2]), rand_t(r, &[a, b, 2])], |t, v| t.complex_mul(&v[0], &v[1])),
            check(seed, vec![rand_t(r, &[a, b, 2])], |t, v| t.complex_compress(&v[0], 0.3)),
            check(seed, vec![rand_t(r, &[a, b, 2])], |t, v| t.complex_abs_pow(&v[0], 0.3)),
            check(seed, vec![rand_t(r, &[a, b, 2])], |t, v| t.complex_tanh_amplitude(&v[0])),
        ];
        for act in [Activation::Relu, Activation::Gelu, Activation::Tanh, Activation::Sigmoid] {
            errs.push(check(seed, vec![rand_t(r, &[a, b])], move |t, v| t.activation(&v[0], act)));
        }
        for e in errs {
            prop_assert!(e < REL_TOL, "{e}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_any_finite_input(
        rows in 1usize..5, cols in 1usize..7,
        vals in prop::collection::vec(-1e30f32..1e30, 36),
    ) {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::new([rows, cols], vals[..rows * cols].to_vec()).unwrap());
        let y = tape.softmax(&x, 1).unwrap();
        for row in y.data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "{s}");
        }
    }

    #[test]
    fn backward_runs_each_recorded_op_once(ops in prop::collection::vec((0usize..5, any::<prop::sample::Index>(), any::<prop::sample::Index>()), 1..20)) {
        let mut tape = Tape::<f64>::new();
        let mut vars = vec![tape.leaf(Tensor::from_fn([3], |i| i as f64 + 0.5)), tape.leaf(Tensor::from_fn([3], |i| 1.0 - i as f64))];
        for (kind, i, j) in ops {
            let (a, b) = (vars[i.index(vars.len())].clone(), vars[j.index(vars.len())].clone());
            let v = match kind {
                0 => tape.add(&a, &b),
                1 => tape.mul(&a, &b),
                2 => tape.sub(&a, &b),
                3 => tape.activation(&a, Activation::Tanh),
                _ => tape.scale(&a, 0.5),
            }
            .unwrap();
            vars.push(v);
        }
        let mut total = vars[0].clone();
        for v in &vars[1..] {
            total = tape.add(&total, v).unwrap();
        }
        let out = tape.sum(&total).unwrap();
        let stats = tape.backward(&out).unwrap();
        prop_assert_eq!(stats.ops_visited, stats.ops_recorded);
        // every op above plus the chain of adds and the final sum
        prop_assert_eq!(stats.ops_recorded, 2 * vars.len() - 2);
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f32>::no_grad();
            let x = tape.constant(Tensor::from_fn([2, 5, 4, 3], |_| rng.random_range(-1.0..1.0)));
            let w = tape.constant(Tensor::from_fn([3, 3, 3], |_| rng.random_range(-1.0..1.0)));
            let p = tape.constant(Tensor::from_fn([3, 7], |_| rng.random_range(-1.0..1.0)));
            let y = tape.depthwise_conv2d(&x, &w, None).unwrap();
            let y = tape.linear(&y, &p, None).unwrap();
            let y = tape.softmax(&y, 3).unwrap();
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
