//! Randomized gradient checks for every tape primitive, plus the algebraic
//! properties of softmax, permutation and inference mode.

use predformer::tensor::{grad_check_many, inverse_permutation, Tape, Tensor, Var};
use predformer::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64, amp: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-amp..amp))
}

/// Weighted sum with fixed, non-uniform weights.
fn probe(tape: &Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let w = tape.constant(Tensor::from_fn(y.shape(), |i| {
        (0.37 * i as f64 + 0.11).cos()
    }));
    Ok(tape.sum(&tape.mul(y, &w)?))
}

fn check<Fun>(f: Fun, inputs: &[Tensor<f64>]) -> std::result::Result<(), TestCaseError>
where
    Fun: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let report =
        grad_check_many(f, inputs, H, TOL).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(report.passed, "{:?}", report);
    Ok(())
}

/// `[a, b, c]` with a, b in 1..=3 and c in 2..=5: many distinct shapes per run.
fn shape3() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=3, 1usize..=3, 2usize..=5).prop_map(|(a, b, c)| vec![a, b, c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_binary(shape in shape3(), seed in any::<u64>()) {
        let xs = [rand_tensor(&shape, seed, 2.0), rand_tensor(&shape, seed ^ 1, 2.0)];
        check(|t, v| probe(t, &t.add(&v[0], &v[1])?), &xs)?;
        check(|t, v| probe(t, &t.sub(&v[0], &v[1])?), &xs)?;
        check(|t, v| probe(t, &t.mul(&v[0], &v[1])?), &xs)?;
        check(|t, v| t.mse(&v[0], &v[1]), &xs)?;
    }

    #[test]
    fn elementwise_unary(shape in shape3(), seed in any::<u64>(), factor in -3.0f64..3.0) {
        let x = [rand_tensor(&shape, seed, 3.0)];
        check(|t, v| probe(t, &t.silu(&v[0])), &x)?;
        check(|t, v| probe(t, &t.gelu(&v[0])), &x)?;
        check(|t, v| probe(t, &t.scale(&v[0], factor)), &x)?;
        let mask = rand_tensor(&shape, seed ^ 7, 1.0);
        check(|t, v| probe(t, &t.mul_const(&v[0], mask.clone())?), &x)?;
        check(|t, v| Ok(t.sum(&v[0])), &x)?;
        check(|t, v| Ok(t.mean(&v[0])), &x)?;
    }

    #[test]
    fn broadcast_add(shape in shape3(), seed in any::<u64>()) {
        let c = shape[2];
        let xs = [rand_tensor(&shape, seed, 1.0), rand_tensor(&[c], seed ^ 2, 1.0)];
        check(|t, v| probe(t, &t.add_trailing(&v[0], &v[1])?), &xs)?;
        let xs = [rand_tensor(&shape, seed, 1.0), rand_tensor(&shape[1..], seed ^ 3, 1.0)];
        check(|t, v| probe(t, &t.add_trailing(&v[0], &v[1])?), &xs)?;
    }

    #[test]
    fn products(g in 1usize..=3, m in 1usize..=4, k in 1usize..=4, n in 1usize..=4, seed in any::<u64>()) {
        let xs = [rand_tensor(&[g, m, k], seed, 1.0), rand_tensor(&[g, k, n], seed ^ 1, 1.0)];
        check(|t, v| probe(t, &t.matmul(&v[0], &v[1])?), &xs)?;
        let xs = [rand_tensor(&[g, m, k], seed, 1.0), rand_tensor(&[g, n, k], seed ^ 1, 1.0)];
        check(|t, v| probe(t, &t.matmul_nt(&v[0], &v[1], 0.7)?), &xs)?;
        let xs = [
            rand_tensor(&[g, m, k], seed, 1.0),
            rand_tensor(&[k, n], seed ^ 2, 1.0),
            rand_tensor(&[n], seed ^ 3, 1.0),
        ];
        check(|t, v| probe(t, &t.linear(&v[0], &v[1], Some(&v[2]))?), &xs)?;
        check(|t, v| probe(t, &t.linear(&v[0], &v[1], None)?), &xs[..2])?;
    }

    #[test]
    fn normalizations(shape in shape3(), seed in any::<u64>()) {
        let c = shape[2];
        let x = [rand_tensor(&shape, seed, 4.0)];
        check(|t, v| probe(t, &t.softmax(&v[0])?), &x)?;
        let xs = [rand_tensor(&shape, seed, 2.0), rand_tensor(&[c], seed ^ 1, 1.5), rand_tensor(&[c], seed ^ 2, 1.0)];
        check(|t, v| probe(t, &t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?), &xs)?;
    }

    #[test]
    fn layout_ops(shape in shape3(), seed in any::<u64>(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let x = [rand_tensor(&shape, seed, 1.0)];
        check(|t, v| probe(t, &t.permute(&v[0], &perm)?), &x)?;
        let flat = [shape.iter().product::<usize>()];
        check(|t, v| probe(t, &t.reshape(&v[0], &flat)?), &x)?;
        let merged = [shape[perm[0]] * shape[perm[1]], shape[perm[2]]];
        check(|t, v| probe(t, &t.permute_reshape(&v[0], &perm, &merged)?), &x)?;
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(shape in shape3(), seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = rand_tensor(&shape, seed, 10.0);
        let tape = Tape::<f64>::inference();
        let y = tape.softmax(&tape.constant(x.clone())).unwrap().into_value();
        let c = shape[2];
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let shifted = tape.softmax(&tape.constant(x.map(|v| v + shift))).unwrap().into_value();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn permute_reshape_inverse_is_bitwise_identity(
        dims in prop::collection::vec(1usize..=4, 2..=5),
        seed in any::<u64>(),
        salt in any::<u64>(),
    ) {
        let mut axes: Vec<usize> = (0..dims.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        for i in (1..axes.len()).rev() {
            axes.swap(i, rng.random_range(0..=i));
        }
        let x = rand_tensor(&dims, seed, 1.0).cast::<f32>();
        let permuted_shape: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
        let flat = [x.numel()];
        let y = x.permute_reshape(&axes, &flat).unwrap();
        let back = y.reshape(&permuted_shape).unwrap()
            .permute_reshape(&inverse_permutation(&axes), &dims)
            .unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn inference_tape_records_nothing_and_repeats_bitwise(shape in shape3(), seed in any::<u64>()) {
        let x = rand_tensor(&shape, seed, 2.0).cast::<f32>();
        let c = shape[2];
        let gamma = Tensor::<f32>::ones(&[c]);
        let beta = Tensor::<f32>::zeros(&[c]);
        let run = || {
            let tape = Tape::<f32>::inference();
            let xv = tape.leaf(x.clone());
            let h = tape.layer_norm(&xv, &tape.leaf(gamma.clone()), &tape.leaf(beta.clone()), 1e-5).unwrap();
            let h = tape.silu(&tape.softmax(&h).unwrap());
            let w = tape.leaf(Tensor::from_fn(&[c, c], |i| (i as f32 * 0.1).sin()));
            let y = tape.linear(&h, &w, None).unwrap();
            assert!(!y.is_tracked());
            assert!(tape.is_empty());
            assert!(tape.backward(&tape.sum(&y)).is_err());
            y.into_value()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
