use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsam_core::{finite_difference_check, Result, Tape, Tensor, Var};

/// Builds a random chain of elementwise, matrix and softmax ops over a
/// length-`n` vector and reduces it to a weighted sum.
fn random_graph(tape: &mut Tape, x: Var, n: usize, ops: &[u8], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars = vec![x];
    for &op in ops {
        let a = vars[rng.random_range(0..vars.len())];
        let b = vars[rng.random_range(0..vars.len())];
        let v = match op % 11 {
            0 => tape.tanh(a),
            1 => tape.mul(a, b)?,
            2 => tape.add(a, b)?,
            3 => {
                let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.6..0.6)).collect();
                let m = tape.constant(Tensor::matrix(n, n, m)?);
                tape.matmul(m, a)?
            }
            4 => {
                let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.7)).collect();
                tape.masked_softmax(a, &mask)?
            }
            5 => tape.log_softmax(a)?,
            6 => {
                let t = tape.tanh(a);
                tape.exp(t)
            }
            7 => tape.scale(a, rng.random_range(-2.0..2.0)),
            8 => tape.sub(a, b)?,
            9 => {
                let c = tape.concat(&[a, b])?;
                tape.slice(c, rng.random_range(0..=n), n)?
            }
            _ => {
                let s = tape.sum(a);
                tape.mul(b, s)?
            }
        };
        vars.push(v);
    }
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::vector(w));
    let last = *vars.last().expect("non-empty");
    let y = tape.mul(last, w)?;
    Ok(tape.sum(y))
}

fn fixed(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(fixed(128))]

    #[test]
    fn random_graphs_match_finite_differences(
        x in prop::collection::vec(-1.5f64..1.5, 2..6),
        ops in prop::collection::vec(any::<u8>(), 1..9),
        seed in any::<u64>(),
    ) {
        let n = x.len();
        let err = finite_difference_check(|t, v| random_graph(t, v, n, &ops, seed), &Tensor::vector(x), 1e-6).unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn masked_softmax_is_a_distribution(
        logits in prop::collection::vec(-50.0f64..50.0, 1..12),
        mask_bits in any::<u16>(),
    ) {
        let n = logits.len();
        let mut mask: Vec<bool> = (0..n).map(|i| mask_bits >> i & 1 == 1).collect();
        mask[0] = true;
        let mut t = Tape::new();
        let l = t.constant(Tensor::vector(logits));
        let a = t.masked_softmax(l, &mask).unwrap();
        let v = t.data(a);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (p, m) in v.iter().zip(&mask) {
            prop_assert!(*p >= 0.0);
            if !m { prop_assert_eq!(*p, 0.0); }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let grad = |a: f64, b: f64| {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::vector(x.clone()).with_requires_grad(true));
            let f = t.tanh(v);
            let f = t.sum(f);
            let sq = t.mul(v, v).unwrap();
            let g = t.sum(sq);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            let l = t.add(fa, gb).unwrap();
            t.backward(l).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let (gf, gg, combined) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(alpha, beta));
        for i in 0..3 {
            prop_assert!((combined[i] - (alpha * gf[i] + beta * gg[i])).abs() < 1e-12);
        }
    }
}
