//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    check_tape_gradients, finite_difference_check, relative_error, GradCheckReport,
    RELATIVE_ERROR_FLOOR,
};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Reduce any tensor to a scalar with non-uniform weights so every output
    /// coordinate gets a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
        let shape = tape.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let w = tape.constant(w);
        let prod = tape.mul(y, w)?;
        tape.sum(prod)
    }

    fn check(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let report = check_tape_gradients(
            |tape, v| {
                let y = build(tape, v)?;
                weighted_sum(tape, y)
            },
            &params,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 2]);
            check(vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
            let bt = random(&mut rng, &[5, 4]);
            check(vec![a.clone(), bt], |t, v| t.matmul_transposed(v[0], v[1]));
            let c = random(&mut rng, &[3, 4]);
            check(vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1]));
            check(vec![a.clone(), random(&mut rng, &[4])], |t, v| t.add(v[0], v[1]));
            check(vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]));
            // keep operands apart so the kink is never inside the stencil
            let shifted = Tensor::new(
                vec![3, 4],
                a.data()
                    .iter()
                    .zip(c.data())
                    .map(|(x, y)| if (x - y).abs() < 0.01 { y + 0.5 } else { *y })
                    .collect(),
            )
            .unwrap();
            check(vec![a.clone(), shifted], |t, v| t.min(v[0], v[1]));
            check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
            check(vec![a.clone()], |t, v| t.tanh(v[0]));
            check(vec![a.clone(), random(&mut rng, &[2, 4])], |t, v| {
                t.concat(&[v[0], v[1]], 0)
            });
            check(vec![a.clone(), random(&mut rng, &[3, 2])], |t, v| {
                t.concat(&[v[0], v[1]], 1)
            });
            check(vec![a.clone()], |t, v| t.slice(v[0], 0, 1, 2));
            check(vec![a.clone()], |t, v| t.slice(v[0], 1, 1, 2));
            check(vec![a.clone()], |t, v| t.sum_over_axis(v[0], 0));
            check(vec![a.clone()], |t, v| t.sum_over_axis(v[0], 1));
            check(vec![a.clone()], |t, v| t.scale(v[0], -1.7));
            check(vec![a.clone()], |t, v| t.softmax_cross_entropy(v[0], vec![0, 3, 3]));
            check(vec![a.clone()], |t, v| t.gather_rows(v[0], vec![2, 0, 2, 1]));
        }
    }

    #[test]
    fn repeated_passes_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[6, 5]);
        let b = random(&mut rng, &[5, 7]);
        let run = || {
            let mut tape = Tape::new();
            let va = tape.param(a.clone());
            let vb = tape.param(b.clone());
            let c = tape.matmul(va, vb).unwrap();
            let s = tape.tanh(c).unwrap();
            let l = tape.softmax_cross_entropy(s, vec![0, 1, 2, 3, 4, 5]).unwrap();
            let l = tape.sum(l).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(va).unwrap(), tape.grad(vb).unwrap())
        };
        let (ga, gb) = run();
        let (ha, hb) = run();
        assert_eq!(ga.data(), ha.data());
        assert_eq!(gb.data(), hb.data());
    }
}
