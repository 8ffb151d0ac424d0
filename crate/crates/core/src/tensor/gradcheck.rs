use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(f: &F, point: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        let v = tape.item(y)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("objective evaluated to {v}")))
        }
    };
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone().with_requires_grad(false);
        plus.data_mut()[i] += h;
        let mut minus = point.clone().with_requires_grad(false);
        minus.data_mut()[i] -= h;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest relative error between the tape gradient of `f` at `point` and a
/// central finite difference with step `h`.
///
/// `f` receives a fresh tape and the leaf holding the point; it must return a
/// scalar built on that tape.
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let numeric = central_difference(&f, point, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BackwardFault, OpKind};

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![0.3, -0.4]);
        let err = finite_difference_check(|t, _x| Ok(t.scalar(4.2)), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn tanh_derivative_at_point_seven() {
        let p = Tensor::scalar(0.7);
        let err = finite_difference_check(|t, x| Ok(t.tanh(x)), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn matmul_gradient_is_b_transpose() {
        let a = Tensor::matrix(2, 3, vec![0.1, -0.5, 1.2, 0.7, 0.3, -1.1]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0]).unwrap();
        let f = |t: &mut Tape, x: Var| {
            let bv = t.constant(b.clone());
            let c = t.matmul(x, bv)?;
            Ok(t.sum(c))
        };
        assert!(finite_difference_check(f, &a, 1e-5).unwrap() < 1e-6);

        let mut t = Tape::new();
        let x = t.leaf(a.clone().with_requires_grad(true));
        let bv = t.constant(b.clone());
        let c = t.matmul(x, bv).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        // row sums of B, repeated per row of A
        let expected = [3.0, -0.25, 2.0, 3.0, -0.25, 2.0];
        for (g, e) in t.grad(x).unwrap().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn detects_corrupted_rule() {
        let p = Tensor::vector(vec![0.2, -0.3]);
        let err = finite_difference_check(
            |t, x| {
                t.inject_backward_fault(BackwardFault {
                    op: OpKind::Tanh,
                    factor: 1.5,
                });
                let y = t.tanh(x);
                Ok(t.sum(y))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn non_finite_objective_is_numerical_error() {
        let p = Tensor::vector(vec![800.0]);
        let r = finite_difference_check(
            |t, x| {
                let e = t.exp(x);
                let e2 = t.exp(e);
                Ok(t.sum(e2))
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::vector(vec![1.0]);
        assert!(finite_difference_check(|t, x| Ok(t.sum(x)), &p, 0.0).is_err());
    }
}
