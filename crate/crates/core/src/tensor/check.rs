//! Gradient checking against central finite differences.

use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::Result;

/// Finite-difference step used throughout the test suite.
pub const FD_STEP: Real = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    pub max_abs_err: Real,
    pub tol: Real,
    pub pass: bool,
}

/// Compare the reverse-mode gradient of a scalar-valued `f` at `x` against
/// central finite differences with step [`FD_STEP`].
///
/// The per-element discrepancy is `|ad − fd| / (1e-6 + max(|ad|, |fd|))`,
/// which behaves like a relative error away from zero without flagging
/// finite-difference noise on true-zero gradients.
pub fn grad_check<F>(f: F, x: &Tensor, tol: Real) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    // Reverse-mode gradient.
    let tape = Tape::new();
    let xv = tape.leaf(x, true);
    let y = f(&tape, xv)?;
    let y_item = y.item()?; // enforces scalar output
    debug_assert!(y_item.is_finite());
    tape.backward(y)?;
    let g_ad = tape.grad_or_zeros(xv);

    // Central differences, one element at a time.
    let eval = |t: &Tensor| -> Result<Real> {
        let tape = Tape::new();
        let v = tape.leaf(t, false);
        f(&tape, v)?.item()
    };
    let mut max_rel: Real = 0.0;
    let mut max_abs: Real = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let fp = eval(&xp)?;
        xp.data_mut()[i] = orig - FD_STEP;
        let fm = eval(&xp)?;
        xp.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * FD_STEP);
        let ad = g_ad.data()[i];
        let abs = (ad - fd).abs();
        let rel = abs / (1e-6 + ad.abs().max(fd.abs()));
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        tol,
        pass: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sum_gradient_is_exact() {
        let mut rng = SplitMix64::new(1);
        let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let rep = grad_check(|_, v| Ok(v.sum()), &x, 1e-10).unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn softmax_then_first_column_passes() {
        let mut rng = SplitMix64::new(2);
        let x = Tensor::uniform(&[3, 3], 1.5, &mut rng);
        // sum of first column of softmax_rows(x), picked out by a mask
        let mask = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let rep = grad_check(
            move |tape, v| {
                let m = tape.leaf(&mask, false);
                Ok(v.softmax_rows()?.mul(m)?.sum())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn wrong_backward_is_caught() {
        // forward x² but backward claims d/dx = 3x: must fail the check
        let mut rng = SplitMix64::new(3);
        let x = Tensor::uniform(&[4], 1.0, &mut rng);
        let rep = grad_check(
            |_, v| Ok(v.map_unary(|x| x * x, |x| 3.0 * x).sum()),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn matmul_backward_matches_fd() {
        let mut rng = SplitMix64::new(4);
        let a = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        // check w.r.t. a with b constant
        let rep = grad_check(
            move |tape, v| {
                let bv = tape.leaf(&b, false);
                Ok(v.matmul(bv)?.sum())
            },
            &a,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }
}
