//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
///
/// `f` builds a scalar on the tape from the input leaf it is given; it is
/// re-run once per perturbed coordinate, so any randomness inside it must be
/// addressed (not drawn sequentially) to stay frozen across evaluations.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("function value at x".into()));
    }
    let analytic = tape.backward(out)?.get(leaf);

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("perturbed function value".into()))
        }
    };

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]);
        let err = finite_difference_check(
            |t, w| {
                let s = t.square(w);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        let f = |t: &mut Tape, w: Var| Ok(t.sum(w));
        assert!(finite_difference_check(f, &x, 1e-2).is_err());
        assert!(finite_difference_check(f, &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_values_error() {
        let x = Tensor::vector(vec![1e-300]);
        let f = |t: &mut Tape, w: Var| {
            let l = t.log(w)?;
            let big = t.scale(l, 1e308);
            let sq = t.square(big);
            Ok(t.sum(sq))
        };
        assert!(matches!(
            finite_difference_check(f, &x, 1e-7),
            Err(Error::NonFinite(_)) | Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has a kink at 0; straddling it with the stencil exposes the mismatch.
        let x = Tensor::vector(vec![1e-6]);
        let f = |t: &mut Tape, w: Var| Ok(t.abs(w)).map(|a| t.sum(a));
        let err = finite_difference_check(f, &x, 1e-5).unwrap();
        assert!(err > 0.5);
    }
}
