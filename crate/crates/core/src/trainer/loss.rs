//! Task losses and the capacity-penalized objective.

use crate::error::{invalid, Error, Result};
use crate::gate::{lambda_penalty, GateState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are kept this far away from 0 and 1 inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean absolute difference.
pub fn l1_loss(target: &Tensor, pred: &Tensor) -> Result<f64> {
    if target.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            left: target.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    Ok(target.sub(pred)?.abs().mean())
}

pub fn l1_loss_on_tape(tape: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    if tape.value(target).shape() != tape.value(pred).shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            left: tape.value(target).shape().to_vec(),
            right: tape.value(pred).shape().to_vec(),
        });
    }
    let d = tape.sub(target, pred)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `l1_scale · task + Σ_g (β/N_g) Σ_n λ_n²`.
pub fn composite_loss<'a>(
    task_loss: f64,
    gates: impl IntoIterator<Item = &'a GateState>,
    beta: f64,
    l1_scale: f64,
) -> f64 {
    l1_scale * task_loss + gates.into_iter().map(|g| lambda_penalty(g, beta)).sum::<f64>()
}

fn check_bce(labels: &[f64], n: usize, pos_weight: f64) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch { op: "bce_loss", left: vec![labels.len()], right: vec![n] });
    }
    if n == 0 {
        return Err(invalid("bce_loss of an empty batch"));
    }
    if !(pos_weight.is_finite() && pos_weight >= 0.0) {
        return Err(invalid(format!("pos_weight {pos_weight} must be nonnegative")));
    }
    Ok(())
}

/// Binary cross entropy with the positive term weighted by `pos_weight`.
pub fn bce_loss(labels: &[f64], probs: &[f64], pos_weight: f64) -> Result<f64> {
    check_bce(labels, probs.len(), pos_weight)?;
    let total: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / labels.len() as f64)
}

/// [`bce_loss`] on the tape, differentiable in `probs`.
pub fn bce_loss_on_tape(tape: &mut Tape, labels: &[f64], probs: Var, pos_weight: f64) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    check_bce(labels, tape.value(probs).len(), pos_weight)?;
    let y = Tensor::new(&shape, labels.to_vec())?;
    let pos = tape.constant(y.scale(pos_weight));
    let neg = tape.constant(y.map(|v| 1.0 - v));
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.rsub_scalar(1.0, p);
    let log_q = tape.log(q)?;
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use std::f64::consts::LN_2;

    #[test]
    fn l1_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &Tensor::vector(vec![2.0, 2.0])).unwrap(), 0.5);
        assert!(l1_loss(&a, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn l1_matches_brute_force() {
        let s = RngStream::new(5);
        let t = Tensor::new(&[7, 3], s.derive(0).normals(21)).unwrap();
        let p = Tensor::new(&[7, 3], s.derive(1).normals(21)).unwrap();
        let mut brute = 0.0;
        for i in 0..21 {
            brute += (t.data()[i] - p.data()[i]).abs();
        }
        assert!((l1_loss(&t, &p).unwrap() - brute / 21.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let (tv, pv) = (tape.constant(t), tape.constant(p));
        let l = l1_loss_on_tape(&mut tape, tv, pv).unwrap();
        assert!((tape.value(l).item().unwrap() - brute / 21.0).abs() < 1e-12);
    }

    #[test]
    fn composite_examples() {
        let g = GateState::with_lambdas(vec![1.0; 32], 0.01).unwrap();
        assert_eq!(composite_loss(0.7, [&g], 0.0, 1.0), 0.7);
        assert!((composite_loss(0.0, [&g], 0.5, 1.0) - 0.5).abs() < 1e-15);
        let s = RngStream::new(9);
        let a = GateState::with_lambdas(s.derive(0).uniforms(10, 0.0, 1.0), 0.01).unwrap();
        let b = GateState::with_lambdas(s.derive(1).uniforms(6, 0.0, 1.0), 0.01).unwrap();
        let hand = 1e-3 * 2.5
            + 0.3 / 10.0 * a.lambdas().data().iter().map(|l| l * l).sum::<f64>()
            + 0.3 / 6.0 * b.lambdas().data().iter().map(|l| l * l).sum::<f64>();
        assert!((composite_loss(2.5, [&a, &b], 0.3, 1e-3) - hand).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[1.0], &[0.5], 1.0).unwrap() - LN_2).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap() <= 1e-6);
        let v = bce_loss(&[1.0, 0.0], &[0.5, 0.5], 1.5).unwrap();
        assert!((v - 2.5 * LN_2 / 2.0).abs() < 1e-12);
        assert!((v - 0.8664).abs() < 1e-4);
        assert!(bce_loss(&[1.0], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn bce_tape_matches_plain() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        let probs = [0.2, 0.7, 0.999_999_99, 0.4];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(probs.to_vec()));
        let l = bce_loss_on_tape(&mut tape, &labels, p, 1.5).unwrap();
        let plain = bce_loss(&labels, &probs, 1.5).unwrap();
        assert!((tape.value(l).item().unwrap() - plain).abs() < 1e-12);
    }
}
