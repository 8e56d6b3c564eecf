//! Detection metrics.

use crate::error::{invalid, Error, Result};

/// Equal error rate and its threshold.
///
/// Candidate thresholds are the midpoints between consecutive distinct
/// scores; a score above the threshold counts as a positive decision. At the
/// threshold minimizing `|FAR − FRR|` (smallest threshold on ties) the
/// result is `((FAR + FRR) / 2, threshold)`.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch { op: "eer", left: vec![scores.len()], right: vec![labels.len()] });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(invalid(format!("label {l} is not 0 or 1")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(invalid("eer needs both classes"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sweep upward: everything at or below the threshold is rejected.
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut best: Option<(f64, f64, f64)> = None; // (gap, eer, threshold)
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let threshold = 0.5 * (score + scores[order[i]]);
        let far = (negatives - rejected_neg) as f64 / negatives as f64;
        let frr = rejected_pos as f64 / positives as f64;
        let gap = (far - frr).abs();
        if best.map_or(true, |(g, _, _)| gap < g) {
            best = Some((gap, 0.5 * (far + frr), threshold));
        }
    }
    // A single distinct score leaves no midpoint: accept nothing.
    Ok(best.map_or((0.5, scores[order[0]]), |(_, e, t)| (e, t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn separable_is_zero() {
        let (e, t) = eer(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(e, 0.0);
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interleaved_is_half() {
        let (e, _) = eer(&[0.9, 0.8, 0.2, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(e, 0.5);
    }

    #[test]
    fn brute_force_agrees() {
        let s = RngStream::new(77);
        for case in 0..20 {
            let r = s.derive(case);
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|i| (r.uniform_at(i) * 8.0).floor()).collect();
            let mut labels: Vec<u8> = (0..n).map(|i| (r.uniform_at(1000 + i) < 0.4) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let (e, t) = eer(&scores, &labels).unwrap();

            let mut uniq = scores.clone();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
            let neg = n as f64 - pos;
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for w in uniq.windows(2) {
                let th = 0.5 * (w[0] + w[1]);
                let far = (0..n as usize).filter(|&i| labels[i] == 0 && scores[i] > th).count() as f64 / neg;
                let frr = (0..n as usize).filter(|&i| labels[i] == 1 && scores[i] <= th).count() as f64 / pos;
                if (far - frr).abs() < best.0 {
                    best = ((far - frr).abs(), 0.5 * (far + frr), th);
                }
            }
            assert_eq!((e, t), (best.1, best.2), "case {case}");
        }
    }

    #[test]
    fn single_class_errors() {
        assert!(eer(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(eer(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let s = RngStream::new(1);
        let n = 10_000u64;
        let scores: Vec<f64> = (0..n).map(|i| s.derive(0).uniform_at(i)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (s.derive(1).uniform_at(i) < 0.5) as u8).collect();
        let (e, _) = eer(&scores, &labels).unwrap();
        assert!((e - 0.5).abs() < 0.02, "{e}");
    }
}
