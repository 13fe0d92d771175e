//! Listwise softmax losses over cosine scores.

use crate::encoder::{cosine, EmbeddingVector};
use crate::error::{Error, Result};

/// Scales nonnegative labels to sum to one.
pub fn normalize_labels(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Validation(format!("labels must be finite and nonnegative: {values:?}")));
    }
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateLabels);
    }
    Ok(values.iter().map(|v| v / sum).collect())
}

/// Softmax of `scores / temperature`, computed stably.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Value and partial derivatives of `-Σ w_j log softmax_j(c / t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLoss {
    pub value: f64,
    /// Softmax probabilities, one per candidate.
    pub probs: Vec<f64>,
    /// d loss / d c_j.
    pub d_scores: Vec<f64>,
    /// d loss / d log t.
    pub d_log_temperature: f64,
}

/// `weights` must already be normalized.
pub fn softmax_loss(scores: &[f64], weights: &[f64], temperature: f64) -> Result<SoftmaxLoss> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!("temperature {temperature} must be positive")));
    }
    if scores.len() != weights.len() || scores.is_empty() {
        return Err(Error::Validation("one weight per candidate required".into()));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scores.iter().map(|s| (s - m) / temperature).collect();
    let log_z = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    let probs: Vec<f64> = shifted.iter().map(|x| (x - log_z).exp()).collect();
    let value = -weights
        .iter()
        .zip(&shifted)
        .map(|(w, x)| if *w == 0.0 { 0.0 } else { w * (x - log_z) })
        .sum::<f64>();
    let d_scores = probs
        .iter()
        .zip(weights)
        .map(|(p, w)| (p - w) / temperature)
        .collect();
    // With Σw = 1: dL/dt = Σ (w_j − p_j) c_j / t², so dL/dlog t = Σ (w_j − p_j) c_j / t.
    let d_log_temperature = weights
        .iter()
        .zip(&probs)
        .zip(scores)
        .map(|((w, p), c)| (w - p) * c)
        .sum::<f64>()
        / temperature;
    Ok(SoftmaxLoss {
        value,
        probs,
        d_scores,
        d_log_temperature,
    })
}

fn cosines(query: &EmbeddingVector, candidates: &[EmbeddingVector]) -> Vec<f64> {
    candidates.iter().map(|c| cosine(query, c)).collect()
}

/// Engagement loss over candidates with normalized labels `weights`.
pub fn loss_eng(
    query: &EmbeddingVector,
    candidates: &[EmbeddingVector],
    weights: &[f64],
    sigma: f64,
) -> Result<f64> {
    Ok(softmax_loss(&cosines(query, candidates), weights, sigma)?.value)
}

/// Relevance loss; same form as the engagement loss with its own temperature.
pub fn loss_rel(
    query: &EmbeddingVector,
    candidates: &[EmbeddingVector],
    weights: &[f64],
    tau: f64,
) -> Result<f64> {
    Ok(softmax_loss(&cosines(query, candidates), weights, tau)?.value)
}

pub fn loss_total(loss_eng: f64, loss_rel: f64, omega: f64) -> f64 {
    omega * loss_eng + (1.0 - omega) * loss_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    /// Unit vector whose cosine with (1, 0) is `c`.
    fn at_cos(c: f64) -> EmbeddingVector {
        unit(&[c, (1.0 - c * c).sqrt()])
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_labels(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        let n = normalize_labels(&[4.5, 0.5, 0.0]).unwrap();
        for (a, b) in n.iter().zip([0.9, 0.1, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(normalize_labels(&[0.0, 0.0]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn single_candidate_is_zero() {
        let q = unit(&[1.0, 0.0]);
        assert_eq!(loss_eng(&q, &[at_cos(0.3)], &[1.0], 0.1).unwrap(), 0.0);
        assert_eq!(loss_rel(&q, &[at_cos(0.3)], &[1.0], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn two_equal_candidates_give_ln2() {
        let q = unit(&[1.0, 0.0]);
        let c = [at_cos(0.4), at_cos(0.4)];
        let l = loss_eng(&q, &c, &[0.5, 0.5], 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn rel_matches_straight_line_recomputation() {
        let q = unit(&[1.0, 0.0]);
        let c = [at_cos(0.9), at_cos(0.1)];
        let got = loss_rel(&q, &c, &[0.9, 0.1], 1.0).unwrap();
        let (e1, e2) = (0.9f64.exp(), 0.1f64.exp());
        let expected = -(0.9 * (e1 / (e1 + e2)).ln() + 0.1 * (e2 / (e1 + e2)).ln());
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(got, loss_eng(&q, &c, &[0.9, 0.1], 1.0).unwrap());
    }

    #[test]
    fn small_temperature_limit() {
        let q = unit(&[1.0, 0.0]);
        let c = [at_cos(0.8), at_cos(0.2), at_cos(-0.5)];
        let l = loss_eng(&q, &c, &[1.0, 0.0, 0.0], 1e-3).unwrap();
        assert!(l < 1e-12);
        assert!(loss_eng(&q, &c, &[1.0, 0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(1.0, 0.5, 0.5), 0.75);
        assert_eq!(loss_total(1.3, 0.7, 1.0), 1.3);
        assert_eq!(loss_total(1.3, 0.7, 0.0), 0.7);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let scores = [0.3, -0.2, 0.7, 0.1];
        let w = [0.5, 0.0, 0.3, 0.2];
        let t = 0.25;
        let base = softmax_loss(&scores, &w, t).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut up = scores;
            up[j] += h;
            let mut dn = scores;
            dn[j] -= h;
            let fd = (softmax_loss(&up, &w, t).unwrap().value - softmax_loss(&dn, &w, t).unwrap().value) / (2.0 * h);
            assert!((fd - base.d_scores[j]).abs() < 1e-7);
        }
        let fd = (softmax_loss(&scores, &w, (t.ln() + h).exp()).unwrap().value
            - softmax_loss(&scores, &w, (t.ln() - h).exp()).unwrap().value)
            / (2.0 * h);
        assert!((fd - base.d_log_temperature).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(scores in prop::collection::vec(-1.0..1.0f64, 1..16), t in 0.01..2.0f64) {
            let p = softmax(&scores, t);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn loss_is_nonnegative(
            scores in prop::collection::vec(-1.0..1.0f64, 1..12),
            raw in prop::collection::vec(0.0..5.0f64, 12),
            t in 0.01..2.0f64,
        ) {
            let mut w: Vec<f64> = raw[..scores.len()].to_vec();
            w[0] += 0.1;
            let w = normalize_labels(&w).unwrap();
            let l = softmax_loss(&scores, &w, t).unwrap();
            prop_assert!(l.value.is_finite() && l.value >= -1e-12);
        }

        #[test]
        fn total_is_affine_in_omega(e in 0.0..10.0f64, r in 0.0..10.0f64) {
            let at = |o: f64| loss_total(e, r, o);
            for o in [0.0, 0.25, 0.5, 1.0] {
                prop_assert!((at(o) - (r + o * (e - r))).abs() < 1e-10);
            }
        }
    }
}
