//! First-token probabilities, binned ECE and reliability points.

use serde::{Deserialize, Serialize};

use crate::manifest::Label;
use crate::normalize::{NormalizedAnswer, Verdict};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("logits must be finite, got ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("probability must lie in [0, 1], got {0}")]
    OutOfRange(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no predictions")]
    Empty,
    #[error("bin count must be positive")]
    NoBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenProb {
    pub p_yes: f64,
    pub p_no: f64,
    /// Argmax; an exact tie predicts 0.
    pub predicted: Label,
    pub confidence: f64,
}

impl FirstTokenProb {
    fn from_pair(p_yes: f64, p_no: f64) -> Self {
        let predicted = if p_yes > p_no { Label::Positive } else { Label::Negative };
        FirstTokenProb {
            p_yes,
            p_no,
            predicted,
            confidence: p_yes.max(p_no),
        }
    }

    pub fn from_p_yes(p_yes: f64) -> Result<Self, CalibrationError> {
        if !(0.0..=1.0).contains(&p_yes) {
            return Err(CalibrationError::OutOfRange(p_yes));
        }
        Ok(Self::from_pair(p_yes, 1.0 - p_yes))
    }
}

/// Two-way softmax over the yes/no logits, shifted by the max for stability.
pub fn softmax2(logit_yes: f64, logit_no: f64) -> Result<FirstTokenProb, CalibrationError> {
    if !logit_yes.is_finite() || !logit_no.is_finite() {
        return Err(CalibrationError::NonFinite(logit_yes, logit_no));
    }
    let m = logit_yes.max(logit_no);
    let ey = (logit_yes - m).exp();
    let en = (logit_no - m).exp();
    let z = ey + en;
    Ok(FirstTokenProb::from_pair(ey / z, en / z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// 1-based.
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub correct: u64,
    pub conf_sum: f64,
    pub acc: Option<f64>,
    pub conf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceResult {
    pub ece: f64,
    pub n: u64,
    pub bins: Vec<CalibrationBin>,
    /// `(conf, acc)` of every non-empty bin, ascending in confidence.
    pub reliability_points: Vec<(f64, f64)>,
}

fn bin_bounds(m: usize, bins: usize) -> (f64, f64) {
    ((m - 1) as f64 / bins as f64, m as f64 / bins as f64)
}

/// 1-based bin of `confidence` among `bins` intervals `(lower, upper]`;
/// zero falls in the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let mut m = ((confidence * bins as f64).ceil() as usize).clamp(1, bins);
    // the product can land one bin off near a boundary; settle against the
    // exact bounds used for reporting
    while m > 1 && confidence <= bin_bounds(m, bins).0 {
        m -= 1;
    }
    while m < bins && confidence > bin_bounds(m, bins).1 {
        m += 1;
    }
    m
}

pub fn ece(probs: &[FirstTokenProb], correct: &[bool], bins: usize) -> Result<EceResult, CalibrationError> {
    if probs.len() != correct.len() {
        return Err(CalibrationError::LengthMismatch(probs.len(), correct.len()));
    }
    if probs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if bins == 0 {
        return Err(CalibrationError::NoBins);
    }
    let mut count = vec![0u64; bins];
    let mut hits = vec![0u64; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (p, &ok) in probs.iter().zip(correct) {
        let b = bin_index(p.confidence, bins) - 1;
        count[b] += 1;
        hits[b] += ok as u64;
        conf_sum[b] += p.confidence;
    }

    let n = probs.len() as u64;
    // (|B|/n)·|acc − conf| == |hits − conf_sum| / n; summing the numerators
    // and dividing once avoids the rounding of acc and conf separately
    let gap: f64 = (0..bins).map(|b| (hits[b] as f64 - conf_sum[b]).abs()).sum();
    let bins_out: Vec<CalibrationBin> = (0..bins)
        .map(|b| {
            let (lower, upper) = bin_bounds(b + 1, bins);
            let filled = count[b] > 0;
            CalibrationBin {
                index: b + 1,
                lower,
                upper,
                count: count[b],
                correct: hits[b],
                conf_sum: conf_sum[b],
                acc: filled.then(|| hits[b] as f64 / count[b] as f64),
                conf: filled.then(|| conf_sum[b] / count[b] as f64),
            }
        })
        .collect();
    let reliability_points = bins_out
        .iter()
        .filter_map(|b| Some((b.conf?, b.acc?)))
        .collect();
    Ok(EceResult {
        ece: gap / n as f64,
        n,
        bins: bins_out,
        reliability_points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    /// Agreeing / compared; absent when every answer was unparseable.
    pub rate: Option<f64>,
    pub n_compared: u64,
    pub n_agree: u64,
    pub n_excluded: u64,
}

/// How often the first-token argmax agrees with the pattern-mapped answer.
pub fn agreement_rate(
    first_token_predicted: &[Label],
    normalized: &[NormalizedAnswer],
) -> Result<AgreementResult, CalibrationError> {
    if first_token_predicted.len() != normalized.len() {
        return Err(CalibrationError::LengthMismatch(
            first_token_predicted.len(),
            normalized.len(),
        ));
    }
    let mut n_compared = 0u64;
    let mut n_agree = 0u64;
    for (&p, a) in first_token_predicted.iter().zip(normalized) {
        if a.verdict == Verdict::Unparseable {
            continue;
        }
        n_compared += 1;
        n_agree += (a.verdict.label() == Some(p)) as u64;
    }
    Ok(AgreementResult {
        rate: (n_compared > 0).then(|| n_agree as f64 / n_compared as f64),
        n_compared,
        n_agree,
        n_excluded: normalized.len() as u64 - n_compared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Textbook recomputation: assign each prediction to its bin by a linear
    /// scan over the bin bounds, then evaluate Σ (|B|/n)|acc − conf|.
    fn brute_force_ece(confidences: &[f64], correct: &[bool], bins: usize) -> f64 {
        let n = confidences.len() as f64;
        let mut total = 0.0;
        for m in 1..=bins {
            let lo = (m - 1) as f64 / bins as f64;
            let hi = m as f64 / bins as f64;
            let members: Vec<usize> = (0..confidences.len())
                .filter(|&i| {
                    let c = confidences[i];
                    (c > lo && c <= hi) || (m == 1 && c == 0.0)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / k;
            let conf = members.iter().map(|&i| confidences[i]).sum::<f64>() / k;
            total += (k / n) * (acc - conf).abs();
        }
        total
    }

    #[test]
    fn softmax_cases() {
        let p = softmax2(0.0, 0.0).unwrap();
        assert_eq!(p.p_yes, 0.5);
        assert_eq!(p.predicted, Label::Negative);

        let p = softmax2(2.0, 0.0).unwrap();
        let expected = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((p.p_yes - expected).abs() < 1e-15);
        assert!((p.p_yes - 0.880797).abs() < 1e-6);
        assert_eq!(p.predicted, Label::Positive);

        let p = softmax2(1000.0, 0.0).unwrap();
        assert_eq!(p.p_yes, 1.0);
        assert!(p.p_no.is_finite());

        assert!(softmax2(f64::NAN, 0.0).is_err());
        assert!(softmax2(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn perfect_and_inverted_confidence() {
        let probs = vec![FirstTokenProb::from_p_yes(1.0).unwrap(); 5];
        assert_eq!(ece(&probs, &[true; 5], 10).unwrap().ece, 0.0);
        assert_eq!(ece(&probs, &[false; 5], 10).unwrap().ece, 1.0);
    }

    #[test]
    fn single_bin_hand_case() {
        let probs = vec![FirstTokenProb::from_p_yes(0.75).unwrap(); 10];
        let correct: Vec<bool> = (0..10).map(|i| i < 6).collect();
        let r = ece(&probs, &correct, 10).unwrap();
        assert_eq!(r.ece, 0.15);
        assert_eq!(r.bins[7].count, 10);
        assert_eq!(r.reliability_points, vec![(0.75, 0.6)]);
    }

    #[test]
    fn boundaries_fall_in_lower_bin() {
        for m in 1..=10 {
            let upper = m as f64 / 10.0;
            assert_eq!(bin_index(upper, 10), m, "{upper}");
        }
        assert_eq!(bin_index(0.0, 10), 1);
        assert_eq!(bin_index(0.7000000000000001, 10), 8);
    }

    #[test]
    fn errors() {
        let p = vec![FirstTokenProb::from_p_yes(0.6).unwrap()];
        assert_eq!(ece(&p, &[], 10), Err(CalibrationError::LengthMismatch(1, 0)));
        assert_eq!(ece(&[], &[], 10), Err(CalibrationError::Empty));
        assert!(FirstTokenProb::from_p_yes(1.5).is_err());
    }

    #[test]
    fn agreement_cases() {
        let yes = NormalizedAnswer { verdict: Verdict::Yes, matched_span: Some((0, 3)) };
        let no = NormalizedAnswer { verdict: Verdict::No, matched_span: Some((0, 2)) };
        let un = NormalizedAnswer::unparseable();
        let r = agreement_rate(&[Label::Positive, Label::Negative], &[yes.clone(), no.clone()]).unwrap();
        assert_eq!(r.rate, Some(1.0));

        let preds = [Label::Positive, Label::Positive, Label::Negative, Label::Positive, Label::Negative];
        let answers = [yes.clone(), yes.clone(), no.clone(), no.clone(), un.clone()];
        let r = agreement_rate(&preds, &answers).unwrap();
        assert_eq!(r.rate, Some(0.75));
        assert_eq!(r.n_excluded, 1);

        let r = agreement_rate(&[Label::Positive, Label::Negative], &[un.clone(), un]).unwrap();
        assert_eq!(r.rate, None);
        assert_eq!(r.n_excluded, 2);

        assert!(agreement_rate(&[Label::Positive], &[]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let probs: Vec<_> = (0..1000)
            .map(|_| FirstTokenProb::from_p_yes(rng.gen::<f64>()).unwrap())
            .collect();
        let correct: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.7)).collect();
        let conf: Vec<f64> = probs.iter().map(|p| p.confidence).collect();
        let r = ece(&probs, &correct, 10).unwrap();
        assert!((r.ece - brute_force_ece(&conf, &correct, 10)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ece_equals_weighted_bin_gaps(ps in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200)) {
            let probs: Vec<_> = ps.iter().map(|&(p, _)| FirstTokenProb::from_p_yes(p).unwrap()).collect();
            let correct: Vec<bool> = ps.iter().map(|&(_, c)| c).collect();
            let r = ece(&probs, &correct, DEFAULT_BINS).unwrap();
            let stored: f64 = r.bins.iter().filter(|b| b.count > 0)
                .map(|b| (b.count as f64 / r.n as f64) * (b.acc.unwrap() - b.conf.unwrap()).abs())
                .sum();
            prop_assert!((r.ece - stored).abs() < 1e-12);
            let conf: Vec<f64> = probs.iter().map(|p| p.confidence).collect();
            prop_assert!((r.ece - brute_force_ece(&conf, &correct, DEFAULT_BINS)).abs() < 1e-12);
            prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<u64>(), r.n);
            // confidence is a max of complementary probabilities
            prop_assert!(r.bins[..5].iter().all(|b| b.count == 0));
            prop_assert!((0.0..=1.0).contains(&r.ece));
        }

        #[test]
        fn softmax_shift_invariant(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -100.0f64..100.0) {
            let p = softmax2(a, b).unwrap();
            let q = softmax2(a + c, b + c).unwrap();
            prop_assert!((p.p_yes - q.p_yes).abs() < 1e-12);
            prop_assert!((p.p_no - q.p_no).abs() < 1e-12);
            prop_assert!((p.p_yes + p.p_no - 1.0).abs() < 1e-12);
            prop_assert_eq!(p.predicted == Label::Positive, p.p_yes > p.p_no);
            prop_assert!(p.confidence >= 0.5 && p.confidence <= 1.0);
        }
    }
}
