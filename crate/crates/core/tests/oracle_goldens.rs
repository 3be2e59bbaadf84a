//! Seeded oracle behavior frozen as goldens.

use sms_probe::calibration::softmax2;
use sms_probe::manifest::Label;
use sms_probe::oracles::{decode_text_cue, text_cue, OracleKind, OracleSpec};
use sms_probe::protocol::PredictRequest;

const NOISE_SEED: u64 = 2024;
const NOISE_N: usize = 10_000;
// recorded from the first seeded run
const GOLDEN_CORRECT: usize = 7474;
const GOLDEN_MEAN_CONF: f64 = 0.7476814534384414;

fn one_class_requests(n: usize) -> Vec<PredictRequest> {
    (0..n)
        .map(|i| {
            PredictRequest::new(
                format!("r{i}"),
                "Is the finding present?",
                Some(format!("Note {i}: {}.", text_cue(Label::Positive))),
                None,
            )
        })
        .collect()
}

#[test]
fn calibrated_noise_accuracy_tracks_confidence() {
    let spec = OracleSpec::new(OracleKind::CalibratedNoise, NOISE_SEED);
    let mut correct = 0usize;
    let mut conf_sum = 0.0;
    for req in one_class_requests(NOISE_N) {
        let resp = spec.respond(&req).unwrap();
        let p = softmax2(resp.first_token_logits.yes, resp.first_token_logits.no).unwrap();
        conf_sum += p.confidence;
        correct += (p.predicted == Label::Positive) as usize;
        assert_eq!(decode_text_cue(req.text.as_deref().unwrap()), Some(Label::Positive));
    }
    let acc = correct as f64 / NOISE_N as f64;
    let mean_conf = conf_sum / NOISE_N as f64;
    assert!((acc - mean_conf).abs() <= 0.02, "acc {acc} vs conf {mean_conf}");
    assert_eq!(correct, GOLDEN_CORRECT);
    assert!((mean_conf - GOLDEN_MEAN_CONF).abs() < 1e-12);
}

#[test]
fn inverted_is_wrong_with_probability_c() {
    let spec = OracleSpec::new(OracleKind::Inverted, NOISE_SEED);
    let mut correct = 0usize;
    let mut conf_sum = 0.0;
    for req in one_class_requests(NOISE_N) {
        let resp = spec.respond(&req).unwrap();
        let p = softmax2(resp.first_token_logits.yes, resp.first_token_logits.no).unwrap();
        conf_sum += p.confidence;
        correct += (p.predicted == Label::Positive) as usize;
    }
    let acc = correct as f64 / NOISE_N as f64;
    let mean_conf = conf_sum / NOISE_N as f64;
    assert!((acc - (1.0 - mean_conf)).abs() <= 0.02, "acc {acc} vs 1-conf {}", 1.0 - mean_conf);
}

#[test]
fn deterministic_oracles_emit_the_margin() {
    for kind in [OracleKind::Text, OracleKind::Image, OracleKind::Fusion { w_text: 0.5 }] {
        let spec = OracleSpec::new(kind, 1);
        let req = PredictRequest::new("r", "i", Some(text_cue(Label::Negative).into()), None);
        let resp = spec.respond(&req).unwrap();
        if matches!(kind, OracleKind::Image) {
            // no image, no cue
            assert_eq!(resp.first_token_logits.yes, resp.first_token_logits.no);
            continue;
        }
        assert_eq!(resp.first_token_logits.no - resp.first_token_logits.yes, spec.margin);
    }
}
