//! Helpers shared by the integration tests. The brute-force functions here
//! re-derive library behavior from first principles and deliberately avoid
//! the library's own hashing and binning code.
#![allow(dead_code)]

use std::path::Path;

use sha2::{Digest, Sha256};
use sms_probe::manifest::Manifest;
use sms_probe::oracles::{generate_manifest, SyntheticManifestSpec};
use sms_probe::sms::PairPlan;
use sms_probe::template::PromptTemplate;

pub fn synth(dir: &Path, n_per_class: usize, seed: u64) -> Manifest {
    generate_manifest(&SyntheticManifestSpec { n_per_class, seed }, dir).unwrap()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical request digest, built by hand.
pub fn digest_by_hand(instruction: &str, text: Option<&str>, image: Option<(&str, &[u8])>) -> String {
    let image = image.map(|(mt, bytes)| serde_json::json!({ "media_type": mt, "sha256": sha256_hex(bytes) }));
    let form = serde_json::json!({
        "candidate_tokens": ["yes", "no"],
        "image": image,
        "instruction": instruction,
        "text": text,
    });
    sha256_hex(serde_json::to_string(&form).unwrap().as_bytes())
}

pub fn unit_draw_by_hand(seed: u64, stream: u8, digest: &str) -> f64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.push(stream);
    bytes.extend_from_slice(digest.as_bytes());
    let h = Sha256::digest(&bytes);
    let mut top = 0u64;
    for b in &h[..8] {
        top = (top << 8) | *b as u64;
    }
    (top >> 11) as f64 / 9007199254740992.0
}

/// Number of text_shift probes for which a fusion oracle with weight
/// `w_text` reads the text cue.
pub fn fusion_text_consultations(
    m: &Manifest,
    plan: &PairPlan,
    root: &Path,
    template: &PromptTemplate,
    seed: u64,
    w_text: f64,
) -> usize {
    let instruction = template.instruction(true, true);
    let mut count = 0;
    for r in &m.records {
        let Some(donor_id) = plan.donor_of(&r.id) else { continue };
        let donor = m.get(donor_id).unwrap();
        let text = template.text(&donor.meta, &donor.text);
        let bytes = std::fs::read(root.join(&r.image_ref)).unwrap();
        let digest = digest_by_hand(&instruction, Some(&text), Some(("application/x-sms-stub", &bytes)));
        if unit_draw_by_hand(seed, 0, &digest) < w_text {
            count += 1;
        }
    }
    count
}

/// Per-prediction ECE: each prediction adds |acc_bin - conf_bin| / n, with
/// bins found by scanning `((m-1)/M, m/M]` and zero in the first bin.
pub fn ece_by_hand(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let find = |c: f64| {
        (1..=bins)
            .find(|&m| {
                let lo = (m - 1) as f64 / bins as f64;
                let hi = m as f64 / bins as f64;
                (c > lo || (m == 1 && c == 0.0)) && c <= hi
            })
            .unwrap()
    };
    let n = conf.len() as f64;
    let mut count = vec![0f64; bins + 1];
    let mut hits = vec![0f64; bins + 1];
    let mut sum = vec![0f64; bins + 1];
    let idx: Vec<usize> = conf.iter().map(|&c| find(c)).collect();
    for (i, &b) in idx.iter().enumerate() {
        count[b] += 1.0;
        hits[b] += correct[i] as u8 as f64;
        sum[b] += conf[i];
    }
    idx.iter()
        .map(|&b| (hits[b] / count[b] - sum[b] / count[b]).abs() / n)
        .sum()
}
