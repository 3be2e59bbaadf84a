//! Synthetic data and mock backends with known ground truth.
//!
//! Synthetic records carry their label twice: as a text cue token
//! (`finding:positive` / `finding:negative`) and as a cue byte inside a stub
//! image file. The mock oracles read those cues from the request payloads,
//! so every metric of a run against them can be derived by hand.
//!
//! Per-request randomness comes from [`unit_draw`] over the seed and the
//! canonical request digest; concurrency and call order cannot change it.

mod server;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionBundle, TokenRole};
use crate::manifest::{Label, Manifest, ManifestError, SampleRecord};
use crate::protocol::{
    canonical_hash, Backend, ClientError, FirstTokenLogits, ModelCapabilities, ModelResponse, PredictRequest,
};

pub use server::{fetch_stats, CallStats, MockServer};

pub const TEXT_CUE_POSITIVE: &str = "finding:positive";
pub const TEXT_CUE_NEGATIVE: &str = "finding:negative";
pub const STUB_MAGIC: &[u8; 8] = b"SMSSTUB1";
pub const STUB_MEDIA_TYPE: &str = "application/x-sms-stub";

pub const ANSWER_YES: &str = "Yes, the patient presents the finding.";
pub const ANSWER_NO: &str = "No, there is no evidence of the finding.";
pub const ANSWER_UNSURE: &str = "The findings are inconclusive.";

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("need at least one record per class")]
    NoRecords,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("unknown oracle {0:?} (expected text|image|fusion:<w>|noise|inverted)")]
    UnknownOracle(String),
    #[error("fusion weight must lie in [0, 1], got {0}")]
    BadWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticManifestSpec {
    pub n_per_class: usize,
    pub seed: u64,
}

pub fn text_cue(label: Label) -> &'static str {
    match label {
        Label::Positive => TEXT_CUE_POSITIVE,
        Label::Negative => TEXT_CUE_NEGATIVE,
    }
}

/// First cue token in reading order.
pub fn decode_text_cue(text: &str) -> Option<Label> {
    let pos = text.find(TEXT_CUE_POSITIVE);
    let neg = text.find(TEXT_CUE_NEGATIVE);
    match (pos, neg) {
        (Some(p), Some(n)) => Some(if p < n { Label::Positive } else { Label::Negative }),
        (Some(_), None) => Some(Label::Positive),
        (None, Some(_)) => Some(Label::Negative),
        (None, None) => None,
    }
}

pub fn stub_image(label: Label, padding: &[u8]) -> Vec<u8> {
    let mut out = STUB_MAGIC.to_vec();
    out.push(label.as_u8());
    out.extend_from_slice(padding);
    out
}

pub fn decode_image_cue(bytes: &[u8]) -> Option<Label> {
    bytes
        .strip_prefix(STUB_MAGIC.as_slice())
        .and_then(|rest| rest.first())
        .and_then(|&b| Label::from_u8(b))
}

const NOTE_OPENERS: [&str; 4] = [
    "Clinical note",
    "Report",
    "Referral summary",
    "Exam findings",
];

/// Writes `n_per_class` positive then `n_per_class` negative records, their
/// stub images under `dir/images/` and the manifest at `dir/manifest.jsonl`.
/// Image refs are relative to `dir`.
pub fn generate_manifest(spec: &SyntheticManifestSpec, dir: &Path) -> Result<Manifest, OracleError> {
    if spec.n_per_class == 0 {
        return Err(OracleError::NoRecords);
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OracleError::Io { path, source }
    };
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io(&images))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(2 * spec.n_per_class);
    for label in [Label::Positive, Label::Negative] {
        let prefix = if label == Label::Positive { "pos" } else { "neg" };
        for i in 0..spec.n_per_class {
            let id = format!("{prefix}-{i:05}");
            let padding: [u8; 16] = rng.gen();
            let rel = format!("images/{id}.stub");
            let path = dir.join(&rel);
            fs::write(&path, stub_image(label, &padding)).map_err(io(&path))?;
            let opener = NOTE_OPENERS[rng.gen_range(0..NOTE_OPENERS.len())];
            let age = rng.gen_range(20..90u32);
            records.push(SampleRecord {
                id,
                image_ref: rel,
                text: format!("{opener} {i}: {}.", text_cue(label)),
                label,
                meta: BTreeMap::from([("age".to_string(), age.to_string())]),
            });
        }
    }
    let manifest = Manifest::from_records(format!("synthetic-{}", spec.seed), "default", records)?;
    let path = dir.join("manifest.jsonl");
    manifest.write(&path).map_err(io(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    /// Answers the text cue.
    Text,
    /// Answers the image cue.
    Image,
    /// Consults the text cue with probability `w_text`, else the image cue.
    Fusion { w_text: f64 },
    /// Draws a confidence c ∈ [0.5, 1) and is correct with probability c.
    CalibratedNoise,
    /// Draws c like `CalibratedNoise` but is correct with probability 1 − c.
    Inverted,
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleKind::Text => write!(f, "text"),
            OracleKind::Image => write!(f, "image"),
            OracleKind::Fusion { w_text } => write!(f, "fusion:{w_text}"),
            OracleKind::CalibratedNoise => write!(f, "noise"),
            OracleKind::Inverted => write!(f, "inverted"),
        }
    }
}

impl FromStr for OracleKind {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(OracleKind::Text),
            "image" => Ok(OracleKind::Image),
            "noise" => Ok(OracleKind::CalibratedNoise),
            "inverted" => Ok(OracleKind::Inverted),
            _ => {
                let w = s
                    .strip_prefix("fusion:")
                    .and_then(|w| w.parse::<f64>().ok())
                    .ok_or_else(|| OracleError::UnknownOracle(s.to_string()))?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(OracleError::BadWeight(w));
                }
                Ok(OracleKind::Fusion { w_text: w })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub seed: u64,
    pub capabilities: ModelCapabilities,
    /// logit(answer) − logit(other) for the deterministic oracles.
    pub margin: f64,
}

impl OracleSpec {
    pub fn new(kind: OracleKind, seed: u64) -> Self {
        OracleSpec {
            kind,
            seed,
            capabilities: ModelCapabilities {
                model_id: format!("mock-{kind}"),
                supports_text_only: true,
                supports_image_only: true,
                supports_attention: true,
                attention_aggregation: "fixture".into(),
            },
            margin: 4.0,
        }
    }

    pub fn without_text_only(mut self) -> Self {
        self.capabilities.supports_text_only = false;
        self
    }
}

/// Uniform draw in `[0, 1)` from the top 53 bits of
/// `SHA-256(seed as u64 little-endian ‖ stream ‖ digest as ASCII hex)`.
pub fn unit_draw(seed: u64, stream: u8, digest: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stream]);
    h.update(digest.as_bytes());
    let out = h.finalize();
    let word = u64::from_be_bytes(out[..8].try_into().expect("8 bytes"));
    (word >> 11) as f64 / (1u64 << 53) as f64
}

pub const STREAM_FUSION: u8 = 0;
pub const STREAM_CONFIDENCE: u8 = 1;
pub const STREAM_CORRECT: u8 = 2;

/// Why a mock refused a request.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Rejection {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("capability: backend does not support {0}")]
    Capability(&'static str),
}

/// The oracle's answer to one request: which label it says (None means it
/// found no cue) and with what confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDecision {
    pub answer: Option<Label>,
    pub confidence: f64,
    pub consulted_text: Option<bool>,
}

impl OracleSpec {
    pub fn decide(&self, req: &PredictRequest) -> Result<(String, OracleDecision), Rejection> {
        req.validate().map_err(|e| Rejection::Invalid(e.to_string()))?;
        if !req.permitted_by(&self.capabilities) {
            return Err(Rejection::Capability(match req.required_capability() {
                Some("supports_text_only") => "text-only input",
                _ => "image-only input",
            }));
        }
        let digest = canonical_hash(req).map_err(|e| Rejection::Invalid(e.to_string()))?;
        let text_label = req.text.as_deref().and_then(decode_text_cue);
        let image_label = match &req.image {
            Some(img) => decode_image_cue(&img.bytes().map_err(|e| Rejection::Invalid(e.to_string()))?),
            None => None,
        };

        let certain = 1.0 / (1.0 + (-self.margin).exp());
        let decision = match self.kind {
            OracleKind::Text => OracleDecision {
                answer: text_label,
                confidence: certain,
                consulted_text: Some(true),
            },
            OracleKind::Image => OracleDecision {
                answer: image_label,
                confidence: certain,
                consulted_text: Some(false),
            },
            OracleKind::Fusion { w_text } => {
                let use_text = match (req.text.is_some(), req.image.is_some()) {
                    (true, true) => unit_draw(self.seed, STREAM_FUSION, &digest) < w_text,
                    (has_text, _) => has_text,
                };
                OracleDecision {
                    answer: if use_text { text_label } else { image_label },
                    confidence: certain,
                    consulted_text: Some(use_text),
                }
            }
            OracleKind::CalibratedNoise | OracleKind::Inverted => {
                let c = 0.5 + 0.5 * unit_draw(self.seed, STREAM_CONFIDENCE, &digest);
                let u = unit_draw(self.seed, STREAM_CORRECT, &digest);
                let correct = match self.kind {
                    OracleKind::Inverted => u >= c,
                    _ => u < c,
                };
                let cue = text_label.or(image_label);
                OracleDecision {
                    answer: cue.map(|l| if correct { l } else { l.opposite() }),
                    confidence: c,
                    consulted_text: None,
                }
            }
        };
        Ok((digest, decision))
    }

    pub fn respond(&self, req: &PredictRequest) -> Result<ModelResponse, Rejection> {
        let (_, d) = self.decide(req)?;
        let (generated_text, logits) = match d.answer {
            None => (ANSWER_UNSURE, FirstTokenLogits { yes: 0.0, no: 0.0 }),
            Some(label) => {
                // softmax2(logit, 0) == confidence
                let logit = (d.confidence / (1.0 - d.confidence)).ln();
                match label {
                    Label::Positive => (ANSWER_YES, FirstTokenLogits { yes: logit, no: 0.0 }),
                    Label::Negative => (ANSWER_NO, FirstTokenLogits { yes: 0.0, no: logit }),
                }
            }
        };
        let logits = match self.kind {
            OracleKind::Text | OracleKind::Image | OracleKind::Fusion { .. } if d.answer.is_some() => {
                // exact declared margin for the deterministic oracles
                let (yes, no) = if logits.yes > logits.no { (self.margin, 0.0) } else { (0.0, self.margin) };
                FirstTokenLogits { yes, no }
            }
            _ => logits,
        };
        let attention = (req.return_attention && self.capabilities.supports_attention)
            .then(|| fixture_attention(req, generated_text, d.consulted_text));
        Ok(ModelResponse {
            request_id: req.request_id.clone(),
            generated_text: generated_text.to_string(),
            first_token_logits: logits,
            attention,
        })
    }
}

const FIXTURE_TEXT_TOKENS: usize = 6;
const FIXTURE_IMAGE_TOKENS: usize = 4;

/// Fixed attention pattern: BOS takes 0.4 of every row; the consulted
/// modality gets rows that vary with the generated token, the other a flat
/// small weight.
pub fn fixture_attention(req: &PredictRequest, generated_text: &str, consulted_text: Option<bool>) -> AttentionBundle {
    let n_text = if req.text.is_some() { FIXTURE_TEXT_TOKENS } else { 0 };
    let n_image = if req.image.is_some() { FIXTURE_IMAGE_TOKENS } else { 0 };
    let mut roles = vec![TokenRole::Bos];
    roles.extend(std::iter::repeat_n(TokenRole::Text, n_text));
    roles.extend(std::iter::repeat_n(TokenRole::Image, n_image));
    let tokens: Vec<String> = generated_text.split_whitespace().map(String::from).collect();
    let text_dominant = consulted_text.unwrap_or(true);
    let rows = (0..tokens.len())
        .map(|t| {
            let mut row = vec![0.4];
            for j in 0..n_text {
                let w = if text_dominant { 0.08 + 0.02 * ((t + j) % 3) as f64 } else { 0.01 };
                row.push(w);
            }
            for j in 0..n_image {
                let w = if text_dominant { 0.01 } else { 0.1 + 0.02 * ((t + j) % 3) as f64 };
                row.push(w);
            }
            row
        })
        .collect();
    AttentionBundle {
        n_text,
        n_image,
        roles,
        rows,
        tokens,
    }
}

/// In-process mock backend.
pub struct MockBackend {
    spec: OracleSpec,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(spec: OracleSpec) -> Self {
        MockBackend {
            spec,
            calls: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn capabilities(&self) -> Result<ModelCapabilities, ClientError> {
        Ok(self.spec.capabilities.clone())
    }

    fn predict(&self, req: &PredictRequest) -> Result<ModelResponse, ClientError> {
        match self.spec.respond(req) {
            Ok(r) => {
                self.calls.fetch_add(1, Ordering::SeqCst);
                Ok(r)
            }
            Err(e) => Err(ClientError::Rejected {
                status: 422,
                message: e.to_string(),
            }),
        }
    }
}
