//! Inference wire protocol.
//!
//! Backends expose `GET /capabilities` (a [`ModelCapabilities`] body) and
//! `POST /predict` (a [`PredictRequest`] body answered by a
//! [`ModelResponse`]). Requests are content-addressed by [`canonical_hash`],
//! which keys the record/replay [`ResponseStore`].

mod client;
mod store;

use std::fs;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionBundle, AttentionError};
use crate::canonical::to_canonical_string;

pub use client::{Backend, ClientConfig, ClientError, HttpBackend};
pub use store::{ResponseStore, StoreError};

pub const YES_TOKEN: &str = "yes";
pub const NO_TOKEN: &str = "no";

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("request has neither text nor image")]
    NoModality,
    #[error("candidate_tokens must be two distinct strings, got {0:?}")]
    BadCandidates(Vec<String>),
    #[error("cannot read image {path}: {source}")]
    ImageRead {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("inline image is not valid base64: {0}")]
    ImageDecode(#[from] base64::DecodeError),
    #[error("logits must be finite, got yes={yes} no={no}")]
    NonFiniteLogits { yes: f64, no: f64 },
    #[error("response echoes request id {got:?}, expected {expected:?}")]
    RequestIdMismatch { expected: String, got: String },
    #[error("attention bundle: {0}")]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCapabilities {
    pub model_id: String,
    pub supports_text_only: bool,
    pub supports_image_only: bool,
    pub supports_attention: bool,
    /// How the backend reduced layers/heads to one vector per generated token.
    #[serde(default)]
    pub attention_aggregation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum ImagePayload {
    #[serde(rename = "path")]
    Path { media_type: String, path: String },
    #[serde(rename = "inline-base64")]
    InlineBase64 { media_type: String, data: String },
}

impl ImagePayload {
    pub fn media_type(&self) -> &str {
        match self {
            ImagePayload::Path { media_type, .. } | ImagePayload::InlineBase64 { media_type, .. } => media_type,
        }
    }

    pub fn inline(media_type: impl Into<String>, bytes: &[u8]) -> Self {
        ImagePayload::InlineBase64 {
            media_type: media_type.into(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    /// Raw image bytes, reading the file in path mode.
    pub fn bytes(&self) -> Result<Vec<u8>, ProtocolError> {
        match self {
            ImagePayload::Path { path, .. } => fs::read(path).map_err(|source| ProtocolError::ImageRead {
                path: path.clone(),
                source,
            }),
            ImagePayload::InlineBase64 { data, .. } => {
                Ok(base64::engine::general_purpose::STANDARD.decode(data)?)
            }
        }
    }
}

/// Guesses a media type from a file extension.
pub fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("tif" | "tiff") => "image/tiff",
        Some("webp") => "image/webp",
        Some("dcm") => "application/dicom",
        Some("stub") => "application/x-sms-stub",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub request_id: String,
    pub instruction: String,
    pub text: Option<String>,
    pub image: Option<ImagePayload>,
    pub candidate_tokens: Vec<String>,
    #[serde(default)]
    pub return_attention: bool,
}

impl PredictRequest {
    pub fn new(
        request_id: impl Into<String>,
        instruction: impl Into<String>,
        text: Option<String>,
        image: Option<ImagePayload>,
    ) -> Self {
        PredictRequest {
            request_id: request_id.into(),
            instruction: instruction.into(),
            text,
            image,
            candidate_tokens: vec![YES_TOKEN.to_string(), NO_TOKEN.to_string()],
            return_attention: false,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.text.is_none() && self.image.is_none() {
            return Err(ProtocolError::NoModality);
        }
        if self.candidate_tokens.len() != 2 || self.candidate_tokens[0] == self.candidate_tokens[1] {
            return Err(ProtocolError::BadCandidates(self.candidate_tokens.clone()));
        }
        Ok(())
    }

    /// Capability the request needs beyond the image+text default, if any.
    pub fn required_capability(&self) -> Option<&'static str> {
        match (self.text.is_some(), self.image.is_some()) {
            (true, false) => Some("supports_text_only"),
            (false, true) => Some("supports_image_only"),
            _ => None,
        }
    }

    pub fn permitted_by(&self, caps: &ModelCapabilities) -> bool {
        match self.required_capability() {
            Some("supports_text_only") => caps.supports_text_only,
            Some("supports_image_only") => caps.supports_image_only,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenLogits {
    pub yes: f64,
    pub no: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub request_id: String,
    pub generated_text: String,
    pub first_token_logits: FirstTokenLogits,
    #[serde(default)]
    pub attention: Option<AttentionBundle>,
}

impl ModelResponse {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let FirstTokenLogits { yes, no } = self.first_token_logits;
        if !yes.is_finite() || !no.is_finite() {
            return Err(ProtocolError::NonFiniteLogits { yes, no });
        }
        if let Some(a) = &self.attention {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CanonicalImage<'a> {
    media_type: &'a str,
    sha256: String,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    candidate_tokens: &'a [String],
    image: Option<CanonicalImage<'a>>,
    instruction: &'a str,
    text: Option<&'a str>,
}

/// The exact byte string that [`canonical_hash`] digests: compact JSON with
/// sorted keys over `candidate_tokens`, `image` (`{media_type, sha256}` of
/// the image content, or null), `instruction` and `text`.
pub fn canonical_form(r: &PredictRequest) -> Result<String, ProtocolError> {
    let image = match &r.image {
        None => None,
        Some(img) => Some(CanonicalImage {
            media_type: img.media_type(),
            sha256: hex::encode(Sha256::digest(img.bytes()?)),
        }),
    };
    let c = CanonicalRequest {
        candidate_tokens: &r.candidate_tokens,
        image,
        instruction: &r.instruction,
        text: r.text.as_deref(),
    };
    Ok(to_canonical_string(&c).expect("canonical request serializes"))
}

/// SHA-256 of [`canonical_form`], lowercase hex. Independent of
/// `request_id`, `return_attention` and of how the image is transported.
pub fn canonical_hash(r: &PredictRequest) -> Result<String, ProtocolError> {
    Ok(hex::encode(Sha256::digest(canonical_form(r)?.as_bytes())))
}
