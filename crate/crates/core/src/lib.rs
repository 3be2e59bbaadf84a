//! Counterfactual modality-swap diagnostics for multimodal binary classifiers.
//!
//! The harness pairs every sample with an opposite-label donor, swaps exactly
//! one modality (text or image), queries a model backend over a small JSON/HTTP
//! protocol and measures how far the predictions move:
//!
//! - [`manifest`] loads `(image, text, label)` records from JSONL.
//! - [`sms`] builds seeded donor plans and materializes probe instances for
//!   the five evaluation conditions.
//! - [`protocol`] defines the wire protocol, the HTTP client and the
//!   content-addressed response store used for record/replay.
//! - [`normalize`] maps free-form generations to yes/no verdicts.
//! - [`metrics`], [`calibration`] and [`attention`] compute the diagnostics.
//! - [`report`] orchestrates runs and emits JSON/CSV/plot data.
//! - [`oracles`] provides synthetic manifests and mock backends with known
//!   ground truth.

pub mod attention;
pub mod calibration;
pub mod canonical;
pub mod manifest;
pub mod metrics;
pub mod normalize;
pub mod oracles;
pub mod protocol;
pub mod report;
pub mod sms;
pub mod template;

pub use attention::{AttentionBundle, ModalityShare, RowShare, StabilityStats, TokenRole};
pub use calibration::{AgreementResult, CalibrationBin, EceResult, FirstTokenProb};
pub use manifest::{Label, Manifest, SampleRecord, ValidationReport};
pub use metrics::{MetricSet, NfrResult, PredictionRecord};
pub use normalize::{NormalizedAnswer, PatternConfig, Verdict};
pub use protocol::{ModelCapabilities, ModelResponse, PredictRequest, ResponseStore};
pub use report::RunReport;
pub use sms::{Condition, PairPlan, ProbeInstance, RecipientMode};
