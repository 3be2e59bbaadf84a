//! Selective modality shifting: donor plans and probe materialization.
//!
//! Every eligible recipient gets one donor of the opposite label. The same
//! plan drives both the text swap `(I, T', y)` and the image swap `(I', T, y)`
//! so that the two perturbations of a sample share a donor.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{Label, Manifest, SampleRecord};

#[derive(Debug, thiserror::Error)]
pub enum SmsError {
    #[error("no donors with label {needed} for recipients with label {recipient}")]
    NoDonors { recipient: Label, needed: Label },
    #[error("condition {0} needs a pair plan")]
    PlanRequired(Condition),
    #[error("plan references donor {0:?} which is not in the manifest")]
    UnknownDonor(String),
    #[error("plan references recipient {0:?} which is not in the manifest")]
    UnknownRecipient(String),
    #[error("plan assigns donor {donor:?} with the same label as recipient {recipient:?}")]
    SameLabel { recipient: String, donor: String },
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("unknown recipient mode {0:?} (expected all|positive)")]
    UnknownMode(String),
}

/// Evaluation condition of a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoShift,
    TextShift,
    ImageShift,
    OnlyText,
    OnlyImage,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::NoShift,
        Condition::TextShift,
        Condition::ImageShift,
        Condition::OnlyText,
        Condition::OnlyImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::NoShift => "no_shift",
            Condition::TextShift => "text_shift",
            Condition::ImageShift => "image_shift",
            Condition::OnlyText => "only_text",
            Condition::OnlyImage => "only_image",
        }
    }

    pub fn needs_plan(self) -> bool {
        matches!(self, Condition::TextShift | Condition::ImageShift)
    }

    pub fn has_text(self) -> bool {
        self != Condition::OnlyImage
    }

    pub fn has_image(self) -> bool {
        self != Condition::OnlyText
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = SmsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| SmsError::UnknownCondition(s.to_string()))
    }
}

/// Which samples receive a donor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipientMode {
    #[default]
    AllSamples,
    PositiveOnly,
}

impl RecipientMode {
    pub fn is_eligible(self, label: Label) -> bool {
        match self {
            RecipientMode::AllSamples => true,
            RecipientMode::PositiveOnly => label == Label::Positive,
        }
    }
}

impl fmt::Display for RecipientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecipientMode::AllSamples => "all",
            RecipientMode::PositiveOnly => "positive",
        })
    }
}

impl FromStr for RecipientMode {
    type Err = SmsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" | "all_samples" => Ok(RecipientMode::AllSamples),
            "positive" | "positive_only" => Ok(RecipientMode::PositiveOnly),
            _ => Err(SmsError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub seed: u64,
    pub recipient_mode: RecipientMode,
    /// recipient id → donor id
    pub assignments: BTreeMap<String, String>,
}

impl PairPlan {
    pub fn donor_of(&self, recipient: &str) -> Option<&str> {
        self.assignments.get(recipient).map(String::as_str)
    }

    /// Checks that every assignment joins back to the manifest with opposite labels.
    pub fn check_against(&self, m: &Manifest) -> Result<(), SmsError> {
        let index = m.index();
        for (r, d) in &self.assignments {
            let rec = index
                .get(r.as_str())
                .ok_or_else(|| SmsError::UnknownRecipient(r.clone()))?;
            let donor = index
                .get(d.as_str())
                .ok_or_else(|| SmsError::UnknownDonor(d.clone()))?;
            if rec.label == donor.label {
                return Err(SmsError::SameLabel {
                    recipient: r.clone(),
                    donor: d.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Draws one donor per eligible recipient, uniformly with replacement from
/// the opposite-label pool. Recipients are visited in manifest order so the
/// draw sequence is fixed by `(manifest, seed, mode)`.
pub fn build_pair_plan(m: &Manifest, seed: u64, mode: RecipientMode) -> Result<PairPlan, SmsError> {
    let pool = |label: Label| -> Vec<&SampleRecord> {
        m.records.iter().filter(|r| r.label == label).collect()
    };
    let positives = pool(Label::Positive);
    let negatives = pool(Label::Negative);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    for rec in m.records.iter().filter(|r| mode.is_eligible(r.label)) {
        let donors = match rec.label {
            Label::Positive => &negatives,
            Label::Negative => &positives,
        };
        if donors.is_empty() {
            return Err(SmsError::NoDonors {
                recipient: rec.label,
                needed: rec.label.opposite(),
            });
        }
        let donor = donors[rng.gen_range(0..donors.len())];
        assignments.insert(rec.id.clone(), donor.id.clone());
    }
    Ok(PairPlan {
        seed,
        recipient_mode: mode,
        assignments,
    })
}

/// One model input: a recipient under a condition, with the effective
/// modalities after any swap or removal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub sample_id: String,
    pub condition: Condition,
    pub image_ref: Option<String>,
    pub text: Option<String>,
    /// Metadata travels with the text it describes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
    pub label: Label,
    pub donor_id: Option<String>,
}

/// Materializes the probes of one condition in manifest order.
///
/// With a plan, only the plan's recipients are emitted (so every condition
/// covers the same sample set); without one, every record is.
pub fn materialize(
    m: &Manifest,
    plan: Option<&PairPlan>,
    c: Condition,
) -> Result<Vec<ProbeInstance>, SmsError> {
    if c.needs_plan() && plan.is_none() {
        return Err(SmsError::PlanRequired(c));
    }
    let index: HashMap<&str, &SampleRecord> = m.index();
    if let Some(p) = plan {
        if let Some(missing) = p.assignments.keys().find(|r| !index.contains_key(r.as_str())) {
            return Err(SmsError::UnknownRecipient(missing.clone()));
        }
    }

    let mut out = Vec::new();
    for rec in &m.records {
        let donor_id = match plan {
            Some(p) => match p.donor_of(&rec.id) {
                Some(d) => Some(d),
                None => continue,
            },
            None => None,
        };
        let donor = |id: &str| -> Result<&SampleRecord, SmsError> {
            let d = index
                .get(id)
                .copied()
                .ok_or_else(|| SmsError::UnknownDonor(id.to_string()))?;
            if d.label == rec.label {
                return Err(SmsError::SameLabel {
                    recipient: rec.id.clone(),
                    donor: id.to_string(),
                });
            }
            Ok(d)
        };

        let probe = match c {
            Condition::NoShift => ProbeInstance {
                sample_id: rec.id.clone(),
                condition: c,
                image_ref: Some(rec.image_ref.clone()),
                text: Some(rec.text.clone()),
                meta: rec.meta.clone(),
                label: rec.label,
                donor_id: None,
            },
            Condition::TextShift => {
                let d = donor(donor_id.expect("plan checked"))?;
                ProbeInstance {
                    sample_id: rec.id.clone(),
                    condition: c,
                    image_ref: Some(rec.image_ref.clone()),
                    text: Some(d.text.clone()),
                    meta: d.meta.clone(),
                    label: rec.label,
                    donor_id: Some(d.id.clone()),
                }
            }
            Condition::ImageShift => {
                let d = donor(donor_id.expect("plan checked"))?;
                ProbeInstance {
                    sample_id: rec.id.clone(),
                    condition: c,
                    image_ref: Some(d.image_ref.clone()),
                    text: Some(rec.text.clone()),
                    meta: rec.meta.clone(),
                    label: rec.label,
                    donor_id: Some(d.id.clone()),
                }
            }
            Condition::OnlyText => ProbeInstance {
                sample_id: rec.id.clone(),
                condition: c,
                image_ref: None,
                text: Some(rec.text.clone()),
                meta: rec.meta.clone(),
                label: rec.label,
                donor_id: None,
            },
            Condition::OnlyImage => ProbeInstance {
                sample_id: rec.id.clone(),
                condition: c,
                image_ref: Some(rec.image_ref.clone()),
                text: None,
                meta: BTreeMap::new(),
                label: rec.label,
                donor_id: None,
            },
        };
        out.push(probe);
    }
    Ok(out)
}
