//! Run orchestration and the aggregated [`RunReport`].
//!
//! A run materializes the probes of every requested condition, turns them
//! into protocol requests, serves what it can from the response store and
//! sends the rest to the backend with bounded parallelism. Every response is
//! recorded as soon as it arrives, so an aborted run resumes without
//! repeating calls. Aggregation happens once, after sorting by
//! `(condition, sample_id)`.

mod emit;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::attention::{modality_shares, stability, AttentionBundle, RowShare, StabilityStats};
use crate::calibration::{
    agreement_rate, ece, softmax2, AgreementResult, CalibrationError, EceResult, FirstTokenProb, DEFAULT_BINS,
};
use crate::canonical::to_canonical_pretty;
use crate::manifest::{Label, Manifest};
use crate::metrics::{metric_set, nfr, MetricSet, MetricsError, NfrResult, PredictionRecord};
use crate::normalize::{map_answer, NormalizedAnswer, PatternConfig};
use crate::protocol::{
    canonical_hash, media_type_for, Backend, ClientError, ImagePayload, ModelCapabilities, ModelResponse,
    PredictRequest, ProtocolError, ResponseStore, StoreError,
};
use crate::sms::{materialize, Condition, PairPlan, ProbeInstance, RecipientMode, SmsError};
use crate::template::PromptTemplate;

pub use emit::{emit, EmitError, Format};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Sms(#[from] SmsError),
    #[error("building request for {sample_id} under {condition}: {source}")]
    Request {
        sample_id: String,
        condition: Condition,
        #[source]
        source: ProtocolError,
    },
    #[error("unsupported image reference {0:?} (only local paths and file:// URIs)")]
    ImageRef(String),
    #[error("backend: {0}")]
    Backend(#[from] ClientError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no capabilities known: pass an endpoint or use a store recorded against one")]
    NoCapabilities,
    #[error("bad response for request {request_id}: {message}")]
    BadResponse { request_id: String, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl RunError {
    /// Failures talking to the backend, as opposed to bad inputs.
    pub fn is_transport(&self) -> bool {
        matches!(self, RunError::Backend(e) if e.is_transport())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub conditions: Vec<Condition>,
    pub parallel: usize,
    pub template: PromptTemplate,
    pub patterns: PatternConfig,
    /// Base directory for relative image refs.
    pub image_root: PathBuf,
    /// Send image bytes inline instead of as paths.
    pub inline_images: bool,
    /// Ask for attention when the backend supports it.
    pub request_attention: bool,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            conditions: Condition::ALL.to_vec(),
            parallel: 4,
            template: PromptTemplate::default(),
            patterns: PatternConfig::default(),
            image_root: PathBuf::from("."),
            inline_images: false,
            request_attention: true,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCondition {
    pub condition: Condition,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityPair {
    pub text: f64,
    pub image: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub n_samples: usize,
    /// Statistics over every non-degenerate row of every sample.
    pub pooled: StabilityStats,
    /// Mean over samples of the across-token variance of each share.
    pub mean_within_sample_variance: ModalityPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub metrics: MetricSet,
    pub calibration: EceResult,
    pub agreement: AgreementResult,
    /// First-token probabilities exactly at 0.5, resolved to "no".
    pub first_token_ties: u64,
    pub attention: Option<AttentionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model_id: String,
    pub attention_aggregation: String,
    pub dataset_name: String,
    pub template_id: String,
    pub seed: Option<u64>,
    pub recipient_mode: Option<RecipientMode>,
    pub n_samples: usize,
    pub conditions: BTreeMap<Condition, ConditionReport>,
    /// Each evaluated condition against no_shift.
    pub nfr: BTreeMap<Condition, NfrResult>,
    pub skipped: Vec<SkippedCondition>,
}

impl RunReport {
    /// Canonical JSON (sorted keys, shortest floats, trailing newline).
    pub fn to_json(&self) -> String {
        to_canonical_pretty(self).expect("report serializes")
    }
}

/// One evaluated probe with everything derived from its response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub sample_id: String,
    pub condition: Condition,
    pub label: Label,
    pub donor_id: Option<String>,
    pub digest: String,
    pub generated_text: String,
    pub answer: NormalizedAnswer,
    pub first_token: FirstTokenProb,
    pub attention: Option<AttentionBundle>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Sorted by `(condition, sample_id)`.
    pub predictions: Vec<SamplePrediction>,
}

struct Job {
    probe: ProbeInstance,
    request: PredictRequest,
    digest: String,
}

fn resolve_image(image_ref: &str, root: &Path) -> Result<PathBuf, RunError> {
    let path = match image_ref.split_once("://") {
        Some(("file", rest)) => PathBuf::from(rest),
        Some(_) => return Err(RunError::ImageRef(image_ref.to_string())),
        None => PathBuf::from(image_ref),
    };
    Ok(if path.is_absolute() { path } else { root.join(path) })
}

fn build_request(p: &ProbeInstance, cfg: &RunConfig, return_attention: bool) -> Result<PredictRequest, RunError> {
    let err = |source| RunError::Request {
        sample_id: p.sample_id.clone(),
        condition: p.condition,
        source,
    };
    let image = match &p.image_ref {
        None => None,
        Some(r) => {
            let path = resolve_image(r, &cfg.image_root)?;
            let media_type = media_type_for(&path).to_string();
            let payload = if cfg.inline_images {
                let bytes = std::fs::read(&path).map_err(|source| {
                    err(ProtocolError::ImageRead {
                        path: path.display().to_string(),
                        source,
                    })
                })?;
                ImagePayload::inline(media_type, &bytes)
            } else {
                let abs = std::path::absolute(&path).unwrap_or(path);
                ImagePayload::Path {
                    media_type,
                    path: abs.display().to_string(),
                }
            };
            Some(payload)
        }
    };
    let text = p.text.as_ref().map(|t| cfg.template.text(&p.meta, t));
    let mut req = PredictRequest::new(
        format!("{}:{}", p.condition, p.sample_id),
        cfg.template.instruction(text.is_some(), image.is_some()),
        text,
        image,
    );
    req.return_attention = return_attention;
    req.validate().map_err(err)?;
    Ok(req)
}

fn capability_gap(c: Condition, caps: &ModelCapabilities) -> Option<String> {
    match c {
        Condition::OnlyText if !caps.supports_text_only => {
            Some(format!("capability: {} does not support text-only input", caps.model_id))
        }
        Condition::OnlyImage if !caps.supports_image_only => {
            Some(format!("capability: {} does not support image-only input", caps.model_id))
        }
        _ => None,
    }
}

/// Sends every request whose digest is missing from `store`. Stops handing
/// out work at the first failure; responses already received stay recorded.
fn execute(
    pending: &[&Job],
    backend: &dyn Backend,
    store: &mut ResponseStore,
    parallel: usize,
) -> Result<(), RunError> {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let first_error: Mutex<Option<RunError>> = Mutex::new(None);
    let store = Mutex::new(store);
    let fail = |e: RunError| {
        abort.store(true, Ordering::SeqCst);
        first_error.lock().unwrap().get_or_insert(e);
    };

    thread::scope(|s| {
        for _ in 0..parallel.clamp(1, pending.len().max(1)) {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = pending.get(i) else { break };
                let resp = match backend.predict(&job.request) {
                    Ok(r) => r,
                    Err(e) => {
                        fail(e.into());
                        break;
                    }
                };
                if let Err(message) = check_response(&job.request, &resp) {
                    fail(RunError::BadResponse {
                        request_id: job.request.request_id.clone(),
                        message,
                    });
                    break;
                }
                if let Err(e) = store.lock().unwrap().insert(&job.digest, &resp) {
                    fail(e.into());
                    break;
                }
            });
        }
    });

    match first_error.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn check_response(req: &PredictRequest, resp: &ModelResponse) -> Result<(), String> {
    if resp.request_id != req.request_id {
        return Err(format!("echoed request id {:?}", resp.request_id));
    }
    resp.validate().map_err(|e| e.to_string())
}

/// Evaluates `manifest` under the configured conditions.
///
/// With a backend, missing responses are fetched and recorded into `store`;
/// without one the run is a pure replay and a missing response is an error.
pub fn run_evaluation(
    manifest: &Manifest,
    plan: Option<&PairPlan>,
    backend: Option<&dyn Backend>,
    store: &mut ResponseStore,
    cfg: &RunConfig,
) -> Result<RunOutcome, RunError> {
    let caps = match backend {
        Some(b) => {
            let caps = b.capabilities()?;
            store.set_capabilities(&caps)?;
            caps
        }
        None => store.capabilities().cloned().ok_or(RunError::NoCapabilities)?,
    };
    if let Some(p) = plan {
        p.check_against(manifest)?;
    }

    let mut requested: Vec<Condition> = cfg.conditions.clone();
    requested.push(Condition::NoShift);
    requested.sort();
    requested.dedup();

    let mut skipped = Vec::new();
    let mut runnable = Vec::new();
    for &c in &requested {
        match capability_gap(c, &caps) {
            Some(reason) => skipped.push(SkippedCondition { condition: c, reason }),
            None => runnable.push(c),
        }
    }

    let return_attention = cfg.request_attention && caps.supports_attention;
    let mut jobs = Vec::new();
    for &c in &runnable {
        for probe in materialize(manifest, plan, c)? {
            let request = build_request(&probe, cfg, return_attention)?;
            let digest = canonical_hash(&request).map_err(|source| RunError::Request {
                sample_id: probe.sample_id.clone(),
                condition: c,
                source,
            })?;
            jobs.push(Job { probe, request, digest });
        }
    }

    let mut seen = HashSet::new();
    let pending: Vec<&Job> = jobs
        .iter()
        .filter(|j| !store.contains(&j.digest) && seen.insert(j.digest.as_str()))
        .collect();
    if let Some(first) = pending.first() {
        match backend {
            Some(b) => execute(&pending, b, store, cfg.parallel)?,
            None => {
                return Err(StoreError::Miss {
                    digest: first.digest.clone(),
                }
                .into())
            }
        }
    }

    let mut predictions = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let resp = store.get(&job.digest).ok_or_else(|| StoreError::Miss {
            digest: job.digest.clone(),
        })?;
        let logits = &resp.first_token_logits;
        predictions.push(SamplePrediction {
            sample_id: job.probe.sample_id.clone(),
            condition: job.probe.condition,
            label: job.probe.label,
            donor_id: job.probe.donor_id.clone(),
            digest: job.digest.clone(),
            generated_text: resp.generated_text.clone(),
            answer: map_answer(&resp.generated_text, &cfg.patterns),
            first_token: softmax2(logits.yes, logits.no)?,
            attention: resp.attention.clone(),
        });
    }
    predictions.sort_by(|a, b| (a.condition, &a.sample_id).cmp(&(b.condition, &b.sample_id)));

    let report = aggregate(manifest, plan, &caps, &predictions, &runnable, skipped, cfg)?;
    Ok(RunOutcome { report, predictions })
}

fn summarize_attention(preds: &[&SamplePrediction]) -> Option<AttentionSummary> {
    let mut all_rows: Vec<RowShare> = Vec::new();
    let mut text_var = Vec::new();
    let mut image_var = Vec::new();
    let mut n_samples = 0;
    for p in preds {
        let Some(bundle) = &p.attention else { continue };
        if bundle.validate().is_err() {
            continue;
        }
        let shares = modality_shares(bundle);
        if let Ok(s) = stability(&shares) {
            n_samples += 1;
            text_var.push(s.text.variance);
            image_var.push(s.image.variance);
        }
        all_rows.extend(shares);
    }
    let pooled = stability(&all_rows).ok()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(AttentionSummary {
        n_samples,
        pooled,
        mean_within_sample_variance: ModalityPair {
            text: mean(&text_var),
            image: mean(&image_var),
        },
    })
}

fn aggregate(
    manifest: &Manifest,
    plan: Option<&PairPlan>,
    caps: &ModelCapabilities,
    predictions: &[SamplePrediction],
    runnable: &[Condition],
    skipped: Vec<SkippedCondition>,
    cfg: &RunConfig,
) -> Result<RunReport, RunError> {
    let mut records: BTreeMap<Condition, Vec<PredictionRecord>> = BTreeMap::new();
    let mut conditions = BTreeMap::new();
    for &c in runnable {
        let preds: Vec<&SamplePrediction> = predictions.iter().filter(|p| p.condition == c).collect();
        let recs: Vec<PredictionRecord> = preds
            .iter()
            .map(|p| PredictionRecord::new(p.sample_id.clone(), c, p.answer.clone(), p.label))
            .collect();
        let metrics = metric_set(&recs)?;
        let probs: Vec<FirstTokenProb> = preds.iter().map(|p| p.first_token).collect();
        let correct: Vec<bool> = preds.iter().map(|p| p.first_token.predicted == p.label).collect();
        let calibration = ece(&probs, &correct, cfg.bins)?;
        let first: Vec<Label> = probs.iter().map(|p| p.predicted).collect();
        let answers: Vec<NormalizedAnswer> = preds.iter().map(|p| p.answer.clone()).collect();
        let agreement = agreement_rate(&first, &answers)?;
        conditions.insert(
            c,
            ConditionReport {
                metrics,
                calibration,
                agreement,
                first_token_ties: probs.iter().filter(|p| p.p_yes == p.p_no).count() as u64,
                attention: summarize_attention(&preds),
            },
        );
        records.insert(c, recs);
    }

    let mut nfr_results = BTreeMap::new();
    if let Some(base) = records.get(&Condition::NoShift) {
        for (&c, recs) in &records {
            if c != Condition::NoShift {
                nfr_results.insert(c, nfr(base, recs)?);
            }
        }
    }

    Ok(RunReport {
        model_id: caps.model_id.clone(),
        attention_aggregation: caps.attention_aggregation.clone(),
        dataset_name: manifest.dataset_name.clone(),
        template_id: cfg.template.id.clone(),
        seed: plan.map(|p| p.seed),
        recipient_mode: plan.map(|p| p.recipient_mode),
        n_samples: records.get(&Condition::NoShift).map_or(0, Vec::len),
        conditions,
        nfr: nfr_results,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{generate_manifest, MockBackend, OracleKind, OracleSpec, SyntheticManifestSpec};
    use crate::sms::build_pair_plan;

    fn setup(n: usize) -> (tempfile::TempDir, Manifest, PairPlan, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_manifest(&SyntheticManifestSpec { n_per_class: n, seed: 1 }, dir.path()).unwrap();
        let plan = build_pair_plan(&m, 7, RecipientMode::AllSamples).unwrap();
        let cfg = RunConfig {
            image_root: dir.path().to_path_buf(),
            ..Default::default()
        };
        (dir, m, plan, cfg)
    }

    #[test]
    fn text_oracle_in_process() {
        let (_d, m, plan, cfg) = setup(5);
        let backend = MockBackend::new(OracleSpec::new(OracleKind::Text, 0));
        let mut store = ResponseStore::in_memory();
        let out = run_evaluation(&m, Some(&plan), Some(&backend), &mut store, &cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.conditions[&Condition::NoShift].metrics.accuracy, 1.0);
        assert_eq!(r.conditions[&Condition::TextShift].metrics.accuracy, 0.0);
        assert_eq!(r.conditions[&Condition::ImageShift].metrics.accuracy, 1.0);
        assert_eq!(r.nfr[&Condition::TextShift].nfr_paper, 1.0);
        assert_eq!(r.nfr[&Condition::ImageShift].nfr_paper, 0.0);
        assert_eq!(r.n_samples, 10);
        // text_shift(r <- d) and image_shift(d <- r) send the same input
        let unique: HashSet<&str> = out.predictions.iter().map(|p| p.digest.as_str()).collect();
        assert_eq!(out.predictions.len(), 50);
        assert_eq!(backend.calls(), unique.len() as u64);
        assert!(r.conditions[&Condition::NoShift].attention.is_some());

        // second pass is served entirely by the store
        let again = run_evaluation(&m, Some(&plan), Some(&backend), &mut store, &cfg).unwrap();
        assert_eq!(backend.calls(), unique.len() as u64);
        assert_eq!(again.report.to_json(), r.to_json());
    }

    #[test]
    fn no_shift_always_evaluated() {
        let (_d, m, plan, mut cfg) = setup(2);
        cfg.conditions = vec![Condition::TextShift];
        let backend = MockBackend::new(OracleSpec::new(OracleKind::Image, 0));
        let mut store = ResponseStore::in_memory();
        let r = run_evaluation(&m, Some(&plan), Some(&backend), &mut store, &cfg).unwrap().report;
        let keys: Vec<_> = r.conditions.keys().copied().collect();
        assert_eq!(keys, [Condition::NoShift, Condition::TextShift]);
        assert_eq!(r.nfr.len(), 1);
    }

    #[test]
    fn unsupported_condition_is_skipped() {
        let (_d, m, plan, cfg) = setup(2);
        let backend = MockBackend::new(OracleSpec::new(OracleKind::Text, 0).without_text_only());
        let mut store = ResponseStore::in_memory();
        let r = run_evaluation(&m, Some(&plan), Some(&backend), &mut store, &cfg).unwrap().report;
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].condition, Condition::OnlyText);
        assert!(r.skipped[0].reason.starts_with("capability"));
        assert!(!r.conditions.contains_key(&Condition::OnlyText));
        assert_eq!(r.conditions.len(), 4);
    }

    #[test]
    fn replay_without_backend() {
        let (_d, m, plan, cfg) = setup(2);
        let mut store = ResponseStore::in_memory();
        assert!(matches!(
            run_evaluation(&m, Some(&plan), None, &mut store, &cfg),
            Err(RunError::NoCapabilities)
        ));
        let backend = MockBackend::new(OracleSpec::new(OracleKind::Text, 0));
        let live = run_evaluation(&m, Some(&plan), Some(&backend), &mut store, &cfg).unwrap();
        let replayed = run_evaluation(&m, Some(&plan), None, &mut store, &cfg).unwrap();
        assert_eq!(live.report, replayed.report);

        let mut other = cfg.clone();
        other.template.instruction = "Different {inputs}".into();
        assert!(matches!(
            run_evaluation(&m, Some(&plan), None, &mut store, &other),
            Err(RunError::Store(StoreError::Miss { .. }))
        ));
    }

    #[test]
    fn shift_without_plan_is_an_error() {
        let (_d, m, _plan, cfg) = setup(2);
        let backend = MockBackend::new(OracleSpec::new(OracleKind::Text, 0));
        let mut store = ResponseStore::in_memory();
        assert!(matches!(
            run_evaluation(&m, None, Some(&backend), &mut store, &cfg),
            Err(RunError::Sms(SmsError::PlanRequired(_)))
        ));
    }

    #[test]
    fn uri_image_refs() {
        let root = Path::new("/data");
        assert_eq!(resolve_image("file:///x/y.png", root).unwrap(), PathBuf::from("/x/y.png"));
        assert_eq!(resolve_image("y.png", root).unwrap(), PathBuf::from("/data/y.png"));
        assert!(resolve_image("https://host/y.png", root).is_err());
    }
}
