//! Python bindings. Structured results cross the boundary as plain Python
//! dicts and lists, converted through JSON.

// pyo3 0.22 macros trip this lint on every PyResult signature
#![allow(clippy::useless_conversion)]

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use sms_probe::attention::{self, AttentionBundle};
use sms_probe::calibration::{self, FirstTokenProb};
use sms_probe::manifest::{self, Label};
use sms_probe::metrics::{self, PredictionRecord};
use sms_probe::normalize::{self, NormalizedAnswer, PatternConfig, Verdict};
use sms_probe::oracles::{self, OracleKind, OracleSpec, SyntheticManifestSpec};
use sms_probe::protocol::{self, ClientConfig, HttpBackend, PredictRequest, ResponseStore};
use sms_probe::report::{self, RunConfig};
use sms_probe::sms::{self, Condition, RecipientMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<PyObject> {
    let s = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import_bound("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = py.import_bound("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(value_err)
}

fn label(v: u8) -> PyResult<Label> {
    Label::from_u8(v).ok_or_else(|| value_err(format!("label must be 0 or 1, got {v}")))
}

fn patterns(src: Option<&str>) -> PyResult<PatternConfig> {
    match src {
        Some(s) => PatternConfig::parse(s).map_err(value_err),
        None => Ok(PatternConfig::default()),
    }
}

#[pyclass(module = "sms_probe_py")]
#[derive(Clone)]
struct Manifest {
    inner: manifest::Manifest,
}

#[pymethods]
impl Manifest {
    #[getter]
    fn dataset_name(&self) -> &str {
        &self.inner.dataset_name
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    fn records(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.inner.records)
    }

    /// Returns `(positives, negatives, defects)`.
    fn validate(&self) -> (usize, usize, Vec<String>) {
        let v = manifest::validate_for_sms(&self.inner);
        (v.positives, v.negatives, v.defects.iter().map(|d| d.to_string()).collect())
    }
}

#[pyclass(module = "sms_probe_py")]
#[derive(Clone)]
struct PairPlan {
    inner: sms::PairPlan,
}

#[pymethods]
impl PairPlan {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn recipient_mode(&self) -> String {
        self.inner.recipient_mode.to_string()
    }

    fn donor_of(&self, recipient: &str) -> Option<String> {
        self.inner.donor_of(recipient).map(str::to_string)
    }

    fn assignments(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.assignments.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.assignments.len()
    }
}

#[pyfunction]
fn load_manifest(path: PathBuf) -> PyResult<Manifest> {
    manifest::load_manifest(&path)
        .map(|inner| Manifest { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (directory, n_per_class, seed=0))]
fn synthetic_manifest(directory: PathBuf, n_per_class: usize, seed: u64) -> PyResult<Manifest> {
    oracles::generate_manifest(&SyntheticManifestSpec { n_per_class, seed }, &directory)
        .map(|inner| Manifest { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (manifest, seed, mode="all"))]
fn build_pair_plan(manifest: &Manifest, seed: u64, mode: &str) -> PyResult<PairPlan> {
    let mode: RecipientMode = mode.parse().map_err(value_err)?;
    sms::build_pair_plan(&manifest.inner, seed, mode)
        .map(|inner| PairPlan { inner })
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (manifest, plan, condition))]
fn materialize(py: Python<'_>, manifest: &Manifest, plan: Option<&PairPlan>, condition: &str) -> PyResult<PyObject> {
    let c: Condition = condition.parse().map_err(value_err)?;
    let probes = sms::materialize(&manifest.inner, plan.map(|p| &p.inner), c).map_err(value_err)?;
    to_py(py, &probes)
}

/// Returns `(verdict, span)` where verdict is "yes", "no" or "unparseable".
#[pyfunction]
#[pyo3(signature = (text, patterns=None))]
fn map_answer(text: &str, patterns: Option<&str>) -> PyResult<(String, Option<(usize, usize)>)> {
    let a = normalize::map_answer(text, &self::patterns(patterns)?);
    Ok((format!("{:?}", a.verdict).to_lowercase(), a.matched_span))
}

#[pyfunction]
fn softmax2(py: Python<'_>, logit_yes: f64, logit_no: f64) -> PyResult<PyObject> {
    to_py(py, &calibration::softmax2(logit_yes, logit_no).map_err(value_err)?)
}

/// ECE of first-token probabilities `p_yes` against labels.
#[pyfunction]
#[pyo3(signature = (p_yes, labels, bins=calibration::DEFAULT_BINS))]
fn ece(py: Python<'_>, p_yes: Vec<f64>, labels: Vec<u8>, bins: usize) -> PyResult<PyObject> {
    if p_yes.len() != labels.len() {
        return Err(value_err("p_yes and labels differ in length"));
    }
    let probs: Vec<FirstTokenProb> = p_yes
        .iter()
        .map(|&p| FirstTokenProb::from_p_yes(p).map_err(value_err))
        .collect::<PyResult<_>>()?;
    let correct: Vec<bool> = probs
        .iter()
        .zip(&labels)
        .map(|(p, &y)| Ok(p.predicted == label(y)?))
        .collect::<PyResult<_>>()?;
    to_py(py, &calibration::ece(&probs, &correct, bins).map_err(value_err)?)
}

fn records(condition: &str, rows: Vec<(String, String, u8)>) -> PyResult<Vec<PredictionRecord>> {
    let c: Condition = condition.parse().map_err(value_err)?;
    rows.into_iter()
        .map(|(id, verdict, y)| {
            let verdict = match verdict.as_str() {
                "yes" => Verdict::Yes,
                "no" => Verdict::No,
                "unparseable" => Verdict::Unparseable,
                other => return Err(value_err(format!("unknown verdict {other:?}"))),
            };
            let answer = NormalizedAnswer {
                verdict,
                matched_span: None,
            };
            Ok(PredictionRecord::new(id, c, answer, label(y)?))
        })
        .collect()
}

/// `rows` are `(sample_id, verdict, label)` tuples.
#[pyfunction]
#[pyo3(signature = (rows, condition="no_shift"))]
fn metric_set(py: Python<'_>, rows: Vec<(String, String, u8)>, condition: &str) -> PyResult<PyObject> {
    to_py(py, &metrics::metric_set(&records(condition, rows)?).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (base, shifted, condition="text_shift"))]
fn nfr(
    py: Python<'_>,
    base: Vec<(String, String, u8)>,
    shifted: Vec<(String, String, u8)>,
    condition: &str,
) -> PyResult<PyObject> {
    let base = records("no_shift", base)?;
    let shifted = records(condition, shifted)?;
    to_py(py, &metrics::nfr(&base, &shifted).map_err(value_err)?)
}

/// Per-token modality shares of an attention bundle given as a dict.
#[pyfunction]
fn modality_shares(py: Python<'_>, bundle: &Bound<'_, PyAny>) -> PyResult<PyObject> {
    let b: AttentionBundle = from_py(py, bundle)?;
    b.validate().map_err(value_err)?;
    to_py(py, &attention::modality_shares(&b))
}

#[pyfunction]
fn stability(py: Python<'_>, bundle: &Bound<'_, PyAny>) -> PyResult<PyObject> {
    let b: AttentionBundle = from_py(py, bundle)?;
    b.validate().map_err(value_err)?;
    let stats = attention::stability(&attention::modality_shares(&b)).map_err(value_err)?;
    to_py(py, &stats)
}

#[pyfunction]
fn canonical_hash(py: Python<'_>, request: &Bound<'_, PyAny>) -> PyResult<String> {
    let r: PredictRequest = from_py(py, request)?;
    protocol::canonical_hash(&r).map_err(value_err)
}

/// Mock inference server on a loopback port.
#[pyclass(module = "sms_probe_py")]
struct MockServer {
    inner: Option<oracles::MockServer>,
}

#[pymethods]
impl MockServer {
    #[new]
    #[pyo3(signature = (oracle="text", seed=0, text_only=true))]
    fn new(oracle: &str, seed: u64, text_only: bool) -> PyResult<Self> {
        let kind: OracleKind = oracle.parse().map_err(value_err)?;
        let mut spec = OracleSpec::new(kind, seed);
        if !text_only {
            spec = spec.without_text_only();
        }
        let server = oracles::MockServer::start(spec, "127.0.0.1:0").map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(MockServer { inner: Some(server) })
    }

    #[getter]
    fn url(&self) -> PyResult<String> {
        self.inner
            .as_ref()
            .map(|s| s.url())
            .ok_or_else(|| PyRuntimeError::new_err("server closed"))
    }

    fn stats(&self, py: Python<'_>) -> PyResult<PyObject> {
        let s = self.inner.as_ref().ok_or_else(|| PyRuntimeError::new_err("server closed"))?;
        to_py(py, &s.stats())
    }

    fn close(&mut self) {
        self.inner.take();
    }
}

/// Runs every condition against `endpoint` and returns the report as a dict.
/// Responses are recorded to `store` when given.
#[pyfunction]
#[pyo3(signature = (manifest, plan, endpoint, image_root, store=None, parallel=4))]
fn run(
    py: Python<'_>,
    manifest: &Manifest,
    plan: &PairPlan,
    endpoint: &str,
    image_root: PathBuf,
    store: Option<PathBuf>,
    parallel: usize,
) -> PyResult<PyObject> {
    let mut store = match store {
        Some(p) => ResponseStore::open(Path::new(&p)).map_err(value_err)?,
        None => ResponseStore::in_memory(),
    };
    let backend = HttpBackend::new(endpoint, ClientConfig::default());
    let cfg = RunConfig {
        image_root,
        parallel,
        ..Default::default()
    };
    let outcome = py
        .allow_threads(|| report::run_evaluation(&manifest.inner, Some(&plan.inner), Some(&backend), &mut store, &cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &outcome.report)
}

#[pymodule]
fn sms_probe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Manifest>()?;
    m.add_class::<PairPlan>()?;
    m.add_class::<MockServer>()?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(build_pair_plan, m)?)?;
    m.add_function(wrap_pyfunction!(materialize, m)?)?;
    m.add_function(wrap_pyfunction!(map_answer, m)?)?;
    m.add_function(wrap_pyfunction!(softmax2, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(metric_set, m)?)?;
    m.add_function(wrap_pyfunction!(nfr, m)?)?;
    m.add_function(wrap_pyfunction!(modality_shares, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
