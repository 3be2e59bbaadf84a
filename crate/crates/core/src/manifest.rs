//! Evaluation dataset: ordered `(image, text, label)` records loaded from JSONL.
//!
//! Each non-blank line is one JSON object with `id`, `image_ref`, `text`,
//! `label` (0 or 1) and an optional string map `meta`. Any other field is
//! kept in `meta` (non-string values as their JSON text). An optional first
//! line `{"manifest": {...}}` carries dataset-level settings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("line {line}: label must be 0 or 1, got {value}")]
    LabelDomain { line: usize, value: String },
    #[error("line {line}: empty id")]
    EmptyId { line: usize },
    #[error("line {line}: record {id:?} has empty text but the manifest does not allow it")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: record {id:?} has empty image_ref but the manifest does not allow it")]
    EmptyImage { line: usize, id: String },
}

/// Binary ground-truth label. Serialized as the integer 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u64::deserialize(d)?;
        u8::try_from(v)
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: String,
    pub text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub prompt_template_id: String,
    #[serde(default)]
    pub allow_empty_text: bool,
    #[serde(default)]
    pub allow_empty_image: bool,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ManifestHeader {
    #[serde(default)]
    dataset_name: Option<String>,
    #[serde(default)]
    prompt_template_id: Option<String>,
    #[serde(default)]
    allow_empty_text: bool,
    #[serde(default)]
    allow_empty_image: bool,
}

pub const DEFAULT_TEMPLATE_ID: &str = "default";

const KNOWN_FIELDS: [&str; 5] = ["id", "image_ref", "text", "label", "meta"];

impl Manifest {
    /// Builds a manifest from in-memory records, enforcing the same
    /// invariants as [`load_manifest`]. Line numbers in errors are 1-based
    /// record positions.
    pub fn from_records(
        dataset_name: impl Into<String>,
        prompt_template_id: impl Into<String>,
        records: Vec<SampleRecord>,
    ) -> Result<Manifest, ManifestError> {
        let m = Manifest {
            dataset_name: dataset_name.into(),
            prompt_template_id: prompt_template_id.into(),
            allow_empty_text: false,
            allow_empty_image: false,
            records,
        };
        let lines: Vec<usize> = (1..=m.records.len()).collect();
        m.check(&lines)?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Id → record lookup table.
    pub fn index(&self) -> HashMap<&str, &SampleRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    fn check(&self, lines: &[usize]) -> Result<(), ManifestError> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (rec, &line) in self.records.iter().zip(lines) {
            if rec.id.is_empty() {
                return Err(ManifestError::EmptyId { line });
            }
            if let Some(&first_line) = seen.get(rec.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    id: rec.id.clone(),
                    line,
                    first_line,
                });
            }
            seen.insert(&rec.id, line);
            if rec.text.is_empty() && !self.allow_empty_text {
                return Err(ManifestError::EmptyText {
                    line,
                    id: rec.id.clone(),
                });
            }
            if rec.image_ref.is_empty() && !self.allow_empty_image {
                return Err(ManifestError::EmptyImage {
                    line,
                    id: rec.id.clone(),
                });
            }
        }
        Ok(())
    }

    /// JSONL encoding: a header line followed by one record per line.
    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            dataset_name: Some(self.dataset_name.clone()),
            prompt_template_id: Some(self.prompt_template_id.clone()),
            allow_empty_text: self.allow_empty_text,
            allow_empty_image: self.allow_empty_image,
        };
        let mut out = String::new();
        out.push_str(&serde_json::json!({ "manifest": header }).to_string());
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let content = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_manifest(&content, &default_name)
}

/// Parses JSONL manifest text. `default_name` is used as the dataset name
/// when no header line provides one.
pub fn parse_manifest(content: &str, default_name: &str) -> Result<Manifest, ManifestError> {
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    let mut lines = Vec::new();

    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(trimmed).map_err(|e| ManifestError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(ManifestError::Malformed {
                line,
                message: "expected a JSON object".into(),
            });
        };
        if records.is_empty() && header.is_none() && obj.len() == 1 && obj.contains_key("manifest") {
            let h = serde_json::from_value(obj["manifest"].clone()).map_err(|e| {
                ManifestError::Malformed {
                    line,
                    message: format!("bad manifest header: {e}"),
                }
            })?;
            header = Some(h);
            continue;
        }
        records.push(parse_record(obj, line)?);
        lines.push(line);
    }

    let header = header.unwrap_or_default();
    let m = Manifest {
        dataset_name: header.dataset_name.unwrap_or_else(|| default_name.to_string()),
        prompt_template_id: header
            .prompt_template_id
            .unwrap_or_else(|| DEFAULT_TEMPLATE_ID.to_string()),
        allow_empty_text: header.allow_empty_text,
        allow_empty_image: header.allow_empty_image,
        records,
    };
    m.check(&lines)?;
    Ok(m)
}

fn parse_record(mut obj: Map<String, Value>, line: usize) -> Result<SampleRecord, ManifestError> {
    let malformed = |message: String| ManifestError::Malformed { line, message };

    let string_field = |obj: &mut Map<String, Value>, key: &str, required: bool| {
        match obj.remove(key) {
            Some(Value::String(s)) => Ok(s),
            Some(Value::Null) | None if !required => Ok(String::new()),
            None => Err(malformed(format!("missing field `{key}`"))),
            Some(other) => Err(malformed(format!("field `{key}` must be a string, got {other}"))),
        }
    };

    let id = string_field(&mut obj, "id", true)?;
    let image_ref = string_field(&mut obj, "image_ref", false)?;
    let text = string_field(&mut obj, "text", false)?;

    let label = match obj.remove("label") {
        None => return Err(malformed("missing field `label`".into())),
        Some(v) => v
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .and_then(Label::from_u8)
            .ok_or(ManifestError::LabelDomain {
                line,
                value: v.to_string(),
            })?,
    };

    let mut meta = BTreeMap::new();
    match obj.remove("meta") {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                match v {
                    Value::String(s) => {
                        meta.insert(k, s);
                    }
                    other => {
                        return Err(malformed(format!("meta value for `{k}` must be a string, got {other}")))
                    }
                }
            }
        }
        Some(other) => return Err(malformed(format!("field `meta` must be an object, got {other}"))),
    }
    for (k, v) in obj {
        debug_assert!(!KNOWN_FIELDS.contains(&k.as_str()));
        let s = match v {
            Value::String(s) => s,
            other => other.to_string(),
        };
        // explicit meta wins over a same-named top-level field
        meta.entry(k).or_insert(s);
    }

    Ok(SampleRecord {
        id,
        image_ref,
        text,
        label,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Defect {
    Empty,
    /// Records of `class` exist but there is no record of the opposite class.
    NoOppositeDonor { class: Label },
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::Empty => write!(f, "empty"),
            Defect::NoOppositeDonor { class } => write!(f, "no-opposite-donor for class {class}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub positives: usize,
    pub negatives: usize,
    pub defects: Vec<Defect>,
}

impl ValidationReport {
    pub fn count(&self, label: Label) -> usize {
        match label {
            Label::Positive => self.positives,
            Label::Negative => self.negatives,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.defects.is_empty()
    }
}

pub fn validate_for_sms(m: &Manifest) -> ValidationReport {
    let positives = m.records.iter().filter(|r| r.label == Label::Positive).count();
    let negatives = m.records.len() - positives;
    let mut defects = Vec::new();
    if m.records.is_empty() {
        defects.push(Defect::Empty);
    } else {
        for class in [Label::Positive, Label::Negative] {
            let own = if class == Label::Positive { positives } else { negatives };
            let other = m.records.len() - own;
            if own > 0 && other == 0 {
                defects.push(Defect::NoOppositeDonor { class });
            }
        }
    }
    ValidationReport {
        positives,
        negatives,
        defects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: u8) -> String {
        format!(r#"{{"id":"{id}","image_ref":"img/{id}.png","text":"note {id}","label":{label}}}"#)
    }

    #[test]
    fn parses_in_file_order() {
        let src = format!("{}\n{}\n", line("a", 1), line("b", 0));
        let m = parse_manifest(&src, "toy").unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(m.records[0].label, Label::Positive);
        assert_eq!(m.dataset_name, "toy");
        assert_eq!(m.prompt_template_id, DEFAULT_TEMPLATE_ID);
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let src = [line("a", 1), line("b", 0), line("a", 0)].join("\n");
        match parse_manifest(&src, "x").unwrap_err() {
            ManifestError::DuplicateId { id, line, first_line } => {
                assert_eq!(id, "a");
                assert_eq!(line, 3);
                assert_eq!(first_line, 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn label_outside_domain() {
        let err = parse_manifest(&line("a", 2), "x").unwrap_err();
        assert!(matches!(err, ManifestError::LabelDomain { line: 1, .. }), "{err}");
        let err = parse_manifest(r#"{"id":"a","image_ref":"i","text":"t","label":"1"}"#, "x").unwrap_err();
        assert!(matches!(err, ManifestError::LabelDomain { .. }));
        let err = parse_manifest(r#"{"id":"a","image_ref":"i","text":"t","label":-1}"#, "x").unwrap_err();
        assert!(matches!(err, ManifestError::LabelDomain { .. }));
    }

    #[test]
    fn malformed_line_reports_number() {
        let src = format!("{}\n\n{{not json\n", line("a", 1));
        let err = parse_manifest(&src, "x").unwrap_err();
        assert!(matches!(err, ManifestError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_fields_go_to_meta() {
        let src = r#"{"id":"a","image_ref":"i","text":"t","label":1,"age":63,"sex":"F","meta":{"race":"x","sex":"M"}}"#;
        let m = parse_manifest(src, "x").unwrap();
        let meta = &m.records[0].meta;
        assert_eq!(meta["age"], "63");
        assert_eq!(meta["race"], "x");
        assert_eq!(meta["sex"], "M");
    }

    #[test]
    fn empty_text_needs_declaration() {
        let src = r#"{"id":"a","image_ref":"i","text":"","label":1}"#;
        assert!(matches!(
            parse_manifest(src, "x").unwrap_err(),
            ManifestError::EmptyText { .. }
        ));
        let declared = format!("{}\n{src}", r#"{"manifest":{"allow_empty_text":true}}"#);
        assert!(parse_manifest(&declared, "x").is_ok());

        let src = r#"{"id":"a","text":"t","label":1}"#;
        assert!(matches!(
            parse_manifest(src, "x").unwrap_err(),
            ManifestError::EmptyImage { .. }
        ));
    }

    #[test]
    fn header_sets_dataset_fields() {
        let src = format!(
            "{}\n{}\n",
            r#"{"manifest":{"dataset_name":"cxr","prompt_template_id":"cxr-v2"}}"#,
            line("a", 1)
        );
        let m = parse_manifest(&src, "ignored").unwrap();
        assert_eq!(m.dataset_name, "cxr");
        assert_eq!(m.prompt_template_id, "cxr-v2");
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let src = [
            line("a", 1),
            r#"{"id":"b","image_ref":"i","text":"t\nwith \"quotes\"","label":0,"age":63}"#.to_string(),
        ]
        .join("\n");
        let m = parse_manifest(&src, "rt").unwrap();
        let again = parse_manifest(&m.to_jsonl(), "other").unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn validation_counts_and_defects() {
        let mk = |labels: &[u8]| {
            let src: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| line(&format!("s{i}"), l))
                .collect();
            parse_manifest(&src.join("\n"), "x").unwrap()
        };
        let r = validate_for_sms(&mk(&[1, 0, 1]));
        assert_eq!((r.positives, r.negatives), (2, 1));
        assert!(r.is_clean());

        let r = validate_for_sms(&mk(&[1, 1]));
        assert_eq!(r.defects, vec![Defect::NoOppositeDonor { class: Label::Positive }]);
        assert_eq!(r.defects[0].to_string(), "no-opposite-donor for class 1");

        let r = validate_for_sms(&mk(&[]));
        assert_eq!(r.defects, vec![Defect::Empty]);
        assert_eq!(r.positives + r.negatives, 0);
    }
}
