//! Prompt templates.
//!
//! A template is a small TOML file:
//!
//! ```toml
//! id = "binary-finding-v1"
//! instruction = "You are given {inputs}. Does the patient present abnormal findings? Answer Yes or No."
//! inputs_both = "a medical image and its clinical notes"
//! inputs_text_only = "clinical notes"
//! inputs_image_only = "a medical image"
//! meta_line = "{key}: {value}"
//! ```
//!
//! Metadata lines are emitted in key order ahead of the notes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad template: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub instruction: String,
    pub inputs_both: String,
    pub inputs_text_only: String,
    pub inputs_image_only: String,
    #[serde(default = "default_meta_line")]
    pub meta_line: String,
}

fn default_meta_line() -> String {
    "{key}: {value}".to_string()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            id: "default".into(),
            instruction: "You are given {inputs}. Based on this information, does the patient present \
                          the condition of interest? Answer \"Yes\" or \"No\"."
                .into(),
            inputs_both: "a medical image and the associated clinical text".into(),
            inputs_text_only: "the clinical text of a patient".into(),
            inputs_image_only: "a medical image".into(),
            meta_line: default_meta_line(),
        }
    }
}

impl PromptTemplate {
    pub fn parse(src: &str) -> Result<Self, TemplateError> {
        Ok(toml::from_str(src)?)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let src = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn instruction(&self, has_text: bool, has_image: bool) -> String {
        let inputs = match (has_text, has_image) {
            (true, false) => &self.inputs_text_only,
            (false, true) => &self.inputs_image_only,
            _ => &self.inputs_both,
        };
        self.instruction.replace("{inputs}", inputs)
    }

    pub fn text(&self, meta: &BTreeMap<String, String>, notes: &str) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            out.push_str(&self.meta_line.replace("{key}", k).replace("{value}", v));
            out.push('\n');
        }
        out.push_str(notes);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let t = PromptTemplate::parse(
            r#"
id = "glaucoma"
instruction = "Given {inputs}, is there glaucoma?"
inputs_both = "an SLO image and notes"
inputs_text_only = "notes"
inputs_image_only = "an SLO image"
"#,
        )
        .unwrap();
        assert_eq!(t.instruction(true, false), "Given notes, is there glaucoma?");
        assert_eq!(t.instruction(true, true), "Given an SLO image and notes, is there glaucoma?");
        let meta: BTreeMap<_, _> = [("sex".to_string(), "F".to_string()), ("age".to_string(), "63".to_string())].into();
        assert_eq!(t.text(&meta, "cup-disc ratio 0.8"), "age: 63\nsex: F\ncup-disc ratio 0.8");
        assert_eq!(t.text(&BTreeMap::new(), "x"), "x");
    }

    #[test]
    fn missing_field_is_an_error() {
        assert!(PromptTemplate::parse("id = \"x\"").is_err());
    }
}
