//! Free-form generation → yes/no verdict.
//!
//! Rules are tried against the whole text; the match that starts earliest
//! wins, ties going to the rule listed first. Matching is case-insensitive.

use std::fmt;
use std::fs;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::manifest::Label;

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("cannot read pattern file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pattern line {line}: expected `<verdict>\\t<pattern>`")]
    Syntax { line: usize },
    #[error("pattern line {line}: unknown verdict {verdict:?} (expected yes|no)")]
    Verdict { line: usize, verdict: String },
    #[error("pattern {pattern:?}: {source}")]
    Regex {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("pattern set is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

impl Verdict {
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Yes => Some(Label::Positive),
            Verdict::No => Some(Label::Negative),
            Verdict::Unparseable => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
            Verdict::Unparseable => "unparseable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub verdict: Verdict,
    /// Character (not byte) offsets `[start, end)` into the generated text.
    pub matched_span: Option<(usize, usize)>,
}

impl NormalizedAnswer {
    pub fn unparseable() -> Self {
        NormalizedAnswer {
            verdict: Verdict::Unparseable,
            matched_span: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatternRule {
    pub source: String,
    pub regex: Regex,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct PatternConfig {
    rules: Vec<PatternRule>,
}

pub const DEFAULT_PATTERNS: &str = "yes\t\\byes\\b\nno\t\\bno\\b\n";

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig::parse(DEFAULT_PATTERNS).expect("default patterns compile")
    }
}

impl PatternConfig {
    pub fn new(rules: Vec<(String, Verdict)>) -> Result<Self, PatternError> {
        if rules.is_empty() {
            return Err(PatternError::Empty);
        }
        let rules = rules
            .into_iter()
            .map(|(source, verdict)| {
                let regex = RegexBuilder::new(&source)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| PatternError::Regex {
                        pattern: source.clone(),
                        source: e,
                    })?;
                Ok(PatternRule {
                    source,
                    regex,
                    verdict,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PatternConfig { rules })
    }

    /// Parses the tab-separated rule format. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(src: &str) -> Result<Self, PatternError> {
        let mut rules = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (verdict, pattern) = line
                .split_once('\t')
                .ok_or(PatternError::Syntax { line: line_no })?;
            let verdict = match verdict.trim().to_ascii_lowercase().as_str() {
                "yes" => Verdict::Yes,
                "no" => Verdict::No,
                other => {
                    return Err(PatternError::Verdict {
                        line: line_no,
                        verdict: other.to_string(),
                    })
                }
            };
            if pattern.is_empty() {
                return Err(PatternError::Syntax { line: line_no });
            }
            rules.push((pattern.to_string(), verdict));
        }
        PatternConfig::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, PatternError> {
        let src = fs::read_to_string(path).map_err(|source| PatternError::Io {
            path: path.display().to_string(),
            source,
        })?;
        PatternConfig::parse(&src)
    }

    pub fn rules(&self) -> &[PatternRule] {
        &self.rules
    }
}

pub fn map_answer(generated_text: &str, cfg: &PatternConfig) -> NormalizedAnswer {
    let mut best: Option<(usize, usize, Verdict)> = None;
    for rule in &cfg.rules {
        if let Some(m) = rule.regex.find(generated_text) {
            // strict `<` keeps the earlier rule on equal starts
            if best.is_none_or(|(start, _, _)| m.start() < start) {
                best = Some((m.start(), m.end(), rule.verdict));
            }
        }
    }
    match best {
        None => NormalizedAnswer::unparseable(),
        Some((start, end, verdict)) => {
            let char_start = generated_text[..start].chars().count();
            let char_len = generated_text[start..end].chars().count();
            NormalizedAnswer {
                verdict,
                matched_span: Some((char_start, char_start + char_len)),
            }
        }
    }
}
