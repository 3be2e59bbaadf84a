//! Append-only JSONL store of responses keyed by canonical request hash.
//!
//! Line kinds:
//! `{"kind":"capabilities","capabilities":{...}}` and
//! `{"kind":"response","hash":"<hex>","response":{...}}`.
//! A torn final line (no trailing newline, unparseable) left by an aborted
//! writer is ignored on open and overwritten by the next append.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{canonical_hash, ModelCapabilities, ModelResponse, PredictRequest, ProtocolError};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store {path}, line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no stored response for request digest {digest}")]
    Miss { digest: String },
    #[error(transparent)]
    Request(#[from] ProtocolError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Capabilities { capabilities: ModelCapabilities },
    Response { hash: String, response: ModelResponse },
}

#[derive(Debug, Default)]
pub struct ResponseStore {
    path: Option<PathBuf>,
    file: Option<File>,
    capabilities: Option<ModelCapabilities>,
    entries: Vec<(String, ModelResponse)>,
    index: HashMap<String, usize>,
}

impl ResponseStore {
    pub fn in_memory() -> Self {
        ResponseStore::default()
    }

    /// Opens (creating if needed) a store file and loads its entries.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let content = match fs::read_to_string(path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let mut store = ResponseStore {
            path: Some(path.to_path_buf()),
            ..Default::default()
        };

        let mut valid_len = 0usize;
        let mut offset = 0usize;
        let line_count = content.split_inclusive('\n').count();
        for (i, raw) in content.split_inclusive('\n').enumerate() {
            offset += raw.len();
            let line = raw.trim();
            if line.is_empty() {
                valid_len = offset;
                continue;
            }
            match serde_json::from_str::<Entry>(line) {
                Ok(entry) => {
                    store.apply(entry);
                    valid_len = offset;
                }
                Err(e) if i + 1 == line_count && !raw.ends_with('\n') => {
                    // torn tail from an interrupted append
                    let _ = e;
                }
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(path)
            .map_err(io)?;
        file.set_len(valid_len as u64).map_err(io)?;
        file.seek(SeekFrom::End(0)).map_err(io)?;
        if valid_len > 0 && !content[..valid_len].ends_with('\n') {
            file.write_all(b"\n").map_err(io)?;
        }
        store.file = Some(file);
        Ok(store)
    }

    fn apply(&mut self, entry: Entry) {
        match entry {
            Entry::Capabilities { capabilities } => self.capabilities = Some(capabilities),
            Entry::Response { hash, response } => {
                if !self.index.contains_key(&hash) {
                    self.index.insert(hash.clone(), self.entries.len());
                    self.entries.push((hash, response));
                }
            }
        }
    }

    fn append(&mut self, entry: &Entry) -> Result<(), StoreError> {
        if let (Some(file), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            let mut line = serde_json::to_string(entry).expect("entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn capabilities(&self) -> Option<&ModelCapabilities> {
        self.capabilities.as_ref()
    }

    /// Records capabilities if they differ from the last recorded ones.
    pub fn set_capabilities(&mut self, caps: &ModelCapabilities) -> Result<(), StoreError> {
        if self.capabilities.as_ref() == Some(caps) {
            return Ok(());
        }
        let entry = Entry::Capabilities {
            capabilities: caps.clone(),
        };
        self.append(&entry)?;
        self.apply(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ModelResponse)> {
        self.entries.iter().map(|(h, r)| (h.as_str(), r))
    }

    pub fn get(&self, digest: &str) -> Option<&ModelResponse> {
        self.index.get(digest).map(|&i| &self.entries[i].1)
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.index.contains_key(digest)
    }

    /// Stores `resp` under `digest`. An existing entry wins; returns whether
    /// anything was written.
    pub fn insert(&mut self, digest: &str, resp: &ModelResponse) -> Result<bool, StoreError> {
        if self.contains(digest) {
            return Ok(false);
        }
        let entry = Entry::Response {
            hash: digest.to_string(),
            response: resp.clone(),
        };
        self.append(&entry)?;
        self.apply(entry);
        Ok(true)
    }

    pub fn record(&mut self, req: &PredictRequest, resp: &ModelResponse) -> Result<bool, StoreError> {
        let digest = canonical_hash(req)?;
        self.insert(&digest, resp)
    }

    pub fn replay(&self, req: &PredictRequest) -> Result<ModelResponse, StoreError> {
        let digest = canonical_hash(req)?;
        self.get(&digest).cloned().ok_or(StoreError::Miss { digest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::FirstTokenLogits;

    fn req(text: &str) -> PredictRequest {
        PredictRequest::new(format!("id-{text}"), "instr", Some(text.into()), None)
    }

    fn resp(id: &str, yes: f64) -> ModelResponse {
        ModelResponse {
            request_id: id.into(),
            generated_text: "Yes.".into(),
            first_token_logits: FirstTokenLogits { yes, no: 0.1 },
            attention: None,
        }
    }

    #[test]
    fn record_then_replay() {
        let mut s = ResponseStore::in_memory();
        let r = req("a");
        let x = resp("id-a", 0.1 + 0.2);
        assert!(s.record(&r, &x).unwrap());
        assert_eq!(s.replay(&r).unwrap(), x);
        assert!(!s.record(&r, &resp("id-a", 9.0)).unwrap());
        assert_eq!(s.replay(&r).unwrap(), x);
    }

    #[test]
    fn replay_after_edit_misses_with_digest() {
        let mut s = ResponseStore::in_memory();
        s.record(&req("a"), &resp("id-a", 1.0)).unwrap();
        let edited = req("b");
        match s.replay(&edited).unwrap_err() {
            StoreError::Miss { digest } => assert_eq!(digest, canonical_hash(&edited).unwrap()),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn file_round_trip_preserves_order_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let caps = ModelCapabilities {
            model_id: "m".into(),
            supports_text_only: true,
            supports_image_only: false,
            supports_attention: false,
            attention_aggregation: "none".into(),
        };
        {
            let mut s = ResponseStore::open(&path).unwrap();
            s.set_capabilities(&caps).unwrap();
            s.record(&req("b"), &resp("id-b", 2.0 / 3.0)).unwrap();
            s.record(&req("a"), &resp("id-a", 1e-17)).unwrap();
        }
        let s = ResponseStore::open(&path).unwrap();
        assert_eq!(s.capabilities(), Some(&caps));
        let got: Vec<_> = s.iter().map(|(_, r)| r.clone()).collect();
        assert_eq!(got, vec![resp("id-b", 2.0 / 3.0), resp("id-a", 1e-17)]);
    }

    #[test]
    fn torn_tail_is_dropped_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let mut s = ResponseStore::open(&path).unwrap();
            s.record(&req("a"), &resp("id-a", 1.0)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"kind":"response","hash":"ab"#).unwrap();
        drop(f);

        let mut s = ResponseStore::open(&path).unwrap();
        assert_eq!(s.len(), 1);
        s.record(&req("b"), &resp("id-b", 1.0)).unwrap();
        drop(s);
        let s = ResponseStore::open(&path).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(ResponseStore::open(&path), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
