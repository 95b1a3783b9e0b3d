//! Two-file checkpoint container: raw little-endian `f64` payload plus a
//! human-readable manifest.
//!
//! `params.bin` is the concatenation of every tensor's row-major data;
//! `manifest.txt` lists `name rows cols byte_offset` per tensor
//! (tab-separated) after `# meta key=value` lines. Round-trips are
//! bit-exact, which the training pipeline relies on for rerun determinism.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;
use super::NumError;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("checkpoint is missing metadata key `{key}`")]
    MissingMeta { key: String },
    #[error("metadata key `{key}` holds `{value}`, expected {expected}")]
    BadMeta { key: String, value: String, expected: &'static str },
    #[error("payload is {got} bytes, manifest expects {want}")]
    PayloadSize { got: usize, want: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Named tensors plus string metadata, saved to / loaded from a directory.
#[derive(Debug, Clone, Default)]
pub struct Container {
    meta: BTreeMap<String, String>,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a metadata value. Keys must be bare words; values must be
    /// single-line.
    pub fn set_meta(
        &mut self,
        key: impl Into<String>,
        value: impl Into<String>,
    ) -> Result<(), CheckpointError> {
        let key = key.into();
        let value: String = value.into();
        if key.is_empty() || key.contains(|c: char| c.is_whitespace() || c == '=') {
            return Err(CheckpointError::Malformed {
                line: 0,
                detail: format!("metadata key `{key}` must be a bare word without `=`"),
            });
        }
        if value.contains('\n') {
            return Err(CheckpointError::Malformed {
                line: 0,
                detail: format!("metadata value for `{key}` must be single-line"),
            });
        }
        self.meta.insert(key, value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta(key).ok_or_else(|| CheckpointError::MissingMeta { key: key.to_owned() })
    }

    /// Parses a required metadata value, reporting what was expected on
    /// failure.
    pub fn require_meta_parse<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<T, CheckpointError> {
        let raw = self.require_meta(key)?;
        raw.parse().map_err(|_| CheckpointError::BadMeta {
            key: key.to_owned(),
            value: raw.to_owned(),
            expected,
        })
    }

    /// Appends a tensor. Names must be unique bare words.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
    ) -> Result<(), CheckpointError> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(CheckpointError::Malformed {
                line: 0,
                detail: format!("tensor name `{name}` must be a bare word"),
            });
        }
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Malformed {
                line: 0,
                detail: format!("duplicate tensor name `{name}`"),
            });
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensor(name).ok_or_else(|| CheckpointError::MissingTensor { name: name.to_owned() })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `params.bin` and `manifest.txt` into `dir` (created if
    /// needed), replacing any previous checkpoint there.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        let mut payload: Vec<u8> = Vec::new();
        let mut manifest = String::new();
        manifest.push_str(MANIFEST_HEADER);
        manifest.push('\n');
        for (key, value) in &self.meta {
            let _ = writeln!(manifest, "# meta {key}={value}");
        }
        for (name, tensor) in &self.entries {
            let _ = writeln!(manifest, "{name}\t{}\t{}\t{}", tensor.rows(), tensor.cols(), payload.len());
            for v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(PARAMS_FILE), payload)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Container::save`].
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let payload = fs::read(dir.join(PARAMS_FILE))?;

        let mut out = Container::new();
        let mut expected_end = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let line_no = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# meta ") {
                let (key, value) = rest.split_once('=').ok_or_else(|| CheckpointError::Malformed {
                    line: line_no,
                    detail: format!("metadata line without `=`: {rest}"),
                })?;
                out.set_meta(key, value)?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let mut next = |what: &str| {
                fields.next().ok_or_else(|| CheckpointError::Malformed {
                    line: line_no,
                    detail: format!("missing {what}"),
                })
            };
            let name = next("tensor name")?.to_owned();
            let parse = |s: &str, what: &str| {
                s.parse::<usize>().map_err(|_| CheckpointError::Malformed {
                    line: line_no,
                    detail: format!("{what} `{s}` is not a number"),
                })
            };
            let rows = parse(next("row count")?, "row count")?;
            let cols = parse(next("column count")?, "column count")?;
            let offset = parse(next("byte offset")?, "byte offset")?;

            let nbytes = rows * cols * 8;
            let end = offset.checked_add(nbytes).filter(|&e| e <= payload.len()).ok_or(
                CheckpointError::PayloadSize { got: payload.len(), want: offset + nbytes },
            )?;
            let data: Vec<f64> = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunks_exact yields 8 bytes")))
                .collect();
            out.insert(name, Tensor::new(rows, cols, data)?)?;
            expected_end = expected_end.max(end);
        }
        if expected_end != payload.len() {
            return Err(CheckpointError::PayloadSize { got: payload.len(), want: expected_end });
        }
        Ok(out)
    }
}
