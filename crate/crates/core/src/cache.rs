//! Append-only score cache.
//!
//! Only raw backend outputs are stored (truncation plans, mean NLLs and
//! pre-normalization attention means), never normalized or combined scores,
//! so selection parameters can change without rescoring. Every line is
//! flushed as it is written; an interrupted run leaves a cache that the next
//! run extends.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, TruncationOutcome, TruncationPolicy};
use crate::error::{Error, Result};
use crate::gateway::{BackendDescriptor, RequestMode};

/// Identifies one cached backend result.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreKey {
    pub sample_id: String,
    pub sample_hash: String,
    /// Backend name; truncation plans are shared by every backend with the
    /// same tokenizer and use `*`.
    pub backend: String,
    pub tokenizer: String,
    pub truncation: TruncationPolicy,
    pub mode: RequestMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_index: Option<usize>,
}

impl ScoreKey {
    fn base(sample: &Sample, backend: &str, tokenizer: &str, truncation: TruncationPolicy, mode: RequestMode) -> Self {
        Self {
            sample_id: sample.id.clone(),
            sample_hash: sample.content_hash(),
            backend: backend.to_string(),
            tokenizer: tokenizer.to_string(),
            truncation,
            mode,
            segment_length: None,
            segment_index: None,
        }
    }

    pub fn truncation(sample: &Sample, tokenizer: &str, policy: TruncationPolicy) -> Self {
        Self::base(sample, "*", tokenizer, policy, RequestMode::TokenizeInfo)
    }

    pub fn full(sample: &Sample, backend: &BackendDescriptor, policy: TruncationPolicy) -> Self {
        Self::base(sample, &backend.name, &backend.tokenizer_fingerprint, policy, RequestMode::FullPpl)
    }

    pub fn segment(
        sample: &Sample,
        backend: &BackendDescriptor,
        policy: TruncationPolicy,
        segment_length: usize,
        index: usize,
    ) -> Self {
        let mut k = Self::base(sample, &backend.name, &backend.tokenizer_fingerprint, policy, RequestMode::SegmentPpl);
        k.segment_length = Some(segment_length);
        k.segment_index = Some(index);
        k
    }

    pub fn attention(sample: &Sample, backend: &BackendDescriptor, policy: TruncationPolicy, segment_length: usize) -> Self {
        let mut k = Self::base(
            sample,
            &backend.name,
            &backend.tokenizer_fingerprint,
            policy,
            RequestMode::AttentionProfile,
        );
        k.segment_length = Some(segment_length);
        k
    }
}

impl fmt::Display for ScoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:{}", self.sample_id, self.backend, self.mode.as_str())?;
        if let Some(l) = self.segment_length {
            write!(f, "/L{l}")?;
        }
        if let Some(i) = self.segment_index {
            write!(f, "/{i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachedValue {
    Truncation(TruncationOutcome),
    MeanNll(f64),
    Attention(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum CacheLine {
    Descriptor { role: String, descriptor: BackendDescriptor },
    Score { key: ScoreKey, value: CachedValue },
}

pub struct ScoreCache {
    path: PathBuf,
    entries: RwLock<HashMap<ScoreKey, CachedValue>>,
    descriptors: RwLock<HashMap<String, BackendDescriptor>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

fn load(path: &Path) -> Result<(HashMap<ScoreKey, CachedValue>, HashMap<String, BackendDescriptor>)> {
    let mut entries = HashMap::new();
    let mut descriptors = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((entries, descriptors)),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CacheLine>(&line) {
            Ok(CacheLine::Descriptor { role, descriptor }) => {
                descriptors.insert(role, descriptor);
            }
            Ok(CacheLine::Score { key, value }) => {
                entries.insert(key, value);
            }
            // A torn final write from an interrupted run.
            Err(e) => log::warn!("{}:{}: ignoring unreadable cache line: {e}", path.display(), i + 1),
        }
    }
    Ok((entries, descriptors))
}

impl ScoreCache {
    /// Loads `path` if it exists and opens it for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (entries, descriptors) = load(&path)?;
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1)).map_err(|e| Error::io(&path, e))?;
            file.read_exact(&mut last).map_err(|e| Error::io(&path, e))?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            descriptors: RwLock::new(descriptors),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    /// Loads `path` without opening it for writing.
    pub fn read_only(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let (entries, descriptors) = load(&path)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            descriptors: RwLock::new(descriptors),
            writer: Mutex::new(None),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &ScoreKey) -> Option<CachedValue> {
        self.entries.read().expect("cache poisoned").get(key).cloned()
    }

    pub fn descriptor(&self, role: &str) -> Option<BackendDescriptor> {
        self.descriptors.read().expect("cache poisoned").get(role).cloned()
    }

    fn append(&self, line: &CacheLine) -> Result<()> {
        let text = serde_json::to_string(line).expect("cache line serializes");
        let mut guard = self.writer.lock().expect("cache writer poisoned");
        let w = guard
            .as_mut()
            .ok_or_else(|| Error::Invalid(format!("{} was opened read-only", self.path.display())))?;
        writeln!(w, "{text}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn insert(&self, key: ScoreKey, value: CachedValue) -> Result<()> {
        self.append(&CacheLine::Score {
            key: key.clone(),
            value: value.clone(),
        })?;
        self.entries.write().expect("cache poisoned").insert(key, value);
        Ok(())
    }

    /// Records the descriptor a role was scored with, if it changed.
    pub fn set_descriptor(&self, role: &str, descriptor: &BackendDescriptor) -> Result<()> {
        if self.descriptor(role).as_ref() == Some(descriptor) {
            return Ok(());
        }
        self.append(&CacheLine::Descriptor {
            role: role.to_string(),
            descriptor: descriptor.clone(),
        })?;
        self.descriptors
            .write()
            .expect("cache poisoned")
            .insert(role.to_string(), descriptor.clone());
        Ok(())
    }
}
