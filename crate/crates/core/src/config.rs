//! Declarative run configuration (TOML).
//!
//! ```toml
//! mode = "gateau"
//! long_corpus = "long.jsonl"
//! cache = "scores.cache.jsonl"
//! manifest = "manifest.jsonl"
//! alpha = 0.8
//! cut_ratio = 0.1
//!
//! [truncation]
//! max_tokens = 65536
//! side = "left"
//!
//! [backend_a]
//! kind = "tcp"
//! address = "127.0.0.1:7001"
//!
//! [backend_b]
//! kind = "mock"
//! name = "copylm-long"
//! vocab_size = 32
//! copy_bonus = 9.0
//! attention_bonus = 9.0
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::DEFAULT_SEGMENT_LENGTH;
use crate::corpus::{MixSpec, Strictness, TruncationPolicy};
use crate::error::{Error, Result};
use crate::gateway::client::DEFAULT_MAX_IN_FLIGHT;
use crate::gateway::CopyLmParams;
use crate::ranker::{ScoreMode, ALPHA_REAL_WORLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// In-process CopyLM.
    Mock {
        name: String,
        #[serde(default = "default_mock_window")]
        context_window: usize,
        #[serde(flatten)]
        params: CopyLmParams,
    },
    Tcp {
        address: String,
    },
    /// A child process speaking the protocol on stdin/stdout.
    Process {
        command: Vec<String>,
    },
}

fn default_mock_window() -> usize {
    TruncationPolicy::DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: ScoreMode,
    pub long_corpus: PathBuf,
    pub cache: PathBuf,
    pub manifest: PathBuf,
    /// Training-set file written by `emit`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_segment_length")]
    pub segment_length: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_cut_ratio")]
    pub cut_ratio: f64,
    #[serde(default)]
    pub no_norm: bool,
    #[serde(default)]
    pub strictness: Strictness,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub allow_non_homologous: bool,
    #[serde(default)]
    pub truncation: TruncationPolicy,
    #[serde(default)]
    pub backend_a: Option<BackendSpec>,
    #[serde(default)]
    pub backend_b: Option<BackendSpec>,
    #[serde(default)]
    pub mix: MixSpec,
    /// When set, `select` writes every segment profile here.
    #[serde(default)]
    pub dump_profiles: Option<PathBuf>,
}

fn default_segment_length() -> usize {
    DEFAULT_SEGMENT_LENGTH
}
fn default_alpha() -> f64 {
    ALPHA_REAL_WORLD
}
fn default_temperature() -> f64 {
    1.0
}
fn default_cut_ratio() -> f64 {
    0.1
}
fn default_concurrency() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl RunConfig {
    /// A config with defaults for everything but the file locations.
    pub fn new(long_corpus: impl Into<PathBuf>, cache: impl Into<PathBuf>, manifest: impl Into<PathBuf>) -> Self {
        Self {
            mode: ScoreMode::default(),
            long_corpus: long_corpus.into(),
            cache: cache.into(),
            manifest: manifest.into(),
            output: None,
            segment_length: default_segment_length(),
            alpha: default_alpha(),
            temperature: default_temperature(),
            cut_ratio: default_cut_ratio(),
            no_norm: false,
            strictness: Strictness::default(),
            concurrency: default_concurrency(),
            allow_non_homologous: false,
            truncation: TruncationPolicy::default(),
            backend_a: None,
            backend_b: None,
            mix: MixSpec::default(),
            dump_profiles: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.long_corpus);
        fix(&mut self.cache);
        fix(&mut self.manifest);
        if let Some(p) = self.output.as_mut() {
            fix(p);
        }
        if let Some(p) = self.mix.short_source.as_mut() {
            fix(p);
        }
        if let Some(p) = self.dump_profiles.as_mut() {
            fix(p);
        }
    }

    /// Checks ranges and the presence of the backends the mode needs.
    pub fn validate(&self) -> Result<()> {
        if self.segment_length == 0 {
            return Err(Error::Config("segment_length must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.cut_ratio > 0.0 && self.cut_ratio <= 1.0) {
            return Err(Error::Config(format!("cut_ratio must be in (0, 1], got {}", self.cut_ratio)));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be > 0".into()));
        }
        self.truncation.validate()?;
        self.mix.validate()?;
        if self.backend_b.is_none() {
            return Err(Error::Config(format!("mode {:?} requires backend_b", self.mode)));
        }
        if self.mode.needs_hmg() && self.backend_a.is_none() {
            return Err(Error::Config(format!("mode {:?} requires backend_a", self.mode)));
        }
        for spec in [&self.backend_a, &self.backend_b].into_iter().flatten() {
            match spec {
                BackendSpec::Mock { params, context_window, .. } => {
                    params.validate().map_err(Error::Config)?;
                    if *context_window == 0 {
                        return Err(Error::Config("mock context_window must be > 0".into()));
                    }
                }
                BackendSpec::Process { command } if command.is_empty() => {
                    return Err(Error::Config("process backend needs a command".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
mode = "hmg_only"
long_corpus = "long.jsonl"
cache = "/abs/cache.jsonl"
manifest = "m.jsonl"
alpha = 0.7

[truncation]
max_tokens = 100
side = "left"

[backend_a]
kind = "mock"
name = "short"
context_window = 4096
vocab_size = 32
copy_bonus = 9.0
window = 4

[backend_b]
kind = "tcp"
address = "127.0.0.1:1"

[mix]
short_source = "short.jsonl"
short_fraction = 0.1
"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.mode, ScoreMode::HmgOnly);
        assert_eq!(cfg.long_corpus, dir.path().join("long.jsonl"));
        assert_eq!(cfg.cache, PathBuf::from("/abs/cache.jsonl"));
        assert_eq!(cfg.segment_length, 128);
        assert_eq!(cfg.truncation.max_tokens, 100);
        assert_eq!(cfg.mix.short_source, Some(dir.path().join("short.jsonl")));
        match &cfg.backend_a {
            Some(BackendSpec::Mock { params, .. }) => assert_eq!(params.window, Some(4)),
            other => panic!("{other:?}"),
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::new("l", "c", "m");
        assert!(cfg.validate().is_err(), "backends missing");
        cfg.backend_b = Some(BackendSpec::Tcp { address: "x".into() });
        assert!(cfg.validate().is_err(), "gateau needs backend_a");
        cfg.mode = ScoreMode::PplGuidance;
        cfg.validate().unwrap();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.8;
        cfg.cut_ratio = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("long_corpus='a'\ncache='b'\nmanifest='c'\nalhpa=0.5\n");
        assert!(err.is_err());
    }
}
