//! Corpus ingestion, scoring-time truncation and training-set mixing.
//!
//! Corpora are UTF-8 files with one JSON record per line:
//!
//! ```text
//! {"id":"a1","context":"...","instruction":"...","response":"...","meta":{"source":"x"}}
//! ```
//!
//! Multi-turn records may carry `conversations` (a list of `{"from","value"}`
//! turns) instead of `instruction`/`response`; they are flattened so that the
//! final assistant turn becomes the response and every earlier turn is joined
//! into the instruction with its role tag.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Long,
    Short,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub context: String,
    pub instruction: String,
    pub response: String,
    pub kind: SampleKind,
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    /// Stable content digest, used to key cached scores so that an edited
    /// record is never matched against stale values.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for part in [&self.id, &self.context, &self.instruction, &self.response] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    #[serde(default)]
    context: String,
    instruction: Option<String>,
    response: Option<String>,
    conversations: Option<Vec<Turn>>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct Turn {
    #[serde(alias = "role")]
    from: String,
    #[serde(alias = "content")]
    value: String,
}

fn is_assistant(role: &str) -> bool {
    matches!(role, "gpt" | "assistant" | "bot" | "model")
}

/// Flattens a conversation into `(instruction, response)`.
fn flatten_turns(turns: &[Turn]) -> std::result::Result<(String, String), String> {
    let (last, prior) = turns
        .split_last()
        .ok_or_else(|| "empty conversation".to_string())?;
    if !is_assistant(&last.from) {
        return Err(format!("final turn is from `{}`, not an assistant", last.from));
    }
    let instruction = prior
        .iter()
        .map(|t| format!("{}: {}", t.from, t.value))
        .collect::<Vec<_>>()
        .join("\n");
    Ok((instruction, last.value.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// Report malformed lines and keep going.
    #[default]
    Skip,
    /// Abort on the first malformed line.
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipReport {
    pub line: usize,
    pub reason: String,
}

enum LineOutcome {
    Sample(Sample),
    EmptyResponse,
    Malformed(String),
}

fn parse_line(line: &str, kind: SampleKind) -> LineOutcome {
    let raw: RawRecord = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return LineOutcome::Malformed(format!("invalid record: {e}")),
    };
    let id = match raw.id {
        Some(id) if !id.is_empty() => id,
        _ => return LineOutcome::Malformed("missing or empty id".into()),
    };
    let (instruction, response) = match (raw.conversations, raw.instruction, raw.response) {
        (Some(turns), None, None) => match flatten_turns(&turns) {
            Ok(pair) => pair,
            Err(e) => return LineOutcome::Malformed(e),
        },
        (None, instruction, Some(response)) => (instruction.unwrap_or_default(), response),
        (Some(_), _, _) => {
            return LineOutcome::Malformed(
                "record has both conversations and instruction/response".into(),
            )
        }
        (None, _, None) => return LineOutcome::Malformed("missing response".into()),
    };
    if response.trim().is_empty() {
        return LineOutcome::EmptyResponse;
    }
    if kind == SampleKind::Long && raw.context.trim().is_empty() {
        return LineOutcome::Malformed("long sample with empty context".into());
    }
    let meta = raw
        .meta
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => (k, s),
            other => (k, other.to_string()),
        })
        .collect();
    LineOutcome::Sample(Sample {
        id,
        context: raw.context,
        instruction,
        response,
        kind,
        meta,
    })
}

/// Streaming reader over a corpus file. Yields samples in file order.
pub struct CorpusReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    kind: SampleKind,
    strictness: Strictness,
    line_no: usize,
    seen: HashMap<String, usize>,
    skips: Vec<SkipReport>,
    empty_responses: usize,
    done: bool,
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    kind: SampleKind,
    strictness: Strictness,
) -> Result<CorpusReader> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    Ok(CorpusReader {
        path,
        lines: BufReader::new(file).lines(),
        kind,
        strictness,
        line_no: 0,
        seen: HashMap::new(),
        skips: Vec::new(),
        empty_responses: 0,
        done: false,
    })
}

impl CorpusReader {
    pub fn skips(&self) -> &[SkipReport] {
        &self.skips
    }

    pub fn empty_responses(&self) -> usize {
        self.empty_responses
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes the skip report (one `line<TAB>reason` per entry) to `out`.
    pub fn write_skip_log(&self, out: impl AsRef<Path>) -> Result<()> {
        let out = out.as_ref();
        let file = File::create(out).map_err(|e| Error::io(out, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.skips {
            writeln!(w, "{}:{}\t{}", self.path.display(), s.line, s.reason)
                .map_err(|e| Error::io(out, e))?;
        }
        w.flush().map_err(|e| Error::io(out, e))
    }

    /// Drains the reader, returning every sample or the first fatal error.
    pub fn collect_all(&mut self) -> Result<Vec<Sample>> {
        self.by_ref().collect()
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.done = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(&line, self.kind) {
                LineOutcome::Sample(sample) => {
                    if let Some(&first) = self.seen.get(&sample.id) {
                        self.done = true;
                        return Some(Err(Error::DuplicateId {
                            path: self.path.clone(),
                            id: sample.id,
                            first,
                            second: self.line_no,
                        }));
                    }
                    self.seen.insert(sample.id.clone(), self.line_no);
                    return Some(Ok(sample));
                }
                LineOutcome::EmptyResponse => {
                    self.empty_responses += 1;
                    self.skips.push(SkipReport {
                        line: self.line_no,
                        reason: "empty response".into(),
                    });
                }
                LineOutcome::Malformed(message) => {
                    if self.strictness == Strictness::Fail {
                        self.done = true;
                        return Some(Err(Error::Malformed {
                            path: self.path.clone(),
                            line: self.line_no,
                            message,
                        }));
                    }
                    log::warn!("{}:{}: skipped: {}", self.path.display(), self.line_no, message);
                    self.skips.push(SkipReport {
                        line: self.line_no,
                        reason: message,
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenUnit {
    BackendTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub max_tokens: usize,
    pub side: TruncationSide,
    #[serde(default = "default_unit")]
    pub unit: TokenUnit,
}

fn default_unit() -> TokenUnit {
    TokenUnit::BackendTokens
}

impl TruncationPolicy {
    pub const DEFAULT_MAX_TOKENS: usize = 64 * 1024;

    pub fn left(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            side: TruncationSide::Left,
            unit: TokenUnit::BackendTokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("truncation max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self::left(Self::DEFAULT_MAX_TOKENS)
    }
}

/// Token counting in a backend's token space.
pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> std::result::Result<usize, GatewayError>;
}

/// Result of planning a left truncation. Only a byte offset into the context
/// is recorded, so the truncated sample can be rebuilt without re-tokenizing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationOutcome {
    Scoreable {
        context_start: usize,
        context_tokens: usize,
    },
    Unscoreable {
        reason: String,
    },
}

fn word_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if prev_ws && !ws {
            starts.push(i);
        }
        prev_ws = ws;
    }
    starts
}

/// Decides how many leading context tokens to drop so that
/// context + instruction + response fits in `policy.max_tokens`.
///
/// Cuts are made at whitespace boundaries; the longest context suffix whose
/// token count fits the remaining budget is kept.
pub fn plan_truncation(
    sample: &Sample,
    policy: &TruncationPolicy,
    counter: &dyn TokenCounter,
) -> std::result::Result<TruncationOutcome, GatewayError> {
    if policy.side != TruncationSide::Left {
        return Err(GatewayError::Protocol(
            "scoring-time truncation must drop context from the left".into(),
        ));
    }
    let fixed = counter.count_tokens(&sample.instruction)? + counter.count_tokens(&sample.response)?;
    if fixed > policy.max_tokens {
        return Ok(TruncationOutcome::Unscoreable {
            reason: format!(
                "instruction+response use {fixed} tokens, above the {} token limit",
                policy.max_tokens
            ),
        });
    }
    let budget = policy.max_tokens - fixed;
    let total = counter.count_tokens(&sample.context)?;
    let outcome = if total <= budget {
        TruncationOutcome::Scoreable {
            context_start: 0,
            context_tokens: total,
        }
    } else {
        let starts = word_starts(&sample.context);
        // Smallest k in 1..len whose suffix fits; suffix counts are
        // non-increasing in k.
        let (mut lo, mut hi) = (1usize, starts.len());
        let mut best: Option<(usize, usize)> = None;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let n = counter.count_tokens(&sample.context[starts[mid]..])?;
            if n <= budget {
                best = Some((starts[mid], n));
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        match best {
            Some((start, n)) => TruncationOutcome::Scoreable {
                context_start: start,
                context_tokens: n,
            },
            None => TruncationOutcome::Scoreable {
                context_start: sample.context.len(),
                context_tokens: 0,
            },
        }
    };
    if let TruncationOutcome::Scoreable { context_tokens: 0, .. } = outcome {
        if sample.kind == SampleKind::Long {
            return Ok(TruncationOutcome::Unscoreable {
                reason: "no context left after truncation".into(),
            });
        }
    }
    Ok(outcome)
}

/// Rebuilds the truncated sample. Instruction and response are untouched.
pub fn apply_truncation(sample: &Sample, outcome: &TruncationOutcome) -> Option<Sample> {
    match outcome {
        TruncationOutcome::Scoreable { context_start, .. } => {
            let mut out = sample.clone();
            out.context = sample.context.get(*context_start..)?.to_string();
            Some(out)
        }
        TruncationOutcome::Unscoreable { .. } => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truncated {
    Sample(Sample),
    Unscoreable(String),
}

pub fn truncate_for_scoring(
    sample: &Sample,
    policy: &TruncationPolicy,
    counter: &dyn TokenCounter,
) -> std::result::Result<Truncated, GatewayError> {
    let outcome = plan_truncation(sample, policy, counter)?;
    Ok(match (&outcome, apply_truncation(sample, &outcome)) {
        (_, Some(s)) => Truncated::Sample(s),
        (TruncationOutcome::Unscoreable { reason }, None) => Truncated::Unscoreable(reason.clone()),
        (_, None) => Truncated::Unscoreable("truncation offset is not a char boundary".into()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Leading fraction of the selected long samples (rank order) to keep.
    #[serde(default = "one")]
    pub long_ratio: f64,
    pub short_source: Option<PathBuf>,
    /// Leading fraction of the short corpus (file order) to append.
    #[serde(default = "one")]
    pub short_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            long_ratio: 1.0,
            short_source: None,
            short_fraction: 1.0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.long_ratio > 0.0 && self.long_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "long_ratio must be in (0, 1], got {}",
                self.long_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.short_fraction) {
            return Err(Error::Config(format!(
                "short_fraction must be in [0, 1], got {}",
                self.short_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MixSummary {
    pub long: usize,
    pub short: usize,
}

impl MixSummary {
    pub fn total(&self) -> usize {
        self.long + self.short
    }
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    id: &'a str,
    origin: SampleKind,
    context: &'a str,
    instruction: &'a str,
    response: &'a str,
    meta: &'a BTreeMap<String, String>,
}

fn write_training_record(w: &mut impl Write, s: &Sample, out: &Path) -> Result<()> {
    let rec = TrainingRecord {
        id: &s.id,
        origin: s.kind,
        context: &s.context,
        instruction: &s.instruction,
        response: &s.response,
        meta: &s.meta,
    };
    let line = serde_json::to_string(&rec).expect("training record serializes");
    writeln!(w, "{line}").map_err(|e| Error::io(out, e))
}

/// Writes the training set: selected long samples in rank order followed by
/// the leading `short_fraction` of the short corpus in file order.
pub fn mix_training_set(
    selected: &[String],
    long_corpus: &Path,
    spec: &MixSpec,
    strictness: Strictness,
    out: &Path,
) -> Result<MixSummary> {
    spec.validate()?;
    let n_long = crate::ranker::round_half_away(spec.long_ratio * selected.len() as f64);
    let wanted = &selected[..n_long.min(selected.len())];
    let mut index: HashMap<&str, Option<Sample>> =
        wanted.iter().map(|id| (id.as_str(), None)).collect();
    for sample in load_corpus(long_corpus, SampleKind::Long, strictness)? {
        let sample = sample?;
        if let Some(slot) = index.get_mut(sample.id.as_str()) {
            *slot = Some(sample);
        }
    }

    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let mut summary = MixSummary::default();
    for id in wanted {
        let sample = index
            .get_mut(id.as_str())
            .and_then(Option::take)
            .ok_or_else(|| Error::DanglingId(id.clone()))?;
        write_training_record(&mut w, &sample, out)?;
        summary.long += 1;
    }

    if let Some(short_path) = &spec.short_source {
        let mut total = 0usize;
        for sample in load_corpus(short_path, SampleKind::Short, strictness)? {
            sample?;
            total += 1;
        }
        let take = (spec.short_fraction * total as f64).floor() as usize;
        for sample in load_corpus(short_path, SampleKind::Short, strictness)?.take(take) {
            write_training_record(&mut w, &sample?, out)?;
            summary.short += 1;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(summary)
}
