//! CopyLM: a closed-form mock language model used as a deterministic scoring
//! backend.
//!
//! Text is tokenized as whitespace-separated non-negative integers below the
//! vocabulary size. For a prefix, let the window be its last `W` tokens (or
//! the whole prefix when the window is unbounded) and `M` the number of
//! distinct tokens in it. Then
//!
//! ```text
//! P(v | prefix) = (1 + copy_bonus * [v in window]) / (V + copy_bonus * M)
//! ```
//!
//! Mock attention from a response token `y` to a context position holding `t`
//! is `1 + attention_bonus * [t == (y + attention_shift) mod V]`, normalized
//! over the context positions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::protocol::{BackendDescriptor, ErrorCode, RequestMode, ScoringRequest, ScoringResponse};
use super::{GatewayError, ScoringBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyLmParams {
    pub vocab_size: u32,
    pub copy_bonus: f64,
    /// Visible suffix length of the prefix; `None` means unbounded.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub attention_bonus: f64,
    /// Offset added to the response token when choosing which context token
    /// receives the attention bonus. Zero attends to copies of the token itself.
    #[serde(default)]
    pub attention_shift: u32,
}

impl CopyLmParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err("vocab_size must be at least 2".into());
        }
        if !(self.copy_bonus.is_finite() && self.copy_bonus >= 0.0) {
            return Err("copy_bonus must be finite and >= 0".into());
        }
        if !(self.attention_bonus.is_finite() && self.attention_bonus >= 0.0) {
            return Err("attention_bonus must be finite and >= 0".into());
        }
        if self.window == Some(0) {
            return Err("window must be positive".into());
        }
        Ok(())
    }

    pub fn tokenizer_fingerprint(&self) -> String {
        format!("ws-int/v1/V={}", self.vocab_size)
    }
}

pub fn tokenize(text: &str, vocab_size: u32) -> Result<Vec<u32>, String> {
    text.split_whitespace()
        .map(|tok| {
            let id: u32 = tok
                .parse()
                .map_err(|_| format!("token `{tok}` is not a non-negative integer"))?;
            if id >= vocab_size {
                return Err(format!("token {id} is outside the vocabulary of {vocab_size}"));
            }
            Ok(id)
        })
        .collect()
}

/// Sliding window over a token stream with O(1) membership and distinct count.
struct Window {
    limit: Option<usize>,
    buf: std::collections::VecDeque<u32>,
    counts: HashMap<u32, u32>,
}

impl Window {
    fn new(limit: Option<usize>) -> Self {
        Self {
            limit,
            buf: Default::default(),
            counts: HashMap::new(),
        }
    }

    fn push(&mut self, tok: u32) {
        self.buf.push_back(tok);
        *self.counts.entry(tok).or_insert(0) += 1;
        if let Some(limit) = self.limit {
            while self.buf.len() > limit {
                let old = self.buf.pop_front().expect("non-empty");
                let c = self.counts.get_mut(&old).expect("tracked");
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&old);
                }
            }
        }
    }

    fn contains(&self, tok: u32) -> bool {
        self.counts.contains_key(&tok)
    }

    fn distinct(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone)]
pub struct CopyLm {
    params: CopyLmParams,
    descriptor: BackendDescriptor,
}

impl CopyLm {
    pub fn new(name: impl Into<String>, params: CopyLmParams, context_window: usize) -> Result<Self, String> {
        params.validate()?;
        if context_window == 0 {
            return Err("context_window must be positive".into());
        }
        let descriptor = BackendDescriptor {
            name: name.into(),
            context_window,
            supports_attention: true,
            tokenizer_fingerprint: params.tokenizer_fingerprint(),
        };
        Ok(Self { params, descriptor })
    }

    pub fn params(&self) -> &CopyLmParams {
        &self.params
    }

    /// Full next-token distribution after `prefix`, indexed by token id.
    pub fn next_token_distribution(&self, prefix: &[u32]) -> Vec<f64> {
        let mut w = Window::new(self.params.window);
        prefix.iter().for_each(|&t| w.push(t));
        let v = self.params.vocab_size as f64;
        let z = v + self.params.copy_bonus * w.distinct() as f64;
        (0..self.params.vocab_size)
            .map(|tok| {
                let bonus = if w.contains(tok) { self.params.copy_bonus } else { 0.0 };
                (1.0 + bonus) / z
            })
            .collect()
    }

    /// Mean negative log-likelihood of `response` given `prefix`, teacher forced.
    pub fn mean_nll(&self, prefix: &[u32], response: &[u32]) -> f64 {
        assert!(!response.is_empty(), "response must be non-empty");
        let beta = self.params.copy_bonus;
        let v = self.params.vocab_size as f64;
        let mut w = Window::new(self.params.window);
        prefix.iter().for_each(|&t| w.push(t));
        let mut total = 0.0;
        for &y in response {
            let z = v + beta * w.distinct() as f64;
            let num = if w.contains(y) { 1.0 + beta } else { 1.0 };
            total += z.ln() - num.ln();
            w.push(y);
        }
        total / response.len() as f64
    }

    /// Mean attention each context position receives, averaged over response positions.
    pub fn attention_per_position(&self, context: &[u32], response: &[u32]) -> Vec<f64> {
        let n = context.len() as f64;
        let gamma = self.params.attention_bonus;
        let mut occurrences: HashMap<u32, usize> = HashMap::new();
        for &t in context {
            *occurrences.entry(t).or_insert(0) += 1;
        }
        let r = response.len() as f64;
        let mut base = 0.0;
        let mut bonus: HashMap<u32, f64> = HashMap::new();
        for &y in response {
            let target = ((y as u64 + self.params.attention_shift as u64) % self.params.vocab_size as u64) as u32;
            let hits = occurrences.get(&target).copied().unwrap_or(0) as f64;
            let z = n + gamma * hits;
            base += 1.0 / z / r;
            *bonus.entry(target).or_insert(0.0) += gamma / z / r;
        }
        context
            .iter()
            .map(|t| base + bonus.get(t).copied().unwrap_or(0.0))
            .collect()
    }

    fn answer(&self, req: &ScoringRequest) -> Result<ScoringResponse, (ErrorCode, String)> {
        let bad = |m: String| (ErrorCode::BadRequest, m);
        req.validate().map_err(bad)?;
        let vocab = self.params.vocab_size;
        let context = tokenize(&req.context, vocab).map_err(bad)?;
        let instruction = tokenize(&req.instruction, vocab).map_err(bad)?;
        let response = tokenize(&req.response, vocab).map_err(bad)?;
        let mut out = ScoringResponse {
            request_id: req.request_id.clone(),
            token_count_context: context.len(),
            token_count_response: response.len(),
            mean_response_nll: 0.0,
            per_segment_attention: None,
            error: None,
        };
        if req.mode != RequestMode::TokenizeInfo && response.is_empty() {
            return Err(bad("response is empty".into()));
        }
        match req.mode {
            RequestMode::TokenizeInfo => {}
            RequestMode::FullPpl => {
                let prefix: Vec<u32> = context.iter().chain(&instruction).copied().collect();
                out.mean_response_nll = self.mean_nll(&prefix, &response);
            }
            RequestMode::SegmentPpl => {
                let len = req.segment_length.expect("validated");
                let idx = req.segment_index.expect("validated");
                let n_segments = context.len().div_ceil(len);
                if idx >= n_segments {
                    return Err((
                        ErrorCode::InvalidSegment,
                        format!("segment_index {idx} out of range for {n_segments} segments"),
                    ));
                }
                let seg = &context[idx * len..((idx + 1) * len).min(context.len())];
                let prefix: Vec<u32> = seg.iter().chain(&instruction).copied().collect();
                out.mean_response_nll = self.mean_nll(&prefix, &response);
            }
            RequestMode::AttentionProfile => {
                let len = req.segment_length.expect("validated");
                if context.is_empty() {
                    return Err(bad("attention_profile needs a non-empty context".into()));
                }
                let per_pos = self.attention_per_position(&context, &response);
                let means = per_pos
                    .chunks(len)
                    .map(|chunk| chunk.iter().sum::<f64>() / chunk.len() as f64)
                    .collect();
                out.per_segment_attention = Some(means);
            }
        }
        Ok(out)
    }
}

impl ScoringBackend for CopyLm {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn call(&self, request: &ScoringRequest) -> Result<ScoringResponse, GatewayError> {
        Ok(self
            .answer(request)
            .unwrap_or_else(|(code, message)| ScoringResponse::error(&request.request_id, code, message)))
    }
}
