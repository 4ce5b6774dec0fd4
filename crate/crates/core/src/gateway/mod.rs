//! Scoring-backend contract and the client-side scoring operations.
//!
//! A backend answers four request modes: full response NLL, response NLL
//! conditioned on one context segment, per-segment mean attention, and token
//! counts. All NLLs are natural-log means over response tokens.

pub mod client;
pub mod copylm;
pub mod protocol;
pub mod server;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use client::RemoteBackend;
pub use copylm::{CopyLm, CopyLmParams};
pub use protocol::{
    BackendDescriptor, ErrorBody, ErrorCode, Message, RequestMode, ScoringRequest, ScoringResponse,
};

use crate::corpus::{Sample, TokenCounter};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("backend rejected request `{request_id}` ({code:?}): {message}")]
    Backend {
        request_id: String,
        code: ErrorCode,
        message: String,
    },

    #[error("backend `{0}` does not support attention profiles")]
    Unsupported(String),

    #[error("backend connection closed")]
    Closed,
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Backend { code, .. } => code.is_retryable(),
            _ => false,
        }
    }
}

/// Anything that can answer scoring requests: an in-process mock, a remote
/// process, or a wrapper around either.
pub trait ScoringBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Sends one request. Backend-side failures come back in-band, in
    /// `ScoringResponse::error`; `Err` is reserved for transport failures.
    fn call(&self, request: &ScoringRequest) -> Result<ScoringResponse, GatewayError>;
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for Arc<T> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn call(&self, request: &ScoringRequest) -> Result<ScoringResponse, GatewayError> {
        (**self).call(request)
    }
}

/// Counts requests passing through to the inner backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ScoringBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ScoringBackend> ScoringBackend for CountingBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn call(&self, request: &ScoringRequest) -> Result<ScoringResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.call(request)
    }
}

const MAX_ATTEMPTS: usize = 3;

/// Sends a request, retrying retryable backend errors, and converts an
/// in-band error into `GatewayError::Backend`.
pub fn call_checked(
    backend: &dyn ScoringBackend,
    request: &ScoringRequest,
) -> Result<ScoringResponse, GatewayError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let resp = backend.call(request)?;
        if resp.request_id != request.request_id {
            return Err(GatewayError::Protocol(format!(
                "response id `{}` does not match request `{}`",
                resp.request_id, request.request_id
            )));
        }
        match resp.error {
            None => return Ok(resp),
            Some(err) => {
                let e = GatewayError::Backend {
                    request_id: request.request_id.clone(),
                    code: err.code,
                    message: err.message,
                };
                if !e.is_retryable() || attempt >= MAX_ATTEMPTS {
                    return Err(e);
                }
                log::warn!("retrying `{}` after: {e}", request.request_id);
            }
        }
    }
}

fn request(sample: &Sample, mode: RequestMode) -> ScoringRequest {
    ScoringRequest {
        request_id: format!("{}/{}", sample.id, mode.as_str()),
        mode,
        context: sample.context.clone(),
        instruction: sample.instruction.clone(),
        response: sample.response.clone(),
        segment_length: None,
        segment_index: None,
    }
}

fn checked_nll(resp: &ScoringResponse) -> Result<f64, GatewayError> {
    let nll = resp.mean_response_nll;
    if !nll.is_finite() || nll < 0.0 {
        return Err(GatewayError::Protocol(format!(
            "response `{}` carries invalid mean_response_nll {nll}",
            resp.request_id
        )));
    }
    Ok(nll)
}

/// Mean response NLL conditioned on the whole (already truncated) context and instruction.
pub fn score_full(backend: &dyn ScoringBackend, sample: &Sample) -> Result<f64, GatewayError> {
    let resp = call_checked(backend, &request(sample, RequestMode::FullPpl))?;
    checked_nll(&resp)
}

/// Mean response NLL when only context segment `index` (plus the instruction) is visible.
pub fn score_segment(
    backend: &dyn ScoringBackend,
    sample: &Sample,
    segment_length: usize,
    index: usize,
) -> Result<f64, GatewayError> {
    let mut req = request(sample, RequestMode::SegmentPpl);
    req.request_id = format!("{}/segment_ppl/{segment_length}/{index}", sample.id);
    req.segment_length = Some(segment_length);
    req.segment_index = Some(index);
    let resp = call_checked(backend, &req)?;
    checked_nll(&resp)
}

/// Pre-normalization mean attention per context segment.
pub fn attention_profile(
    backend: &dyn ScoringBackend,
    sample: &Sample,
    segment_length: usize,
) -> Result<Vec<f64>, GatewayError> {
    if !backend.descriptor().supports_attention {
        return Err(GatewayError::Unsupported(backend.descriptor().name.clone()));
    }
    let mut req = request(sample, RequestMode::AttentionProfile);
    req.request_id = format!("{}/attention_profile/{segment_length}", sample.id);
    req.segment_length = Some(segment_length);
    let resp = call_checked(backend, &req)?;
    let means = resp.per_segment_attention.ok_or_else(|| {
        GatewayError::Protocol(format!("response `{}` lacks per_segment_attention", resp.request_id))
    })?;
    let expected = resp.token_count_context.div_ceil(segment_length);
    if means.len() != expected {
        return Err(GatewayError::Protocol(format!(
            "expected {expected} segment means, got {}",
            means.len()
        )));
    }
    if let Some(bad) = means.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(GatewayError::Protocol(format!("invalid attention mean {bad}")));
    }
    Ok(means)
}

/// `(context tokens, response tokens)` in the backend's token space.
pub fn token_counts(backend: &dyn ScoringBackend, sample: &Sample) -> Result<(usize, usize), GatewayError> {
    let resp = call_checked(backend, &request(sample, RequestMode::TokenizeInfo))?;
    Ok((resp.token_count_context, resp.token_count_response))
}

/// Token counting through `tokenize_info`, for truncation planning.
pub struct BackendTokenCounter<'a>(pub &'a dyn ScoringBackend);

impl TokenCounter for BackendTokenCounter<'_> {
    fn count_tokens(&self, text: &str) -> Result<usize, GatewayError> {
        let req = ScoringRequest {
            request_id: "tokenize_info".into(),
            mode: RequestMode::TokenizeInfo,
            context: text.to_string(),
            instruction: String::new(),
            response: String::new(),
            segment_length: None,
            segment_index: None,
        };
        Ok(call_checked(self.0, &req)?.token_count_context)
    }
}
