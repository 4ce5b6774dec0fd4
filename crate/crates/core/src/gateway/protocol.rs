//! Newline-delimited JSON wire format spoken between the pipeline and a
//! scoring backend. One message per line; a backend first announces itself
//! with a `descriptor` message and then answers `request`s with `response`s.
//! Unknown fields are ignored on decode.

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub context_window: usize,
    pub supports_attention: bool,
    pub tokenizer_fingerprint: String,
}

impl BackendDescriptor {
    /// Two backends can be compared by perplexity only if they tokenize identically.
    pub fn homologous_with(&self, other: &BackendDescriptor) -> bool {
        self.tokenizer_fingerprint == other.tokenizer_fingerprint
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    FullPpl,
    SegmentPpl,
    AttentionProfile,
    TokenizeInfo,
}

impl RequestMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestMode::FullPpl => "full_ppl",
            RequestMode::SegmentPpl => "segment_ppl",
            RequestMode::AttentionProfile => "attention_profile",
            RequestMode::TokenizeInfo => "tokenize_info",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub request_id: String,
    pub mode: RequestMode,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_index: Option<usize>,
}

impl ScoringRequest {
    /// Checks the mode-specific required fields.
    pub fn validate(&self) -> Result<(), String> {
        let needs_length = matches!(self.mode, RequestMode::SegmentPpl | RequestMode::AttentionProfile);
        if needs_length {
            match self.segment_length {
                Some(0) => return Err("segment_length must be positive".into()),
                None => return Err(format!("{} requires segment_length", self.mode.as_str())),
                Some(_) => {}
            }
        }
        if self.mode == RequestMode::SegmentPpl && self.segment_index.is_none() {
            return Err("segment_ppl requires segment_index".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    InvalidSegment,
    Unsupported,
    ContextOverflow,
    Overloaded,
    Internal,
    #[serde(other)]
    Unknown,
}

impl ErrorCode {
    pub fn is_retryable(self) -> bool {
        matches!(self, ErrorCode::Overloaded | ErrorCode::Internal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringResponse {
    pub request_id: String,
    #[serde(default)]
    pub token_count_context: usize,
    #[serde(default)]
    pub token_count_response: usize,
    #[serde(default)]
    pub mean_response_nll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_segment_attention: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl ScoringResponse {
    pub fn error(request_id: impl Into<String>, code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            request_id: request_id.into(),
            token_count_context: 0,
            token_count_response: 0,
            mean_response_nll: 0.0,
            per_segment_attention: None,
            error: Some(ErrorBody {
                code,
                message: message.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Descriptor(BackendDescriptor),
    Request(ScoringRequest),
    Response(ScoringResponse),
}

/// Encodes one message as a single line, including the trailing `\n`.
pub fn encode(msg: &Message) -> String {
    let mut line = serde_json::to_string(msg).expect("protocol messages always serialize");
    line.push('\n');
    line
}

pub fn decode(line: &str) -> Result<Message, GatewayError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    serde_json::from_str(line).map_err(|e| GatewayError::Protocol(format!("undecodable message: {e}")))
}

/// Best-effort recovery of `request_id` from a line that failed to decode,
/// so the error response can still be matched by the caller.
pub fn salvage_request_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line.trim_end())
        .ok()
        .and_then(|v| v.get("request_id").and_then(|id| id.as_str()).map(str::to_string))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let mut r = ScoringRequest {
            request_id: "r".into(),
            mode: RequestMode::SegmentPpl,
            context: String::new(),
            instruction: String::new(),
            response: "1".into(),
            segment_length: Some(4),
            segment_index: None,
        };
        assert!(r.validate().is_err());
        r.segment_index = Some(0);
        assert!(r.validate().is_ok());
        r.segment_length = Some(0);
        assert!(r.validate().is_err());
        r.mode = RequestMode::FullPpl;
        r.segment_length = None;
        assert!(r.validate().is_ok());
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let line = r#"{"type":"request","request_id":"x","mode":"full_ppl","response":"1","extra":42}"#;
        match decode(line).unwrap() {
            Message::Request(r) => assert_eq!(r.request_id, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn salvage_recovers_id() {
        assert_eq!(salvage_request_id(r#"{"request_id":"abc","mode":"nope"}"#), "abc");
        assert_eq!(salvage_request_id("garbage"), "");
    }
}
