//! Contextual awareness: does the long-window model attend to the context
//! segments that actually matter for the response?
//!
//! Importance of a segment is measured by the response perplexity when only
//! that segment (plus the instruction) is visible; the softmax of those
//! perplexities is high for *unimportant* segments. Attention is the softmax
//! of per-segment mean attention from response tokens. The score is the
//! cosine of the two vectors, so attention spent on unimportant segments
//! pushes it up.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::gateway::{self, GatewayError, ScoringBackend};
use crate::hmg::{softmax_normalize, NormError};

pub const DEFAULT_SEGMENT_LENGTH: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub segment_length: usize,
    pub ranges: Vec<Range<usize>>,
}

impl SegmentPlan {
    pub fn n_segments(&self) -> usize {
        self.ranges.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CamError {
    #[error("segment length must be positive")]
    ZeroSegmentLength,
    #[error("context is empty; contextual awareness is undefined")]
    EmptyContext,
    #[error("expected {expected} segment values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Splits `token_count` context tokens into contiguous ranges of
/// `segment_length`; the final range keeps any remainder.
pub fn segment_plan(token_count: usize, segment_length: usize) -> Result<SegmentPlan, CamError> {
    if segment_length == 0 {
        return Err(CamError::ZeroSegmentLength);
    }
    if token_count == 0 {
        return Err(CamError::EmptyContext);
    }
    let ranges = (0..token_count)
        .step_by(segment_length)
        .map(|start| start..(start + segment_length).min(token_count))
        .collect();
    Ok(SegmentPlan {
        segment_length,
        ranges,
    })
}

/// Softmax over per-segment perplexities, given their mean NLLs.
pub fn importance_from_nlls(segment_nlls: &[f64]) -> Result<Vec<f64>, CamError> {
    let ppl: Vec<f64> = segment_nlls.iter().map(|n| n.exp()).collect();
    Ok(softmax_normalize(&ppl, 1.0)?)
}

/// Softmax over per-segment mean attention.
pub fn attention_from_means(means: &[f64]) -> Result<Vec<f64>, CamError> {
    Ok(softmax_normalize(means, 1.0)?)
}

pub fn importance_vector(
    backend: &dyn ScoringBackend,
    sample: &Sample,
    segment_length: usize,
) -> Result<Vec<f64>, CamError> {
    let (n_ctx, _) = gateway::token_counts(backend, sample)?;
    let plan = segment_plan(n_ctx, segment_length)?;
    let nlls = (0..plan.n_segments())
        .map(|i| gateway::score_segment(backend, sample, segment_length, i))
        .collect::<Result<Vec<_>, _>>()?;
    importance_from_nlls(&nlls)
}

pub fn attention_vector(
    backend: &dyn ScoringBackend,
    sample: &Sample,
    segment_length: usize,
) -> Result<Vec<f64>, CamError> {
    let means = gateway::attention_profile(backend, sample, segment_length)?;
    attention_from_means(&means)
}

/// Cosine similarity of two equal-length vectors.
pub fn cas(importance: &[f64], attention: &[f64]) -> f64 {
    assert_eq!(importance.len(), attention.len(), "vectors must have equal length");
    let dot: f64 = importance.iter().zip(attention).map(|(a, b)| a * b).sum();
    let na = importance.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = attention.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(na > 0.0 && nb > 0.0, "cosine of a zero vector");
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProfile {
    pub sample_id: String,
    pub segment_length: usize,
    pub n_segments: usize,
    pub importance: Vec<f64>,
    pub attention: Vec<f64>,
    pub cas: f64,
}

/// Assembles a profile from raw backend outputs (segment NLLs and
/// pre-normalization attention means).
pub fn build_profile(
    sample_id: &str,
    segment_length: usize,
    segment_nlls: &[f64],
    attention_means: &[f64],
) -> Result<SegmentProfile, CamError> {
    if segment_nlls.len() != attention_means.len() {
        return Err(CamError::LengthMismatch {
            expected: segment_nlls.len(),
            got: attention_means.len(),
        });
    }
    let importance = importance_from_nlls(segment_nlls)?;
    let attention = attention_from_means(attention_means)?;
    let score = cas(&importance, &attention);
    Ok(SegmentProfile {
        sample_id: sample_id.to_string(),
        segment_length,
        n_segments: importance.len(),
        importance,
        attention,
        cas: score,
    })
}

/// Scores one (already truncated) sample end to end against a backend.
pub fn profile_sample(
    backend: &dyn ScoringBackend,
    sample: &Sample,
    segment_length: usize,
) -> Result<SegmentProfile, CamError> {
    let (n_ctx, _) = gateway::token_counts(backend, sample)?;
    let plan = segment_plan(n_ctx, segment_length)?;
    let nlls = (0..plan.n_segments())
        .map(|i| gateway::score_segment(backend, sample, segment_length, i))
        .collect::<Result<Vec<_>, _>>()?;
    let means = gateway::attention_profile(backend, sample, segment_length)?;
    if means.len() != plan.n_segments() {
        return Err(CamError::LengthMismatch {
            expected: plan.n_segments(),
            got: means.len(),
        });
    }
    build_profile(&sample.id, segment_length, &nlls, &means)
}
