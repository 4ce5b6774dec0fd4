//! Homologous-model guidance: the difference between corpus-normalized
//! response perplexities under a short-window model (A) and a long-window
//! model (B) that share a tokenizer and pre-training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gateway::BackendDescriptor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormError {
    #[error("cannot normalize an empty vector")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("temperature must be finite and > 0, got {0}")]
    Temperature(f64),
}

/// Temperature-scaled softmax, computed in max-shifted form.
pub fn softmax_normalize(values: &[f64], temperature: f64) -> Result<Vec<f64>, NormError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(NormError::Temperature(temperature));
    }
    if values.is_empty() {
        return Err(NormError::Empty);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(NormError::NonFinite(i));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Maps a `NormError` onto the crate error, naming the sample at fault.
pub(crate) fn norm_error(e: NormError, ids: &[&str]) -> Error {
    match e {
        NormError::NonFinite(i) => Error::NonFinite(ids.get(i).copied().unwrap_or("?").to_string()),
        NormError::Empty => Error::Invalid("no scored samples to normalize".into()),
        NormError::Temperature(t) => Error::Config(format!("temperature must be > 0, got {t}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmgConfig {
    pub temperature: f64,
    /// Use raw `ppl_a - ppl_b` instead of the difference of softmaxes.
    pub no_norm: bool,
}

impl Default for HmgConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            no_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityPair {
    pub sample_id: String,
    pub ppl_a: f64,
    pub ppl_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmgRecord {
    pub sample_id: String,
    pub ppl_a: f64,
    pub ppl_b: f64,
    pub norm_a: Option<f64>,
    pub norm_b: Option<f64>,
    pub hmp: f64,
}

/// Verifies that A and B can be compared: shared tokenizer and a strictly
/// shorter window for A. `allow_override` downgrades violations to warnings.
pub fn check_homologous(a: &BackendDescriptor, b: &BackendDescriptor, allow_override: bool) -> Result<()> {
    let mut problems = Vec::new();
    if !a.homologous_with(b) {
        problems.push(format!(
            "tokenizer fingerprints differ (`{}` for {}, `{}` for {})",
            a.tokenizer_fingerprint, a.name, b.tokenizer_fingerprint, b.name
        ));
    }
    if a.context_window >= b.context_window {
        problems.push(format!(
            "backend A ({}) window {} is not shorter than backend B ({}) window {}",
            a.name, a.context_window, b.name, b.context_window
        ));
    }
    if problems.is_empty() {
        return Ok(());
    }
    let msg = problems.join("; ");
    if allow_override {
        log::warn!("proceeding with non-homologous backends: {msg}");
        Ok(())
    } else {
        Err(Error::NotHomologous(msg))
    }
}

/// HMP for every sample; normalization runs over the whole input population.
pub fn compute_hmg(pairs: &[PerplexityPair], config: &HmgConfig) -> Result<Vec<HmgRecord>> {
    let ids: Vec<&str> = pairs.iter().map(|p| p.sample_id.as_str()).collect();
    let a: Vec<f64> = pairs.iter().map(|p| p.ppl_a).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.ppl_b).collect();
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    if config.no_norm {
        if let Some(i) = a.iter().zip(&b).position(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite(ids[i].to_string()));
        }
        return Ok(pairs
            .iter()
            .map(|p| HmgRecord {
                sample_id: p.sample_id.clone(),
                ppl_a: p.ppl_a,
                ppl_b: p.ppl_b,
                norm_a: None,
                norm_b: None,
                hmp: p.ppl_a - p.ppl_b,
            })
            .collect());
    }
    let norm_a = softmax_normalize(&a, config.temperature).map_err(|e| norm_error(e, &ids))?;
    let norm_b = softmax_normalize(&b, config.temperature).map_err(|e| norm_error(e, &ids))?;
    Ok(pairs
        .iter()
        .zip(norm_a.iter().zip(&norm_b))
        .map(|(p, (&na, &nb))| HmgRecord {
            sample_id: p.sample_id.clone(),
            ppl_a: p.ppl_a,
            ppl_b: p.ppl_b,
            norm_a: Some(na),
            norm_b: Some(nb),
            hmp: na - nb,
        })
        .collect())
}

/// Orders by descending value, breaking ties by ascending sample id.
pub fn rank_descending<T>(items: &mut [T], key: impl Fn(&T) -> (f64, &str)) {
    items.sort_by(|x, y| {
        let (vx, ix) = key(x);
        let (vy, iy) = key(y);
        vy.total_cmp(&vx).then_with(|| ix.cmp(iy))
    });
}

/// Perplexity-guidance baseline: rank by B's perplexity alone, highest first.
pub fn compute_ppl_guidance(scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut out = scores.to_vec();
    rank_descending(&mut out, |(id, v)| (*v, id.as_str()));
    out
}
