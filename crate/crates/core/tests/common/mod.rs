//! Shared fixtures for the integration tests: a brute-force CopyLM oracle
//! written directly from the closed forms, and corpus/config builders.

#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use longsel::config::BackendSpec;
use longsel::gateway::CopyLmParams;
use longsel::pipeline::{self, ScoreSummary, SelectOutcome};
use longsel::{RunConfig, ScoreMode};

/// Plain-loop CopyLM. Shares no code with the library implementation.
#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    pub v: u32,
    pub beta: f64,
    pub window: Option<usize>,
    pub gamma: f64,
    pub shift: u32,
}

impl Oracle {
    /// P(tok | prefix), computed by summing the unnormalized weight of every
    /// vocabulary entry.
    pub fn prob(&self, prefix: &[u32], tok: u32) -> f64 {
        let start = match self.window {
            Some(w) if prefix.len() > w => prefix.len() - w,
            _ => 0,
        };
        let visible = &prefix[start..];
        let weight = |v: u32| if visible.contains(&v) { 1.0 + self.beta } else { 1.0 };
        let total: f64 = (0..self.v).map(weight).sum();
        weight(tok) / total
    }

    /// Mean NLL of `response` after `prefix`, teacher forced.
    pub fn mean_nll(&self, prefix: &[u32], response: &[u32]) -> f64 {
        let mut nll = 0.0;
        for j in 0..response.len() {
            let mut p = prefix.to_vec();
            p.extend_from_slice(&response[..j]);
            nll -= self.prob(&p, response[j]).ln();
        }
        nll / response.len() as f64
    }

    pub fn ppl_full(&self, c: &[u32], x: &[u32], y: &[u32]) -> f64 {
        let prefix: Vec<u32> = c.iter().chain(x).copied().collect();
        self.mean_nll(&prefix, y).exp()
    }

    /// Perplexity of `y` when only context segment `i` (of length `l`) is kept.
    pub fn ppl_segment(&self, c: &[u32], x: &[u32], y: &[u32], l: usize, i: usize) -> f64 {
        let seg = &c[i * l..((i + 1) * l).min(c.len())];
        let prefix: Vec<u32> = seg.iter().chain(x).copied().collect();
        self.mean_nll(&prefix, y).exp()
    }

    /// Per-segment mean of response-averaged attention over context positions.
    pub fn attention_means(&self, c: &[u32], y: &[u32], l: usize) -> Vec<f64> {
        let mut per_pos = vec![0.0; c.len()];
        for &yt in y {
            let target = (yt + self.shift) % self.v;
            let w: Vec<f64> = c
                .iter()
                .map(|&t| if t == target { 1.0 + self.gamma } else { 1.0 })
                .collect();
            let z: f64 = w.iter().sum();
            for (acc, wi) in per_pos.iter_mut().zip(&w) {
                *acc += wi / z / y.len() as f64;
            }
        }
        per_pos
            .chunks(l)
            .map(|seg| seg.iter().sum::<f64>() / seg.len() as f64)
            .collect()
    }

    pub fn params(&self) -> CopyLmParams {
        CopyLmParams {
            vocab_size: self.v,
            copy_bonus: self.beta,
            window: self.window,
            attention_bonus: self.gamma,
            attention_shift: self.shift,
        }
    }

    pub fn spec(&self, name: &str, context_window: usize) -> BackendSpec {
        BackendSpec::Mock {
            name: name.into(),
            context_window,
            params: self.params(),
        }
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// IS, Attn and CAS for one sample.
pub fn oracle_cam(o: &Oracle, c: &[u32], x: &[u32], y: &[u32], l: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let n = c.len().div_ceil(l);
    let ppls: Vec<f64> = (0..n).map(|i| o.ppl_segment(c, x, y, l, i)).collect();
    let is = softmax(&ppls);
    let attn = softmax(&o.attention_means(c, y, l));
    let cas = cosine(&is, &attn);
    (is, attn, cas)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn join(toks: &[u32]) -> String {
    toks.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub struct TestSample {
    pub id: String,
    pub context: Vec<u32>,
    pub instruction: Vec<u32>,
    pub response: Vec<u32>,
}

pub fn write_corpus(path: &Path, samples: &[TestSample]) {
    let mut f = std::fs::File::create(path).unwrap();
    for s in samples {
        let line = serde_json::json!({
            "id": s.id,
            "context": join(&s.context),
            "instruction": join(&s.instruction),
            "response": join(&s.response),
        });
        writeln!(f, "{line}").unwrap();
    }
}

pub fn run_config(dir: &Path, mode: ScoreMode, a: Option<BackendSpec>, b: BackendSpec) -> RunConfig {
    let mut cfg = RunConfig::new(dir.join("long.jsonl"), dir.join("cache.jsonl"), dir.join("manifest.jsonl"));
    cfg.mode = mode;
    cfg.backend_a = a;
    cfg.backend_b = Some(b);
    cfg.concurrency = 4;
    cfg
}

/// Connects the configured backends and fills the cache.
pub fn score(cfg: &RunConfig) -> longsel::Result<ScoreSummary> {
    let (a, b) = pipeline::connect_all(cfg)?;
    pipeline::cmd_score(cfg, a.as_deref(), b.as_ref())
}

pub fn score_and_select(cfg: &RunConfig) -> longsel::Result<SelectOutcome> {
    score(cfg)?;
    pipeline::cmd_select(cfg)
}

/// Sample ids in manifest rank order.
pub fn ranking(out: &SelectOutcome) -> Vec<String> {
    out.manifest.records.iter().map(|r| r.sample_id.clone()).collect()
}
