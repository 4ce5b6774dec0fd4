//! Final scoring, top-ratio selection and the selection manifest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cam::SegmentProfile;
use crate::corpus::TruncationPolicy;
use crate::error::{Error, Result};
use crate::gateway::BackendDescriptor;
use crate::hmg::{norm_error, rank_descending, softmax_normalize, HmgRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Gateau,
    HmgOnly,
    CamOnly,
    PplGuidance,
}

impl ScoreMode {
    pub fn needs_hmg(self) -> bool {
        matches!(self, ScoreMode::Gateau | ScoreMode::HmgOnly)
    }

    pub fn needs_cam(self) -> bool {
        matches!(self, ScoreMode::Gateau | ScoreMode::CamOnly)
    }
}

/// Real-world setting: the full short-instruction corpus is mixed in.
pub const ALPHA_REAL_WORLD: f64 = 0.8;
/// Limited setting: only a small prefix of the short corpus is mixed in.
pub const ALPHA_LIMITED: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalScoreRecord {
    pub rank: usize,
    pub sample_id: String,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub alpha: f64,
    pub hmp: Option<f64>,
    pub cas: Option<f64>,
    pub norm_hmp: Option<f64>,
    pub norm_cas: Option<f64>,
    pub ppl_a: Option<f64>,
    pub ppl_b: Option<f64>,
}

/// Half-away-from-zero rounding to a count.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

fn assign_ranks(mut records: Vec<FinalScoreRecord>) -> Vec<FinalScoreRecord> {
    rank_descending(&mut records, |r| (r.final_score, r.sample_id.as_str()));
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    records
}

/// Combines HMP and CAS into the final score and ranks the samples.
///
/// Both signals are softmax-normalized over the whole population before
/// mixing: `final = alpha * norm_hmp + (1 - alpha) * norm_cas`. In
/// `HmgOnly` mode the final score is `norm_hmp`, in `CamOnly` it is `norm_cas`.
pub fn combine(
    mode: ScoreMode,
    hmg: &[HmgRecord],
    cam: &[SegmentProfile],
    alpha: f64,
    temperature: f64,
) -> Result<Vec<FinalScoreRecord>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let cas_by_id: HashMap<&str, f64> = cam.iter().map(|p| (p.sample_id.as_str(), p.cas)).collect();
    let records: Vec<FinalScoreRecord> = match mode {
        ScoreMode::PplGuidance => {
            return Err(Error::Invalid("use ppl_guidance_records for perplexity guidance".into()))
        }
        ScoreMode::CamOnly => {
            let ids: Vec<&str> = cam.iter().map(|p| p.sample_id.as_str()).collect();
            let raw: Vec<f64> = cam.iter().map(|p| p.cas).collect();
            let norm = softmax_normalize(&raw, temperature).map_err(|e| norm_error(e, &ids))?;
            cam.iter()
                .zip(norm)
                .map(|(p, n)| FinalScoreRecord {
                    rank: 0,
                    sample_id: p.sample_id.clone(),
                    final_score: n,
                    alpha: 0.0,
                    hmp: None,
                    cas: Some(p.cas),
                    norm_hmp: None,
                    norm_cas: Some(n),
                    ppl_a: None,
                    ppl_b: None,
                })
                .collect()
        }
        ScoreMode::HmgOnly | ScoreMode::Gateau => {
            let ids: Vec<&str> = hmg.iter().map(|r| r.sample_id.as_str()).collect();
            let raw: Vec<f64> = hmg.iter().map(|r| r.hmp).collect();
            let norm_hmp = softmax_normalize(&raw, temperature).map_err(|e| norm_error(e, &ids))?;
            let norm_cas = if mode == ScoreMode::Gateau {
                let present = ids.iter().filter(|id| cas_by_id.contains_key(*id)).count();
                if present != ids.len() || cam.len() != ids.len() {
                    return Err(Error::Invalid(format!(
                        "combined mode needs CAS for every sample: {present} of {} have one ({} profiles given)",
                        ids.len(),
                        cam.len()
                    )));
                }
                let cas: Vec<f64> = ids.iter().map(|id| cas_by_id[id]).collect();
                Some(softmax_normalize(&cas, temperature).map_err(|e| norm_error(e, &ids))?)
            } else {
                None
            };
            hmg.iter()
                .enumerate()
                .map(|(i, r)| {
                    let nh = norm_hmp[i];
                    let (alpha, final_score, nc) = match &norm_cas {
                        Some(nc) => (alpha, alpha * nh + (1.0 - alpha) * nc[i], Some(nc[i])),
                        None => (1.0, nh, None),
                    };
                    FinalScoreRecord {
                        rank: 0,
                        sample_id: r.sample_id.clone(),
                        final_score,
                        alpha,
                        hmp: Some(r.hmp),
                        cas: cas_by_id.get(r.sample_id.as_str()).copied().filter(|_| nc.is_some()),
                        norm_hmp: Some(nh),
                        norm_cas: nc,
                        ppl_a: Some(r.ppl_a),
                        ppl_b: Some(r.ppl_b),
                    }
                })
                .collect()
        }
    };
    Ok(assign_ranks(records))
}

/// Perplexity-guidance baseline records: final score is B's raw perplexity.
pub fn ppl_guidance_records(scores: &[(String, f64)]) -> Result<Vec<FinalScoreRecord>> {
    if let Some((id, _)) = scores.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(id.clone()));
    }
    Ok(assign_ranks(
        scores
            .iter()
            .map(|(id, ppl)| FinalScoreRecord {
                rank: 0,
                sample_id: id.clone(),
                final_score: *ppl,
                alpha: 1.0,
                hmp: None,
                cas: None,
                norm_hmp: None,
                norm_cas: None,
                ppl_a: None,
                ppl_b: Some(*ppl),
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

/// Everything that determines a ranking, hashed into the manifest fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub mode: ScoreMode,
    pub backend_a: Option<BackendDescriptor>,
    pub backend_b: Option<BackendDescriptor>,
    pub segment_length: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub no_norm: bool,
    pub truncation: TruncationPolicy,
    pub cut_ratio: f64,
}

impl ManifestConfig {
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionManifest {
    pub fingerprint: String,
    pub config: ManifestConfig,
    pub records: Vec<FinalScoreRecord>,
    pub selected: Vec<String>,
    pub excluded: Vec<Exclusion>,
}

/// Keeps the top `round(cut_ratio * M)` records by final score.
pub fn select(
    records: Vec<FinalScoreRecord>,
    config: ManifestConfig,
    excluded: Vec<Exclusion>,
) -> Result<SelectionManifest> {
    let cut = config.cut_ratio;
    if !(cut > 0.0 && cut <= 1.0) {
        return Err(Error::Config(format!("cut_ratio must be in (0, 1], got {cut}")));
    }
    if records.is_empty() {
        return Err(Error::Invalid("no scored samples to select from".into()));
    }
    let records = assign_ranks(records);
    let k = round_half_away(cut * records.len() as f64).min(records.len());
    let selected = records[..k].iter().map(|r| r.sample_id.clone()).collect();
    let mut excluded = excluded;
    excluded.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(SelectionManifest {
        fingerprint: config.fingerprint(),
        config,
        records,
        selected,
        excluded,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestLine {
    Header {
        fingerprint: String,
        #[serde(flatten)]
        config: ManifestConfig,
        total: usize,
        selected: usize,
        excluded: usize,
    },
    Record {
        selected: bool,
        #[serde(flatten)]
        record: FinalScoreRecord,
    },
    Excluded(Exclusion),
}

impl SelectionManifest {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let header = ManifestLine::Header {
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            total: self.records.len(),
            selected: self.selected.len(),
            excluded: self.excluded.len(),
        };
        let k = self.selected.len();
        let push = |out: &mut String, line: &ManifestLine| {
            out.push_str(&serde_json::to_string(line).expect("manifest serializes"));
            out.push('\n');
        };
        push(&mut out, &header);
        for (i, r) in self.records.iter().enumerate() {
            push(
                &mut out,
                &ManifestLine::Record {
                    selected: i < k,
                    record: r.clone(),
                },
            );
        }
        for e in &self.excluded {
            push(&mut out, &ManifestLine::Excluded(e.clone()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_lines().as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut records = Vec::new();
        let mut selected = Vec::new();
        let mut excluded = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                ManifestLine::Header { fingerprint, config, .. } => header = Some((fingerprint, config)),
                ManifestLine::Record { selected: sel, record } => {
                    if sel {
                        selected.push(record.sample_id.clone());
                    }
                    records.push(record);
                }
                ManifestLine::Excluded(e) => excluded.push(e),
            }
        }
        let (fingerprint, config) = header.ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: "missing manifest header".into(),
        })?;
        Ok(Self {
            fingerprint,
            config,
            records,
            selected,
            excluded,
        })
    }
}

/// Nearest-rank quantile of an ascending-sorted slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

const REPORT_MAX_ROWS: usize = 20;

/// Human-readable summary of a manifest, with optional per-stage timings.
pub fn report(manifest: &SelectionManifest, timings: &[(String, Duration)]) -> String {
    let mut s = String::new();
    let c = &manifest.config;
    let _ = writeln!(s, "selection manifest {}", manifest.fingerprint);
    let _ = writeln!(
        s,
        "mode {:?}  alpha {}  temperature {}  segment_length {}  no_norm {}",
        c.mode, c.alpha, c.temperature, c.segment_length, c.no_norm
    );
    let _ = writeln!(
        s,
        "ranked {}  selected {} (cut_ratio {})  excluded {}",
        manifest.records.len(),
        manifest.selected.len(),
        c.cut_ratio,
        manifest.excluded.len()
    );
    if !manifest.records.is_empty() {
        let mut finals: Vec<f64> = manifest.records.iter().map(|r| r.final_score).collect();
        finals.sort_by(f64::total_cmp);
        let _ = writeln!(s, "\nfinal score quantiles (nearest rank):");
        for (label, q) in [("min", 0.0), ("p10", 0.1), ("p25", 0.25), ("p50", 0.5), ("p75", 0.75), ("p90", 0.9), ("max", 1.0)] {
            let _ = writeln!(s, "  {label:<4} {:.6e}", nearest_rank(&finals, q));
        }
        let _ = writeln!(s, "\nranking:");
        for r in manifest.records.iter().take(REPORT_MAX_ROWS) {
            let mark = if r.rank <= manifest.selected.len() { "*" } else { " " };
            let _ = writeln!(s, "  {mark}{:>6}  {:<24} {:.6e}", r.rank, r.sample_id, r.final_score);
        }
        if manifest.records.len() > REPORT_MAX_ROWS {
            let _ = writeln!(s, "  ... {} more", manifest.records.len() - REPORT_MAX_ROWS);
        }
    }
    if !manifest.excluded.is_empty() {
        let _ = writeln!(s, "\nexcluded:");
        for e in &manifest.excluded {
            let _ = writeln!(s, "  {}: {}", e.sample_id, e.reason);
        }
    }
    if !timings.is_empty() {
        let _ = writeln!(s, "\ntiming:");
        for (stage, d) in timings {
            let _ = writeln!(s, "  {stage:<10} {:.3}s", d.as_secs_f64());
        }
    }
    s
}
