//! Stage orchestration: `score` fills the cache from the backends, `select`
//! turns the cache into a ranked manifest, `emit` writes the training set.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use crate::cache::{CachedValue, ScoreCache, ScoreKey};
use crate::cam::{self, SegmentProfile};
use crate::config::{BackendSpec, RunConfig};
use crate::corpus::{
    self, apply_truncation, plan_truncation, MixSummary, Sample, SampleKind, TruncationOutcome, TruncationPolicy,
};
use crate::error::{Error, Result};
use crate::gateway::{self, BackendDescriptor, BackendTokenCounter, CopyLm, RemoteBackend, ScoringBackend};
use crate::hmg::{self, HmgConfig, PerplexityPair};
use crate::ranker::{self, Exclusion, ManifestConfig, ScoreMode, SelectionManifest};

pub const ROLE_A: &str = "a";
pub const ROLE_B: &str = "b";

pub type SharedBackend = Arc<dyn ScoringBackend>;

pub fn connect(spec: &BackendSpec, max_in_flight: usize) -> Result<SharedBackend> {
    Ok(match spec {
        BackendSpec::Mock {
            name,
            context_window,
            params,
        } => Arc::new(CopyLm::new(name.clone(), params.clone(), *context_window).map_err(Error::Config)?),
        BackendSpec::Tcp { address } => Arc::new(RemoteBackend::connect_tcp(address.as_str(), max_in_flight)?),
        BackendSpec::Process { command } => {
            let (program, args) = command.split_first().ok_or_else(|| Error::Config("empty command".into()))?;
            Arc::new(RemoteBackend::spawn(program, args, max_in_flight)?)
        }
    })
}

/// Connects the backends `config.mode` needs.
pub fn connect_all(config: &RunConfig) -> Result<(Option<SharedBackend>, SharedBackend)> {
    config.validate()?;
    let b = connect(config.backend_b.as_ref().expect("validated"), config.concurrency)?;
    let a = if config.mode.needs_hmg() {
        Some(connect(config.backend_a.as_ref().expect("validated"), config.concurrency)?)
    } else {
        None
    };
    Ok((a, b))
}

/// Rejects modes that need attention when backend B cannot provide it.
pub fn check_attention(mode: ScoreMode, b: &BackendDescriptor) -> Result<()> {
    if mode.needs_cam() && !b.supports_attention {
        return Err(Error::Config(format!(
            "mode {mode:?} needs attention profiles, which backend {} does not support",
            b.name
        )));
    }
    Ok(())
}

/// The truncation actually applied: the configured limit, capped by B's window.
pub fn effective_truncation(policy: &TruncationPolicy, b: &BackendDescriptor) -> TruncationPolicy {
    TruncationPolicy {
        max_tokens: policy.max_tokens.min(b.context_window),
        ..*policy
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoreSummary {
    pub samples: usize,
    pub unscoreable: usize,
    pub skipped_lines: usize,
    /// Cache misses that had to be computed by a backend in this run.
    pub computed: usize,
}

struct Scorer<'a> {
    mode: ScoreMode,
    a: Option<&'a dyn ScoringBackend>,
    b: &'a dyn ScoringBackend,
    policy: TruncationPolicy,
    segment_length: usize,
    cache: &'a ScoreCache,
    computed: AtomicUsize,
    unscoreable: AtomicUsize,
}

impl Scorer<'_> {
    fn cached_or<F>(&self, key: ScoreKey, compute: F) -> Result<CachedValue>
    where
        F: FnOnce() -> Result<CachedValue>,
    {
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        let v = compute()?;
        self.cache.insert(key, v.clone())?;
        self.computed.fetch_add(1, Ordering::Relaxed);
        Ok(v)
    }

    fn score_sample(&self, sample: &Sample) -> Result<()> {
        let b_desc = self.b.descriptor();
        let tkey = ScoreKey::truncation(sample, &b_desc.tokenizer_fingerprint, self.policy);
        let outcome = match self.cached_or(tkey, || {
            Ok(CachedValue::Truncation(plan_truncation(
                sample,
                &self.policy,
                &BackendTokenCounter(self.b),
            )?))
        })? {
            CachedValue::Truncation(t) => t,
            other => return Err(Error::Invalid(format!("unexpected cached truncation value {other:?}"))),
        };
        let (truncated, context_tokens) = match (&outcome, apply_truncation(sample, &outcome)) {
            (TruncationOutcome::Scoreable { context_tokens, .. }, Some(t)) => (t, *context_tokens),
            _ => {
                self.unscoreable.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
        };

        let full = |backend: &dyn ScoringBackend| {
            self.cached_or(ScoreKey::full(sample, backend.descriptor(), self.policy), || {
                Ok(CachedValue::MeanNll(gateway::score_full(backend, &truncated)?))
            })
        };
        if self.mode.needs_hmg() {
            full(self.a.expect("backend A connected for HMG"))?;
        }
        if self.mode.needs_hmg() || self.mode == ScoreMode::PplGuidance {
            full(self.b)?;
        }
        if self.mode.needs_cam() {
            let l = self.segment_length;
            let n = cam::segment_plan(context_tokens, l).map_err(|e| Error::Invalid(e.to_string()))?.n_segments();
            for i in 0..n {
                self.cached_or(ScoreKey::segment(sample, b_desc, self.policy, l, i), || {
                    Ok(CachedValue::MeanNll(gateway::score_segment(self.b, &truncated, l, i)?))
                })?;
            }
            self.cached_or(ScoreKey::attention(sample, b_desc, self.policy, l), || {
                Ok(CachedValue::Attention(gateway::attention_profile(self.b, &truncated, l)?))
            })?;
        }
        Ok(())
    }
}

/// Scores every long sample, skipping keys already in the cache.
///
/// Samples are processed by `config.concurrency` workers. On the first error
/// the remaining workers stop; everything scored so far stays cached.
pub fn cmd_score(config: &RunConfig, a: Option<&dyn ScoringBackend>, b: &dyn ScoringBackend) -> Result<ScoreSummary> {
    config.validate()?;
    let mode = config.mode;
    check_attention(mode, b.descriptor())?;
    if mode.needs_hmg() {
        let a = a.ok_or_else(|| Error::Config("backend A is required".into()))?;
        hmg::check_homologous(a.descriptor(), b.descriptor(), config.allow_non_homologous)?;
    }
    let cache = ScoreCache::open(&config.cache)?;
    if let Some(a) = a {
        cache.set_descriptor(ROLE_A, a.descriptor())?;
    }
    cache.set_descriptor(ROLE_B, b.descriptor())?;

    let scorer = Scorer {
        mode,
        a,
        b,
        policy: effective_truncation(&config.truncation, b.descriptor()),
        segment_length: config.segment_length,
        cache: &cache,
        computed: AtomicUsize::new(0),
        unscoreable: AtomicUsize::new(0),
    };
    let mut reader = corpus::load_corpus(&config.long_corpus, SampleKind::Long, config.strictness)?;
    let stop = AtomicBool::new(false);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let (tx, rx) = mpsc::sync_channel::<Sample>(config.concurrency * 2);
    let rx = Mutex::new(rx);
    let mut samples = 0usize;

    std::thread::scope(|scope| {
        for _ in 0..config.concurrency {
            scope.spawn(|| loop {
                let sample = match rx.lock().expect("queue poisoned").recv() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                if stop.load(Ordering::SeqCst) {
                    continue;
                }
                if let Err(e) = scorer.score_sample(&sample) {
                    log::error!("sample {}: {e}", sample.id);
                    stop.store(true, Ordering::SeqCst);
                    first_error.lock().expect("poisoned").get_or_insert(e);
                }
            });
        }
        for sample in reader.by_ref() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match sample {
                Ok(s) => {
                    samples += 1;
                    if tx.send(s).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    first_error.lock().expect("poisoned").get_or_insert(e);
                    break;
                }
            }
        }
        drop(tx);
    });

    if !reader.skips().is_empty() {
        let log_path = sidecar(&config.cache, "skips.log");
        reader.write_skip_log(&log_path)?;
        log::warn!("{} corpus line(s) skipped; see {}", reader.skips().len(), log_path.display());
    }
    if let Some(e) = first_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    let summary = ScoreSummary {
        samples,
        unscoreable: scorer.unscoreable.load(Ordering::Relaxed),
        skipped_lines: reader.skips().len(),
        computed: scorer.computed.load(Ordering::Relaxed),
    };
    log::info!(
        "scored {} samples ({} unscoreable), {} new cache entries",
        summary.samples,
        summary.unscoreable,
        summary.computed
    );
    Ok(summary)
}

fn sidecar(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

#[derive(Debug)]
pub struct SelectOutcome {
    pub manifest: SelectionManifest,
    pub profiles: Vec<SegmentProfile>,
    pub timings: Vec<(String, Duration)>,
}

struct Lookup<'a> {
    cache: &'a ScoreCache,
    missing: Vec<String>,
}

impl Lookup<'_> {
    fn nll(&mut self, key: ScoreKey) -> Option<f64> {
        match self.cache.get(&key) {
            Some(CachedValue::MeanNll(v)) => Some(v),
            _ => {
                self.missing.push(key.to_string());
                None
            }
        }
    }
}

/// Builds the manifest from the cache alone; no backend is contacted.
pub fn cmd_select(config: &RunConfig) -> Result<SelectOutcome> {
    config.validate()?;
    let t0 = Instant::now();
    let cache = ScoreCache::read_only(&config.cache)?;
    let b_desc = cache
        .descriptor(ROLE_B)
        .ok_or_else(|| Error::IncompleteCache(vec!["descriptor for backend b".into()]))?;
    let mode = config.mode;
    check_attention(mode, &b_desc)?;
    let a_desc = if mode.needs_hmg() {
        Some(
            cache
                .descriptor(ROLE_A)
                .ok_or_else(|| Error::IncompleteCache(vec!["descriptor for backend a".into()]))?,
        )
    } else {
        None
    };
    let policy = effective_truncation(&config.truncation, &b_desc);
    let l = config.segment_length;

    let mut lookup = Lookup {
        cache: &cache,
        missing: Vec::new(),
    };
    let mut excluded = Vec::new();
    let mut pairs: Vec<PerplexityPair> = Vec::new();
    let mut guidance: Vec<(String, f64)> = Vec::new();
    let mut raw_cam: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();

    for sample in corpus::load_corpus(&config.long_corpus, SampleKind::Long, config.strictness)? {
        let sample = sample?;
        let tkey = ScoreKey::truncation(&sample, &b_desc.tokenizer_fingerprint, policy);
        let context_tokens = match cache.get(&tkey) {
            Some(CachedValue::Truncation(TruncationOutcome::Scoreable { context_tokens, .. })) => context_tokens,
            Some(CachedValue::Truncation(TruncationOutcome::Unscoreable { reason })) => {
                excluded.push(Exclusion {
                    sample_id: sample.id.clone(),
                    reason,
                });
                continue;
            }
            _ => {
                lookup.missing.push(tkey.to_string());
                continue;
            }
        };
        if mode.needs_hmg() {
            let a = lookup.nll(ScoreKey::full(&sample, a_desc.as_ref().expect("needs A"), policy));
            let b = lookup.nll(ScoreKey::full(&sample, &b_desc, policy));
            if let (Some(a), Some(b)) = (a, b) {
                pairs.push(PerplexityPair {
                    sample_id: sample.id.clone(),
                    ppl_a: a.exp(),
                    ppl_b: b.exp(),
                });
            }
        }
        if mode == ScoreMode::PplGuidance {
            if let Some(b) = lookup.nll(ScoreKey::full(&sample, &b_desc, policy)) {
                guidance.push((sample.id.clone(), b.exp()));
            }
        }
        if mode.needs_cam() {
            let n = context_tokens.div_ceil(l);
            let nlls: Vec<Option<f64>> = (0..n)
                .map(|i| lookup.nll(ScoreKey::segment(&sample, &b_desc, policy, l, i)))
                .collect();
            let akey = ScoreKey::attention(&sample, &b_desc, policy, l);
            let means = match cache.get(&akey) {
                Some(CachedValue::Attention(m)) => Some(m),
                _ => {
                    lookup.missing.push(akey.to_string());
                    None
                }
            };
            if let (Some(nlls), Some(means)) = (nlls.into_iter().collect::<Option<Vec<_>>>(), means) {
                raw_cam.push((sample.id.clone(), nlls, means));
            }
        }
    }
    if !lookup.missing.is_empty() {
        return Err(Error::IncompleteCache(lookup.missing));
    }
    let t_load = t0.elapsed();

    let t1 = Instant::now();
    let hmg_cfg = HmgConfig {
        temperature: config.temperature,
        no_norm: config.no_norm,
    };
    let hmg_records = hmg::compute_hmg(&pairs, &hmg_cfg)?;
    let t_hmg = t1.elapsed();

    let t2 = Instant::now();
    let profiles = raw_cam
        .iter()
        .map(|(id, nlls, means)| {
            cam::build_profile(id, l, nlls, means).map_err(|e| Error::Invalid(format!("sample {id}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let t_cam = t2.elapsed();

    let t3 = Instant::now();
    let records = match mode {
        ScoreMode::PplGuidance => ranker::ppl_guidance_records(&guidance)?,
        m => ranker::combine(m, &hmg_records, &profiles, config.alpha, config.temperature)?,
    };
    let manifest_config = ManifestConfig {
        mode,
        backend_a: a_desc,
        backend_b: Some(b_desc),
        segment_length: l,
        alpha: config.alpha,
        temperature: config.temperature,
        no_norm: config.no_norm,
        truncation: policy,
        cut_ratio: config.cut_ratio,
    };
    let manifest = ranker::select(records, manifest_config, excluded)?;
    manifest.write(&config.manifest)?;
    let t_rank = t3.elapsed();

    if let Some(path) = &config.dump_profiles {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &profiles {
            let line = serde_json::to_string(p).expect("profile serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }

    Ok(SelectOutcome {
        manifest,
        profiles,
        timings: vec![
            ("load".into(), t_load),
            ("hmg".into(), t_hmg),
            ("cam".into(), t_cam),
            ("rank".into(), t_rank),
        ],
    })
}

/// Writes the training set for the manifest at `config.manifest`.
pub fn cmd_emit(config: &RunConfig) -> Result<MixSummary> {
    let out = config
        .output
        .as_ref()
        .ok_or_else(|| Error::Config("`output` is required for emit".into()))?;
    let manifest = SelectionManifest::read(&config.manifest)?;
    corpus::mix_training_set(&manifest.selected, &config.long_corpus, &config.mix, config.strictness, out)
}
