//! Orchestration: cached, retried, bounded-parallel execution of the three
//! stages over a dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, InteractionRecord, MpRatios, Problem};

use super::cache::{write_atomic, CompletionCache};
use super::client::{ChatClient, ChatParams};
use super::parse::{parse_indicators, parse_responses, parse_verdicts, Parsed};
use super::prompts::{render_eval_prompt, render_indicator_prompt, render_student_prompt};
use super::ratios::compute_mp_ratios;
use super::{IndicatorSet, PipelineError, ResponseSet, Verdicts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Indicators,
    Student,
    Evaluation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Indicators => "indicators",
            Stage::Student => "student",
            Stage::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub cache_dir: PathBuf,
    /// Maximum number of in-flight client calls.
    pub concurrency: usize,
    pub params: ChatParams,
    /// Sleep before retry `k` is `backoff_base * 2^k`.
    pub backoff_base: Duration,
    /// Re-attempt interactions whose audit record says they failed.
    pub retry_failed: bool,
}

impl PipelineOptions {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            cache_dir: cache_dir.into(),
            concurrency: 4,
            params: ChatParams::default(),
            backoff_base: Duration::from_millis(500),
            retry_failed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Ok,
    Failed,
}

/// Everything produced for one interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub key: String,
    pub problem_id: String,
    pub student_id: String,
    /// Interaction timestamp (ms since epoch).
    pub timestamp: i64,
    pub status: AuditStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub indicators: Option<IndicatorSet>,
    pub responses: Option<ResponseSet>,
    pub verdicts: Option<Verdicts>,
    pub ratios: MpRatios,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Wall-clock seconds since epoch when the record was written.
    pub processed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedInteraction {
    pub key: String,
    pub student_id: String,
    pub problem_id: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub interactions: usize,
    pub annotated: usize,
    pub failed: usize,
    pub failure_rate: f64,
    pub client_calls: usize,
    pub cache_hits: usize,
    pub reused_audits: usize,
    pub warnings: usize,
    pub flagged: Vec<FlaggedInteraction>,
}

/// Stable identifier of an interaction, independent of dataset order.
pub fn interaction_key(r: &InteractionRecord) -> String {
    let mut h = Sha256::new();
    for part in [
        r.student_id.as_bytes(),
        r.problem_id.as_bytes(),
        &r.timestamp.to_le_bytes(),
        r.selected_answer.as_bytes(),
        r.process_text.as_bytes(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(&h.finalize()[..16])
}

fn audit_path(cache_dir: &Path, key: &str) -> PathBuf {
    cache_dir.join("audit").join(format!("{key}.json"))
}

pub fn load_audit(cache_dir: &Path, key: &str) -> Option<AuditRecord> {
    let text = std::fs::read_to_string(audit_path(cache_dir, key)).ok()?;
    serde_json::from_str(&text).ok()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Runner<'a, C: ChatClient + ?Sized> {
    client: &'a C,
    cache: CompletionCache,
    opts: &'a PipelineOptions,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl<C: ChatClient + ?Sized> Runner<'_, C> {
    /// Cached call plus parse, retried on transport and parse failures.
    fn stage<T>(
        &self,
        stage: Stage,
        prompt: &str,
        parse: impl Fn(&str) -> Result<Parsed<T>, PipelineError>,
    ) -> Result<Parsed<T>, PipelineError> {
        if let Some(raw) = self.cache.get(stage.name(), prompt)? {
            match parse(&raw) {
                Ok(p) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(p);
                }
                Err(e) => log::warn!("ignoring unparsable cached {} completion: {e}", stage.name()),
            }
        }
        let attempts = self.opts.params.max_retries.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.opts.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            let err = match self.client.complete("", prompt, &self.opts.params) {
                Ok(raw) => match parse(&raw) {
                    Ok(p) => {
                        self.cache.put(stage.name(), prompt, &raw)?;
                        return Ok(p);
                    }
                    Err(e) => e,
                },
                Err(e) => {
                    let retry = e.is_retryable();
                    let e = PipelineError::Client(e);
                    if !retry {
                        return Err(e);
                    }
                    e
                }
            };
            log::warn!("{} stage attempt {} of {attempts} failed: {err}", stage.name(), attempt + 1);
            last = Some(err);
        }
        Err(last.expect("at least one attempt"))
    }

    fn interaction(
        &self,
        problem: &Problem,
        rubric: &Result<Parsed<IndicatorSet>, String>,
        r: &InteractionRecord,
        key: String,
    ) -> Result<AuditRecord, PipelineError> {
        let mut audit = AuditRecord {
            key,
            problem_id: r.problem_id.clone(),
            student_id: r.student_id.clone(),
            timestamp: r.timestamp,
            status: AuditStatus::Failed,
            failed_stage: None,
            error: None,
            indicators: None,
            responses: None,
            verdicts: None,
            ratios: MpRatios::absent(),
            warnings: Vec::new(),
            processed_at: now_secs(),
        };
        let fail = |mut audit: AuditRecord, stage: Stage, e: String| {
            audit.failed_stage = Some(stage);
            audit.error = Some(e);
            audit
        };
        let rubric = match rubric {
            Ok(p) => p,
            Err(e) => return Ok(fail(audit, Stage::Indicators, e.clone())),
        };
        audit.indicators = Some(rubric.value.clone());
        audit.warnings.extend(rubric.warnings.iter().cloned());
        let set = &rubric.value;

        let prompt = render_student_prompt(problem, set, &r.process_text, &r.selected_answer);
        let responses = match self.stage(Stage::Student, &prompt, |raw| parse_responses(raw, set)) {
            Ok(p) => p,
            Err(e @ PipelineError::Cache { .. }) => return Err(e),
            Err(e) => return Ok(fail(audit, Stage::Student, e.to_string())),
        };
        audit.warnings.extend(responses.warnings);
        let prompt = render_eval_prompt(problem, set, &responses.value);
        audit.responses = Some(responses.value);

        let verdicts = match self.stage(Stage::Evaluation, &prompt, |raw| parse_verdicts(raw, set)) {
            Ok(p) => p,
            Err(e @ PipelineError::Cache { .. }) => return Err(e),
            Err(e) => return Ok(fail(audit, Stage::Evaluation, e.to_string())),
        };
        audit.warnings.extend(verdicts.warnings);
        audit.ratios = compute_mp_ratios(set, &verdicts.value);
        audit.verdicts = Some(verdicts.value);
        audit.status = AuditStatus::Ok;
        Ok(audit)
    }
}

/// Applies `f` to every item with at most `workers` threads; results keep
/// input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Annotates every interaction with MP ratios. Interactions whose stages
/// fail after retries get all-absent ratios and are listed in the report;
/// the run itself only errors on cache I/O failures.
pub fn run_pipeline<C: ChatClient + ?Sized>(
    dataset: &Dataset,
    client: &C,
    opts: &PipelineOptions,
) -> Result<(Dataset, PipelineReport), PipelineError> {
    let runner = Runner {
        client,
        cache: CompletionCache::new(&opts.cache_dir),
        opts,
        calls: AtomicUsize::new(0),
        hits: AtomicUsize::new(0),
    };

    let records: Vec<(&InteractionRecord, String)> =
        dataset.records().map(|r| (r, interaction_key(r))).collect();
    let reused: Vec<Option<AuditRecord>> = records
        .iter()
        .map(|(_, key)| {
            load_audit(&opts.cache_dir, key).filter(|a| a.status == AuditStatus::Ok || !opts.retry_failed)
        })
        .collect();

    let needed: BTreeSet<&str> = records
        .iter()
        .zip(&reused)
        .filter(|(_, a)| a.is_none())
        .map(|((r, _), _)| r.problem_id.as_str())
        .collect();
    let needed: Vec<&str> = needed.into_iter().collect();
    let rubrics = par_map(&needed, opts.concurrency, |pid| {
        let problem = &dataset.problems[*pid];
        if problem.text.trim().is_empty() {
            return Ok(Err("problem text is empty".to_string()));
        }
        let prompt = render_indicator_prompt(problem);
        match runner.stage(Stage::Indicators, &prompt, |raw| parse_indicators(pid, raw)) {
            Ok(p) => Ok(Ok(p)),
            Err(e @ PipelineError::Cache { .. }) => Err(e),
            Err(e) => Ok(Err(e.to_string())),
        }
    });
    let mut rubric_map = BTreeMap::new();
    for (pid, r) in needed.iter().zip(rubrics) {
        rubric_map.insert(*pid, r?);
    }

    let todo: Vec<usize> = (0..records.len()).filter(|&i| reused[i].is_none()).collect();
    let fresh = par_map(&todo, opts.concurrency, |&i| {
        let (r, key) = &records[i];
        let audit = runner.interaction(&dataset.problems[&r.problem_id], &rubric_map[r.problem_id.as_str()], r, key.clone())?;
        let bytes = serde_json::to_vec_pretty(&audit).expect("audit serializes");
        write_atomic(&audit_path(&opts.cache_dir, key), &bytes)?;
        Ok::<_, PipelineError>(audit)
    });

    let mut audits = reused;
    let mut report = PipelineReport {
        interactions: records.len(),
        reused_audits: audits.iter().filter(|a| a.is_some()).count(),
        ..Default::default()
    };
    for (i, a) in todo.into_iter().zip(fresh) {
        audits[i] = Some(a?);
    }

    let mut by_key: BTreeMap<String, MpRatios> = BTreeMap::new();
    for audit in audits.into_iter().map(|a| a.expect("all interactions resolved")) {
        report.warnings += audit.warnings.len();
        match audit.status {
            AuditStatus::Ok => report.annotated += 1,
            AuditStatus::Failed => {
                report.failed += 1;
                report.flagged.push(FlaggedInteraction {
                    key: audit.key.clone(),
                    student_id: audit.student_id.clone(),
                    problem_id: audit.problem_id.clone(),
                    stage: audit.failed_stage.unwrap_or(Stage::Indicators),
                    error: audit.error.clone().unwrap_or_default(),
                });
            }
        }
        by_key.insert(audit.key, audit.ratios);
    }
    report.failure_rate = if report.interactions == 0 {
        0.0
    } else {
        report.failed as f64 / report.interactions as f64
    };
    report.client_calls = runner.calls.load(Ordering::Relaxed);
    report.cache_hits = runner.hits.load(Ordering::Relaxed);
    if report.failed > 0 {
        log::warn!(
            "MP extraction failed for {} of {} interactions ({:.1}%)",
            report.failed,
            report.interactions,
            100.0 * report.failure_rate
        );
    }

    let sequences = dataset
        .sequences
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for r in &mut s.steps {
                r.mp = Some(by_key[&interaction_key(r)].clone());
            }
            s
        })
        .collect();
    Ok((dataset.with_sequences(sequences), report))
}
