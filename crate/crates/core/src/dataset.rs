//! Interaction records, their on-disk format, filtering, student-level
//! splits, and next-step training batches.
//!
//! On disk a dataset is a directory holding `problems.json` (an array of
//! [`Problem`]) and `interactions.jsonl` (one [`InteractionRecord`] per line).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROBLEMS_FILE: &str = "problems.json";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";

/// Interactions whose process text has fewer non-blank lines are dropped.
pub const MIN_PROCESS_LINES: usize = 5;
/// Input value used for an MP dimension with no measurement.
pub const MP_IMPUTE: f64 = 0.5;
pub const DEFAULT_MAX_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    InvalidRecord { line: usize, message: String },
    #[error("invalid problem `{problem_id}`: {message}")]
    InvalidProblem { problem_id: String, message: String },
    #[error("problems file: {0}")]
    ProblemsFile(String),
    #[error("interactions reference unknown problems: {}", .0.join(", "))]
    DanglingProblems(Vec<String>),
    #[error("invalid MP ratios: {0}")]
    InvalidMp(String),
    #[error("cannot split {0} students into three non-empty partitions")]
    TooFewStudents(usize),
    #[error("invalid split fractions: test={test_frac}, val={val_frac}")]
    InvalidFractions { test_frac: f64, val_frac: f64 },
    #[error("max_len must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// MP dimensions and ratios
// ---------------------------------------------------------------------------

/// The four observable mathematical-proficiency strands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    /// Conceptual understanding.
    CU,
    /// Strategic competence.
    SC,
    /// Procedural fluency.
    PF,
    /// Adaptive reasoning.
    AR,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::CU, Dimension::SC, Dimension::PF, Dimension::AR];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Dimension::CU => "CU",
            Dimension::SC => "SC",
            Dimension::PF => "PF",
            Dimension::AR => "AR",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DimensionCount {
    pub satisfied: u32,
    pub total: u32,
}

/// Per-dimension proportion of satisfied indicators.
///
/// Stored as integer counts; the real-valued ratio is always derived as
/// `satisfied / total`, so values can never drift from their counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "MpRatiosRepr", into = "MpRatiosRepr")]
pub struct MpRatios {
    counts: [DimensionCount; 4],
}

impl MpRatios {
    pub fn from_counts(counts: [DimensionCount; 4]) -> Result<Self, DatasetError> {
        for (d, c) in Dimension::ALL.iter().zip(&counts) {
            if c.satisfied > c.total {
                return Err(DatasetError::InvalidMp(format!(
                    "{}: satisfied {} exceeds total {}",
                    d.code(),
                    c.satisfied,
                    c.total
                )));
            }
        }
        Ok(Self { counts })
    }

    /// Every dimension absent (used when extraction failed).
    pub fn absent() -> Self {
        Self::default()
    }

    pub fn count(&self, d: Dimension) -> DimensionCount {
        self.counts[d.index()]
    }

    pub fn counts(&self) -> &[DimensionCount; 4] {
        &self.counts
    }

    pub fn present(&self, d: Dimension) -> bool {
        self.counts[d.index()].total > 0
    }

    pub fn value(&self, d: Dimension) -> Option<f64> {
        let c = self.counts[d.index()];
        (c.total > 0).then(|| c.satisfied as f64 / c.total as f64)
    }

    pub fn is_all_absent(&self) -> bool {
        self.counts.iter().all(|c| c.total == 0)
    }

    /// `[v_CU, v_SC, v_PF, v_AR, m_CU, m_SC, m_PF, m_AR]` with absent
    /// dimensions imputed to [`MP_IMPUTE`] and mask bit 0.
    pub fn input_features(mp: Option<&MpRatios>) -> [f64; 8] {
        let mut out = [MP_IMPUTE, MP_IMPUTE, MP_IMPUTE, MP_IMPUTE, 0.0, 0.0, 0.0, 0.0];
        if let Some(mp) = mp {
            for d in Dimension::ALL {
                if let Some(v) = mp.value(d) {
                    out[d.index()] = v;
                    out[4 + d.index()] = 1.0;
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct MpRatiosRepr {
    values: BTreeMap<Dimension, f64>,
    present: BTreeMap<Dimension, bool>,
    counts: BTreeMap<Dimension, DimensionCount>,
}

impl From<MpRatios> for MpRatiosRepr {
    fn from(mp: MpRatios) -> Self {
        Self {
            values: Dimension::ALL.into_iter().filter_map(|d| mp.value(d).map(|v| (d, v))).collect(),
            present: Dimension::ALL.into_iter().map(|d| (d, mp.present(d))).collect(),
            counts: Dimension::ALL.into_iter().map(|d| (d, mp.count(d))).collect(),
        }
    }
}

impl TryFrom<MpRatiosRepr> for MpRatios {
    type Error = DatasetError;

    fn try_from(repr: MpRatiosRepr) -> Result<Self, Self::Error> {
        let mut counts = [DimensionCount::default(); 4];
        for d in Dimension::ALL {
            counts[d.index()] = repr.counts.get(&d).copied().unwrap_or_default();
        }
        let mp = MpRatios::from_counts(counts)?;
        for d in Dimension::ALL {
            let present = repr.present.get(&d).copied().unwrap_or(false);
            if present != mp.present(d) {
                return Err(DatasetError::InvalidMp(format!(
                    "{}: present flag disagrees with counts",
                    d.code()
                )));
            }
            if repr.values.get(&d).copied() != mp.value(d) {
                return Err(DatasetError::InvalidMp(format!(
                    "{}: value is not satisfied/total",
                    d.code()
                )));
            }
        }
        Ok(mp)
    }
}

// ---------------------------------------------------------------------------
// records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    MultipleChoice,
    ShortAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub kc_ids: Vec<String>,
    pub text: String,
    pub solution_text: Option<String>,
    pub answer: String,
    pub question_type: QuestionType,
    pub difficulty: u8,
    /// Answer choices of a multiple-choice problem, in display order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
}

impl Problem {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |message: &str| DatasetError::InvalidProblem {
            problem_id: self.problem_id.clone(),
            message: message.to_string(),
        };
        if self.problem_id.is_empty() {
            return Err(bad("empty problem_id"));
        }
        if self.kc_ids.is_empty() {
            return Err(bad("no knowledge concepts"));
        }
        if !(1..=5).contains(&self.difficulty) {
            return Err(bad("difficulty outside 1..=5"));
        }
        Ok(())
    }

    /// The concept used as `c_t` for this problem.
    pub fn primary_concept(&self) -> &str {
        &self.kc_ids[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub student_id: String,
    pub problem_id: String,
    pub selected_answer: String,
    pub correct: u8,
    /// Seconds spent on the problem.
    pub duration: f64,
    /// OCR transcription of the handwritten solution, one line per row.
    pub process_text: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mp: Option<MpRatios>,
}

impl InteractionRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.student_id.is_empty() {
            return Err("empty student_id".into());
        }
        if self.problem_id.is_empty() {
            return Err("empty problem_id".into());
        }
        if self.correct > 1 {
            return Err(format!("correct must be 0 or 1, got {}", self.correct));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(format!("duration must be a non-negative number, got {}", self.duration));
        }
        Ok(())
    }

    pub fn is_correct(&self) -> bool {
        self.correct == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentSequence {
    pub student_id: String,
    pub steps: Vec<InteractionRecord>,
}

/// A problems table plus time-ordered per-student sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub problems: BTreeMap<String, Problem>,
    pub sequences: Vec<StudentSequence>,
}

impl Dataset {
    /// Validates problems, groups records by student (ordered by student id)
    /// and sorts each student's records by timestamp. Ties keep input order.
    pub fn from_parts(problems: Vec<Problem>, records: Vec<InteractionRecord>) -> Result<Self, DatasetError> {
        let mut table = BTreeMap::new();
        for p in problems {
            p.validate()?;
            let id = p.problem_id.clone();
            if table.insert(id.clone(), p).is_some() {
                return Err(DatasetError::ProblemsFile(format!("duplicate problem_id `{id}`")));
            }
        }
        let dangling: BTreeSet<String> = records
            .iter()
            .filter(|r| !table.contains_key(&r.problem_id))
            .map(|r| r.problem_id.clone())
            .collect();
        if !dangling.is_empty() {
            return Err(DatasetError::DanglingProblems(dangling.into_iter().collect()));
        }
        let mut grouped: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
        for r in records {
            grouped.entry(r.student_id.clone()).or_default().push(r);
        }
        let sequences = grouped
            .into_iter()
            .map(|(student_id, mut steps)| {
                steps.sort_by_key(|r| r.timestamp);
                StudentSequence { student_id, steps }
            })
            .collect();
        Ok(Self {
            problems: table,
            sequences,
        })
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.steps.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.sequences.iter().flat_map(|s| s.steps.iter())
    }

    /// Same problems table, different sequences.
    pub fn with_sequences(&self, sequences: Vec<StudentSequence>) -> Self {
        Self {
            problems: self.problems.clone(),
            sequences,
        }
    }
}

fn resolve_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(PROBLEMS_FILE), path.join(INTERACTIONS_FILE))
    } else {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        (dir.join(PROBLEMS_FILE), path.to_path_buf())
    }
}

/// Loads a dataset from a directory (or from an `interactions.jsonl` path
/// whose directory also holds `problems.json`).
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let (problems_path, interactions_path) = resolve_paths(path);
    let text = fs::read_to_string(&problems_path).map_err(io_err(&problems_path))?;
    let problems: Vec<Problem> =
        serde_json::from_str(&text).map_err(|e| DatasetError::ProblemsFile(e.to_string()))?;

    let file = fs::File::open(&interactions_path).map_err(io_err(&interactions_path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(&interactions_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InteractionRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|message| DatasetError::InvalidRecord { line: line_no, message })?;
        records.push(record);
    }
    Dataset::from_parts(problems, records)
}

/// Writes `problems.json` and `interactions.jsonl` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let problems: Vec<&Problem> = dataset.problems.values().collect();
    let problems_path = dir.join(PROBLEMS_FILE);
    let text = serde_json::to_string_pretty(&problems).expect("problems serialize");
    write_atomic(&problems_path, text.as_bytes())?;

    let mut buf = Vec::new();
    for r in dataset.records() {
        serde_json::to_writer(&mut buf, r).expect("record serialize");
        buf.push(b'\n');
    }
    write_atomic(&dir.join(INTERACTIONS_FILE), &buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

/// Non-blank, newline-separated lines of a transcribed solution.
pub fn count_process_lines(text: &str) -> usize {
    text.split('\n').filter(|l| !l.trim().is_empty()).count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input_interactions: usize,
    pub dropped_short_process: usize,
    pub dropped_missing_problem_text: usize,
    pub removed_empty_sequences: usize,
    pub kept_interactions: usize,
}

/// Drops interactions with fewer than [`MIN_PROCESS_LINES`] process lines,
/// then interactions whose problem has no text, then students left with no
/// interactions. Each record is counted under the first rule it fails.
pub fn preprocess(dataset: &Dataset) -> (Dataset, PreprocessReport) {
    let mut report = PreprocessReport::default();
    let mut sequences = Vec::new();
    for seq in &dataset.sequences {
        let mut steps = Vec::with_capacity(seq.steps.len());
        for r in &seq.steps {
            report.input_interactions += 1;
            if count_process_lines(&r.process_text) < MIN_PROCESS_LINES {
                report.dropped_short_process += 1;
                continue;
            }
            let has_text = dataset
                .problems
                .get(&r.problem_id)
                .is_some_and(|p| !p.text.trim().is_empty());
            if !has_text {
                report.dropped_missing_problem_text += 1;
                continue;
            }
            steps.push(r.clone());
        }
        if steps.is_empty() {
            report.removed_empty_sequences += 1;
        } else {
            report.kept_interactions += steps.len();
            sequences.push(StudentSequence {
                student_id: seq.student_id.clone(),
                steps,
            });
        }
    }
    (dataset.with_sequences(sequences), report)
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<StudentSequence>,
    pub val: Vec<StudentSequence>,
    pub test: Vec<StudentSequence>,
}

/// Student-level split: `round(test_frac·n)` students go to test, then
/// `round(val_frac·remaining)` to validation, the rest to train. Every
/// partition gets at least one student.
pub fn split(sequences: &[StudentSequence], seed: u64, test_frac: f64, val_frac: f64) -> Result<Split, DatasetError> {
    if !(test_frac > 0.0 && test_frac < 1.0 && val_frac > 0.0 && val_frac < 1.0) {
        return Err(DatasetError::InvalidFractions { test_frac, val_frac });
    }
    let n = sequences.len();
    if n < 3 {
        return Err(DatasetError::TooFewStudents(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Shuffle a student-id ordering, not the caller's order.
    order.sort_by(|&a, &b| sequences[a].student_id.cmp(&sequences[b].student_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_test = ((test_frac * n as f64).round() as usize).clamp(1, n - 2);
    let rest = n - n_test;
    let n_val = ((val_frac * rest as f64).round() as usize).clamp(1, rest - 1);

    let pick = |idx: &[usize]| {
        let mut v: Vec<StudentSequence> = idx.iter().map(|&i| sequences[i].clone()).collect();
        v.sort_by(|a, b| a.student_id.cmp(&b.student_id));
        v
    };
    Ok(Split {
        test: pick(&order[..n_test]),
        val: pick(&order[n_test..n_test + n_val]),
        train: pick(&order[n_test + n_val..]),
    })
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// Dense integer ids for problems and concepts, fixed by the problems table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub questions: BTreeMap<String, usize>,
    pub concepts: BTreeMap<String, usize>,
    /// Concept index of each question index.
    pub question_concept: Vec<usize>,
}

impl Vocab {
    pub fn from_problems(problems: &BTreeMap<String, Problem>) -> Self {
        let concepts: BTreeMap<String, usize> = problems
            .values()
            .map(|p| p.primary_concept().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        let mut questions = BTreeMap::new();
        let mut question_concept = Vec::with_capacity(problems.len());
        for (i, (id, p)) in problems.iter().enumerate() {
            questions.insert(id.clone(), i);
            question_concept.push(concepts[p.primary_concept()]);
        }
        Self {
            questions,
            concepts,
            question_concept,
        }
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }
}

/// A contiguous chunk of one student's sequence, at most `max_len` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub student_id: String,
    /// Index of the first step within the student's full sequence.
    pub offset: usize,
    pub steps: Vec<InteractionRecord>,
}

/// Splits every sequence into consecutive windows of at most `max_len`.
pub fn make_windows(sequences: &[StudentSequence], max_len: usize) -> Result<Vec<Window>, DatasetError> {
    if max_len < 2 {
        return Err(DatasetError::MaxLenTooSmall(max_len));
    }
    Ok(sequences
        .iter()
        .flat_map(|s| {
            s.steps.chunks(max_len).enumerate().map(|(i, chunk)| Window {
                student_id: s.student_id.clone(),
                offset: i * max_len,
                steps: chunk.to_vec(),
            })
        })
        .collect())
}

/// Padded next-step batch. Every per-step array has `num_sequences ·
/// max_len` entries (times 4 or 8 for MP arrays), row-major by sequence.
///
/// Position `t` holds the inputs of step `t` and the targets of step `t+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub num_sequences: usize,
    pub max_len: usize,
    pub question_ids: Vec<usize>,
    pub concept_ids: Vec<usize>,
    pub correctness: Vec<f64>,
    /// `[values(4) ‖ mask bits(4)]` of step `t`'s own MP ratios.
    pub mp_inputs: Vec<f64>,
    /// 1 where step `t` exists.
    pub step_mask: Vec<f64>,
    pub target_question_ids: Vec<usize>,
    pub target_concept_ids: Vec<usize>,
    pub targets_correct: Vec<f64>,
    pub targets_mp: Vec<f64>,
    pub target_mp_mask: Vec<f64>,
    /// 1 where both step `t` and step `t+1` exist (supervised positions).
    pub valid_mask: Vec<f64>,
    /// `(student_id, offset)` of each row's window.
    pub sources: Vec<(String, usize)>,
}

impl Batch {
    pub fn from_windows(windows: &[Window], vocab: &Vocab, problems: &BTreeMap<String, Problem>, max_len: usize) -> Self {
        let n = windows.len();
        let cells = n * max_len;
        let mut b = Batch {
            num_sequences: n,
            max_len,
            question_ids: vec![0; cells],
            concept_ids: vec![0; cells],
            correctness: vec![0.0; cells],
            mp_inputs: vec![0.0; cells * 8],
            step_mask: vec![0.0; cells],
            target_question_ids: vec![0; cells],
            target_concept_ids: vec![0; cells],
            targets_correct: vec![0.0; cells],
            targets_mp: vec![0.0; cells * 4],
            target_mp_mask: vec![0.0; cells * 4],
            valid_mask: vec![0.0; cells],
            sources: windows.iter().map(|w| (w.student_id.clone(), w.offset)).collect(),
        };
        let ids = |r: &InteractionRecord| {
            let q = vocab.questions[&r.problem_id];
            let c = vocab.concepts[problems[&r.problem_id].primary_concept()];
            (q, c)
        };
        for (row, w) in windows.iter().enumerate() {
            debug_assert!(w.steps.len() <= max_len);
            for (t, step) in w.steps.iter().enumerate() {
                let cell = row * max_len + t;
                let (q, c) = ids(step);
                b.question_ids[cell] = q;
                b.concept_ids[cell] = c;
                b.correctness[cell] = step.correct as f64;
                b.step_mask[cell] = 1.0;
                b.mp_inputs[cell * 8..cell * 8 + 8].copy_from_slice(&MpRatios::input_features(step.mp.as_ref()));
                if let Some(next) = w.steps.get(t + 1) {
                    let (nq, nc) = ids(next);
                    b.target_question_ids[cell] = nq;
                    b.target_concept_ids[cell] = nc;
                    b.targets_correct[cell] = next.correct as f64;
                    b.valid_mask[cell] = 1.0;
                    if let Some(mp) = &next.mp {
                        for d in Dimension::ALL {
                            if let Some(v) = mp.value(d) {
                                b.targets_mp[cell * 4 + d.index()] = v;
                                b.target_mp_mask[cell * 4 + d.index()] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        b
    }

    pub fn num_supervised(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m > 0.0).count()
    }

    /// Number of leading positions that hold a real step in some row.
    pub fn effective_len(&self) -> usize {
        (0..self.max_len)
            .rev()
            .find(|&t| (0..self.num_sequences).any(|r| self.step_mask[r * self.max_len + t] > 0.0))
            .map_or(0, |t| t + 1)
    }
}

/// Groups windows into batches of `batch_size`, in the given order.
pub fn batch_windows(
    windows: &[Window],
    vocab: &Vocab,
    problems: &BTreeMap<String, Problem>,
    max_len: usize,
    batch_size: usize,
) -> Vec<Batch> {
    windows
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::from_windows(chunk, vocab, problems, max_len))
        .collect()
}

/// Windows every sequence and packs them into padded batches.
pub fn make_batches(
    dataset: &Dataset,
    sequences: &[StudentSequence],
    vocab: &Vocab,
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<Batch>, DatasetError> {
    let windows = make_windows(sequences, max_len)?;
    Ok(batch_windows(&windows, vocab, &dataset.problems, max_len, batch_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn problem(id: &str, text: &str) -> Problem {
        Problem {
            problem_id: id.into(),
            kc_ids: vec![format!("kc-{id}")],
            text: text.into(),
            solution_text: None,
            answer: "1".into(),
            question_type: QuestionType::ShortAnswer,
            difficulty: 3,
            options: vec![],
        }
    }

    fn record(student: &str, problem: &str, ts: i64, lines: usize) -> InteractionRecord {
        InteractionRecord {
            student_id: student.into(),
            problem_id: problem.into(),
            selected_answer: "1".into(),
            correct: (ts % 2) as u8,
            duration: 10.0,
            process_text: (0..lines).map(|i| format!("line {i}")).collect::<Vec<_>>().join("\n"),
            timestamp: ts,
            mp: None,
        }
    }

    #[test]
    fn process_line_counting_skips_blank_lines() {
        assert_eq!(count_process_lines("a\n\n b\n   \nc"), 3);
        assert_eq!(count_process_lines(""), 0);
    }

    #[test]
    fn boundary_of_line_filter() {
        let ds = Dataset::from_parts(
            vec![problem("p1", "text")],
            vec![record("s1", "p1", 1, 4), record("s1", "p1", 2, 5)],
        )
        .unwrap();
        let (out, report) = preprocess(&ds);
        assert_eq!(report.dropped_short_process, 1);
        assert_eq!(out.sequences[0].steps.len(), 1);
        assert_eq!(out.sequences[0].steps[0].timestamp, 2);
    }

    #[test]
    fn missing_problem_text_is_dropped() {
        let ds = Dataset::from_parts(
            vec![problem("p1", "  "), problem("p2", "ok")],
            vec![record("s1", "p1", 1, 6), record("s2", "p2", 2, 6)],
        )
        .unwrap();
        let (out, report) = preprocess(&ds);
        assert_eq!(report.dropped_missing_problem_text, 1);
        assert_eq!(report.removed_empty_sequences, 1);
        assert_eq!(out.sequences.len(), 1);
    }

    #[test]
    fn split_sizes_for_100_students() {
        let seqs: Vec<StudentSequence> = (0..100)
            .map(|i| StudentSequence {
                student_id: format!("s{i:03}"),
                steps: vec![record(&format!("s{i:03}"), "p1", 0, 5)],
            })
            .collect();
        let s = split(&seqs, 42, 0.2, 0.1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (72, 8, 20));
        assert_eq!(s, split(&seqs, 42, 0.2, 0.1).unwrap());
        assert!(matches!(split(&seqs[..2], 1, 0.2, 0.1), Err(DatasetError::TooFewStudents(2))));
        assert!(split(&seqs, 1, 0.0, 0.1).is_err());
    }

    #[test]
    fn windows_use_ceiling_division() {
        let seq = StudentSequence {
            student_id: "s".into(),
            steps: (0..450).map(|t| record("s", "p1", t, 5)).collect(),
        };
        let w = make_windows(&[seq], 200).unwrap();
        let lens: Vec<usize> = w.iter().map(|w| w.steps.len()).collect();
        assert_eq!(lens, vec![200, 200, 50]);
        assert_eq!(lens.len(), 450usize.div_ceil(200));
        assert!(make_windows(&[], 1).is_err());
    }

    #[test]
    fn short_sequence_has_n_minus_one_targets() {
        let ds = Dataset::from_parts(vec![problem("p1", "t")], (0..5).map(|t| record("s", "p1", t, 5)).collect()).unwrap();
        let vocab = Vocab::from_problems(&ds.problems);
        let batches = make_batches(&ds, &ds.sequences, &vocab, DEFAULT_MAX_LEN, 16).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].num_supervised(), 4);
        assert_eq!(batches[0].effective_len(), 5);
    }

    #[test]
    fn absent_dimension_is_imputed_and_masked() {
        let mut ds = Dataset::from_parts(vec![problem("p1", "t")], (0..2).map(|t| record("s", "p1", t, 5)).collect()).unwrap();
        let c = |s, t| DimensionCount { satisfied: s, total: t };
        let mp = MpRatios::from_counts([c(1, 2), c(1, 1), c(0, 3), c(0, 0)]).unwrap();
        for step in &mut ds.sequences[0].steps {
            step.mp = Some(mp.clone());
        }
        let vocab = Vocab::from_problems(&ds.problems);
        let b = &make_batches(&ds, &ds.sequences, &vocab, 4, 16).unwrap()[0];
        assert_eq!(&b.mp_inputs[..8], &[0.5, 1.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(&b.target_mp_mask[..4], &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(&b.targets_mp[..4], &[0.5, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mp_ratios_reject_inconsistent_json() {
        let ok = r#"{"values":{"CU":0.5},"present":{"CU":true,"SC":false,"PF":false,"AR":false},
            "counts":{"CU":{"satisfied":1,"total":2},"SC":{"satisfied":0,"total":0},
            "PF":{"satisfied":0,"total":0},"AR":{"satisfied":0,"total":0}}}"#;
        let mp: MpRatios = serde_json::from_str(ok).unwrap();
        assert_eq!(mp.value(Dimension::CU), Some(0.5));
        let bad_value = ok.replace("0.5", "0.6");
        assert!(serde_json::from_str::<MpRatios>(&bad_value).is_err());
        let bad_count = ok.replace(r#""satisfied":1,"total":2"#, r#""satisfied":3,"total":2"#);
        assert!(serde_json::from_str::<MpRatios>(&bad_count).is_err());
    }
}
