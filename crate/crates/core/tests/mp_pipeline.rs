use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use prockt_core::dataset::{Dataset, Dimension, InteractionRecord, Problem, QuestionType};
use prockt_core::mp_pipeline::*;

const TEACHER_ONE_SHOT: &str = include_str!("fixtures/teacher_one_shot.txt");
const STUDENT_ONE_SHOT: &str = include_str!("fixtures/student_one_shot.txt");
const EVAL_ONE_SHOT: &str = include_str!("fixtures/evaluation_one_shot.txt");
const EVAL_INDICATORS: &str = include_str!("fixtures/evaluation_indicators.txt");

fn golden_problem() -> Problem {
    Problem {
        problem_id: "q1".into(),
        kc_ids: vec!["Quadratic Equations".into()],
        text: "Find all real x such that x^2 - 5x + 6 = 0.".into(),
        solution_text: None,
        answer: "1".into(),
        question_type: QuestionType::MultipleChoice,
        difficulty: 2,
        options: vec!["x = 2 or x = 3".into(), "x = -2 or x = -3".into(), "x = 1 or x = 6".into()],
    }
}

fn indicator(code: &str, text: &str) -> Indicator {
    let (category, ordinal) = Indicator::parse_code(code).unwrap();
    Indicator {
        code: code.into(),
        category,
        ordinal,
        text: text.into(),
    }
}

fn golden_rubric() -> IndicatorSet {
    IndicatorSet {
        problem_id: "q1".into(),
        indicators: vec![
            indicator("CU1", "Recognize the equation as a quadratic"),
            indicator("SC1", "Choose factoring as the solution strategy"),
            indicator("PF1", "Factor the polynomial as (x - 2)(x - 3)"),
            indicator("AR1", "Check both roots in the original equation"),
        ],
    }
}

fn golden_responses() -> ResponseSet {
    let mut answers = BTreeMap::new();
    answers.insert("CU1".to_string(), "It is a quadratic equation.".to_string());
    answers.insert("SC1".to_string(), "Factor the left side.".to_string());
    answers.insert("PF1".to_string(), "(x - 2)(x - 3) = 0".to_string());
    ResponseSet { answers }
}

#[test]
fn golden_indicator_prompt() {
    assert_eq!(render_indicator_prompt(&golden_problem()), include_str!("golden/indicator.txt"));
}

#[test]
fn golden_student_prompt() {
    let out = render_student_prompt(
        &golden_problem(),
        &golden_rubric(),
        "x^2 - 5x + 6 = 0\n(x - 2)(x - 3) = 0\nx = 2, x = 3",
        "1",
    );
    assert_eq!(out, include_str!("golden/student.txt"));
}

#[test]
fn golden_eval_prompt() {
    let out = render_eval_prompt(&golden_problem(), &golden_rubric(), &golden_responses());
    assert_eq!(out, include_str!("golden/evaluation.txt"));
}

#[test]
fn teacher_one_shot_rubric() {
    let parsed = parse_indicators("ode", TEACHER_ONE_SHOT).unwrap();
    let set = parsed.value;
    assert_eq!(set.len(), 14);
    let counts = set.count_by_dimension();
    assert_eq!(counts[&Dimension::CU], 5);
    assert_eq!(counts[&Dimension::SC], 3);
    assert_eq!(counts[&Dimension::PF], 3);
    assert_eq!(counts[&Dimension::AR], 3);
    assert!(parsed.warnings.is_empty());
    assert_eq!(set.indicators[0].code, "CU1");
    assert_eq!(set.indicators[1].code, "SC1");
}

#[test]
fn student_one_shot_drops_unknown_category() {
    let mut answers = Vec::new();
    for code in ["CU1", "SC1", "PF1", "AR1"] {
        answers.push(indicator(code, "x"));
    }
    let rubric = IndicatorSet {
        problem_id: "ode".into(),
        indicators: answers,
    };
    let parsed = parse_responses(STUDENT_ONE_SHOT, &rubric).unwrap();
    assert_eq!(parsed.value.get("CU1"), Some("This is a quadratic equation."));
    assert_eq!(parsed.value.get("AD1"), None);
    assert_eq!(parsed.value.get("AR1"), Some(UNKNOWN_ANSWER));
    assert!(parsed.warnings.iter().any(|w| w.contains("AD1")));
    assert_eq!(parsed.value.answers.len(), 4);
}

fn eval_rubric() -> IndicatorSet {
    let body = EVAL_INDICATORS
        .trim()
        .strip_prefix("mathematical_proficiency_indicators:")
        .unwrap();
    let wrapped = format!("{{\"mathematical_proficiency_indicators\": {body}}}");
    parse_indicators("rational", &wrapped).unwrap().value
}

#[test]
fn evaluation_one_shot_verdicts_and_ratios() {
    let rubric = eval_rubric();
    assert_eq!(rubric.len(), 13);
    let verdicts = parse_verdicts(EVAL_ONE_SHOT, &rubric).unwrap().value;
    assert_eq!(verdicts.scores.len(), 13);
    assert_eq!(verdicts.ones(), 8);
    assert_eq!(verdicts.zeros(), 5);
    let r = compute_mp_ratios(&rubric, &verdicts);
    assert_eq!(r.value(Dimension::CU), Some(2.0 / 3.0));
    assert_eq!(r.value(Dimension::SC), Some(2.0 / 3.0));
    assert_eq!(r.value(Dimension::PF), Some(4.0 / 5.0));
    assert_eq!(r.value(Dimension::AR), Some(0.0));
}

#[test]
fn missing_verdict_is_named() {
    let rubric = eval_rubric();
    let raw = EVAL_ONE_SHOT.replace(", \"SC3\": 0", "");
    match parse_verdicts(&raw, &rubric) {
        Err(PipelineError::IncompleteVerdict(codes)) => assert_eq!(codes, vec!["SC3".to_string()]),
        other => panic!("expected IncompleteVerdict, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

fn toy_dataset(n: usize) -> Dataset {
    let problems: Vec<Problem> = (0..n)
        .map(|i| Problem {
            problem_id: format!("p{i}"),
            kc_ids: vec![format!("k{}", i % 3)],
            text: format!("Compute {i} + {}.", i + 1),
            solution_text: None,
            answer: format!("{}", 2 * i + 1),
            question_type: QuestionType::ShortAnswer,
            difficulty: 1,
            options: vec![],
        })
        .collect();
    let records = (0..n)
        .map(|i| InteractionRecord {
            student_id: format!("s{}", i % 2),
            problem_id: format!("p{i}"),
            selected_answer: format!("{}", 2 * i + 1),
            correct: 1,
            duration: 30.0,
            process_text: format!("{i} + {}\n= {}\ncheck\nby counting\ndone", i + 1, 2 * i + 1),
            timestamp: i as i64 * 1000,
            mp: None,
        })
        .collect();
    Dataset::from_parts(problems, records).unwrap()
}

fn options(dir: &std::path::Path) -> PipelineOptions {
    let mut o = PipelineOptions::new(dir);
    o.backoff_base = Duration::ZERO;
    o.concurrency = 3;
    o
}

#[test]
fn mock_pipeline_is_deterministic_and_cached() {
    let data = toy_dataset(10);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();

    let mock = MockChatClient::new();
    let (a, report) = run_pipeline(&data, &mock, &options(dir_a.path())).unwrap();
    assert_eq!(report.annotated, 10);
    assert_eq!(report.failed, 0);
    assert_eq!(mock.calls(), 30);
    for r in a.records() {
        let mp = r.mp.as_ref().unwrap();
        for d in Dimension::ALL {
            let v = mp.value(d).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    let (b, _) = run_pipeline(&data, &MockChatClient::new(), &options(dir_b.path())).unwrap();
    assert_eq!(a, b);

    let warm = MockChatClient::new();
    let (c, report) = run_pipeline(&data, &warm, &options(dir_a.path())).unwrap();
    assert_eq!(warm.calls(), 0);
    assert_eq!(report.client_calls, 0);
    assert_eq!(a, c);

    // completions alone (no audits) also make reruns free
    std::fs::remove_dir_all(dir_a.path().join("audit")).unwrap();
    let warm = MockChatClient::new();
    let (d, report) = run_pipeline(&data, &warm, &options(dir_a.path())).unwrap();
    assert_eq!(warm.calls(), 0);
    assert_eq!(report.cache_hits, 30);
    assert_eq!(a, d);
}

#[test]
fn audit_records_reproduce_ratios() {
    let data = toy_dataset(6);
    let dir = tempfile::tempdir().unwrap();
    let (annotated, _) = run_pipeline(&data, &MockChatClient::new(), &options(dir.path())).unwrap();
    for r in annotated.records() {
        let audit = load_audit(dir.path(), &interaction_key(r)).unwrap();
        assert_eq!(audit.status, AuditStatus::Ok);
        assert_eq!(audit.student_id, r.student_id);
        let set = audit.indicators.as_ref().unwrap();
        assert!((8..=15).contains(&set.len()));
        let recomputed = compute_mp_ratios(set, audit.verdicts.as_ref().unwrap());
        assert_eq!(&recomputed, r.mp.as_ref().unwrap());
        assert_eq!(recomputed, audit.ratios);
    }
}

/// Fails every indicator-stage call for one problem.
struct Faulty {
    inner: MockChatClient,
    poison: String,
    failures: AtomicUsize,
}

impl ChatClient for Faulty {
    fn complete(&self, system: &str, user: &str, params: &ChatParams) -> Result<String, ClientError> {
        if user.starts_with("You are Teacher GPT.\n") && user.contains(&self.poison) {
            self.failures.fetch_add(1, Ordering::SeqCst);
            return Err(ClientError::Status(503));
        }
        self.inner.complete(system, user, params)
    }
}

#[test]
fn failing_teacher_stage_flags_one_interaction() {
    let data = toy_dataset(10);
    let dir = tempfile::tempdir().unwrap();
    let client = Faulty {
        inner: MockChatClient::new(),
        poison: "Compute 4 + 5.".into(),
        failures: AtomicUsize::new(0),
    };
    let opts = options(dir.path());
    let (out, report) = run_pipeline(&data, &client, &opts).unwrap();
    assert_eq!(report.annotated, 9);
    assert_eq!(report.failed, 1);
    assert!((report.failure_rate - 0.1).abs() < 1e-12);
    assert_eq!(report.flagged[0].problem_id, "p4");
    assert_eq!(report.flagged[0].stage, Stage::Indicators);
    assert_eq!(client.failures.load(Ordering::SeqCst), opts.params.max_retries as usize);
    let failed = out.records().find(|r| r.problem_id == "p4").unwrap();
    assert!(failed.mp.as_ref().unwrap().is_all_absent());
    assert_eq!(out.records().filter(|r| !r.mp.as_ref().unwrap().is_all_absent()).count(), 9);

    // the failure is remembered; a warm rerun makes no calls
    let warm = MockChatClient::new();
    let (again, report) = run_pipeline(&data, &warm, &opts).unwrap();
    assert_eq!(warm.calls(), 0);
    assert_eq!(report.failed, 1);
    assert_eq!(again, out);

    // opting in to retries recovers it
    let mut retry = opts.clone();
    retry.retry_failed = true;
    let healthy = MockChatClient::new();
    let (fixed, report) = run_pipeline(&data, &healthy, &retry).unwrap();
    assert_eq!(report.failed, 0);
    assert_eq!(healthy.calls(), 3);
    assert!(fixed.records().all(|r| !r.mp.as_ref().unwrap().is_all_absent()));
}

#[test]
fn unparsable_completion_is_retried_then_flagged() {
    struct Garbage;
    impl ChatClient for Garbage {
        fn complete(&self, _: &str, _: &str, _: &ChatParams) -> Result<String, ClientError> {
            Ok("I cannot help with that.".into())
        }
    }
    let data = toy_dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = run_pipeline(&data, &Garbage, &options(dir.path())).unwrap();
    assert_eq!(report.failed, 2);
    assert_eq!(report.client_calls, 2 * 3);
    assert!(dir.path().join("completions").read_dir().map(|d| d.count()).unwrap_or(0) == 0);
}
