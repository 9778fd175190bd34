//! Prompt templates for the three stages and their placeholder filling.
//!
//! Templates are stored verbatim under `templates/`; placeholders are
//! `{name}` tokens. Substitution is single-pass, so text that happens to
//! contain a placeholder token is never expanded a second time.

use crate::dataset::{Problem, QuestionType};

use super::{IndicatorSet, ResponseSet, UNKNOWN_ANSWER};

pub const INDICATOR_TEMPLATE: &str = include_str!("templates/indicator.txt");
pub const STUDENT_TEMPLATE: &str = include_str!("templates/student.txt");
pub const EVALUATION_TEMPLATE: &str = include_str!("templates/evaluation.txt");

fn render(template: &str, subs: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + subs.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        let hit = subs.iter().find(|(name, _)| {
            tail.starts_with(name) && tail[name.len()..].starts_with('}')
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// `Options: [{"index":1,"text":"..."}, ...]` for multiple-choice problems,
/// empty for short-answer ones.
pub fn option_string(problem: &Problem) -> String {
    if problem.question_type == QuestionType::ShortAnswer || problem.options.is_empty() {
        return String::new();
    }
    let items: Vec<String> = problem
        .options
        .iter()
        .enumerate()
        .map(|(i, text)| format!("{{\"index\":{},\"text\":{}}}", i + 1, json_str(text)))
        .collect();
    format!("Options: [{}]", items.join(", "))
}

/// The curriculum unit shown to the teacher: the problem's concepts.
pub fn unit_title(problem: &Problem) -> String {
    problem.kc_ids.join(", ")
}

/// Indicators as a JSON object, one `"code": "text"` pair per line.
pub fn indicator_map_text(indicators: &IndicatorSet) -> String {
    let lines: Vec<String> = indicators
        .indicators
        .iter()
        .map(|i| format!("    {}: {}", json_str(&i.code), json_str(&i.text)))
        .collect();
    format!("{{\n{}\n}}", lines.join(",\n"))
}

fn pair_list<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let lines: Vec<String> = pairs
        .map(|(k, v)| format!("    {{{}: {}}}", json_str(k), json_str(v)))
        .collect();
    format!("[\n{}\n]", lines.join(",\n"))
}

/// Indicators as a JSON list of single-key objects.
pub fn indicator_list_text(indicators: &IndicatorSet) -> String {
    pair_list(indicators.indicators.iter().map(|i| (i.code.as_str(), i.text.as_str())))
}

/// Answers as a JSON list of single-key objects, in rubric order.
pub fn response_list_text(indicators: &IndicatorSet, responses: &ResponseSet) -> String {
    pair_list(
        indicators
            .indicators
            .iter()
            .map(|i| (i.code.as_str(), responses.get(&i.code).unwrap_or(UNKNOWN_ANSWER))),
    )
}

pub fn render_indicator_prompt(problem: &Problem) -> String {
    let options = option_string(problem);
    let unit = unit_title(problem);
    render(
        INDICATOR_TEMPLATE,
        &[
            ("Problem_text", &problem.text),
            ("problem_option_string", &options),
            ("curriculum_theme_title", &unit),
        ],
    )
}

pub fn render_student_prompt(
    problem: &Problem,
    indicators: &IndicatorSet,
    process_text: &str,
    selected_answer: &str,
) -> String {
    let options = option_string(problem);
    let indicator_text = indicator_map_text(indicators);
    render(
        STUDENT_TEMPLATE,
        &[
            ("indicator_text", &indicator_text),
            ("problem", &problem.text),
            ("problem_option_string", &options),
            ("student_solving_trace", process_text),
            ("solution_answer_sets", selected_answer),
        ],
    )
}

pub fn render_eval_prompt(problem: &Problem, indicators: &IndicatorSet, responses: &ResponseSet) -> String {
    let options = option_string(problem);
    let indicator_text = indicator_list_text(indicators);
    let answers = response_list_text(indicators, responses);
    render(
        EVALUATION_TEMPLATE,
        &[
            ("problem", &problem.text),
            ("problem_option_string", &options),
            ("indicator_text", &indicator_text),
            ("answer_indicator_text", &answers),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dimension;
    use crate::mp_pipeline::Indicator;

    fn problem(qt: QuestionType) -> Problem {
        Problem {
            problem_id: "p".into(),
            kc_ids: vec!["Linear Equations".into()],
            text: "Solve 2x + 3 = 7.".into(),
            solution_text: None,
            answer: "2".into(),
            question_type: qt,
            difficulty: 2,
            options: if qt == QuestionType::MultipleChoice {
                vec!["1".into(), "2".into()]
            } else {
                vec![]
            },
        }
    }

    fn rubric() -> IndicatorSet {
        let mk = |code: &str, d, o, text: &str| Indicator {
            code: code.into(),
            category: d,
            ordinal: o,
            text: text.into(),
        };
        IndicatorSet {
            problem_id: "p".into(),
            indicators: vec![
                mk("SC1", Dimension::SC, 1, "Isolate x"),
                mk("CU1", Dimension::CU, 1, "Name the equation type"),
                mk("PF1", Dimension::PF, 1, "Compute x"),
            ],
        }
    }

    #[test]
    fn substitution_is_single_pass() {
        let out = render("a {x} b {y} {z}", &[("x", "{y}"), ("y", "Y")]);
        assert_eq!(out, "a {y} b Y {z}");
    }

    #[test]
    fn indicator_prompt_contents() {
        let p = problem(QuestionType::MultipleChoice);
        let out = render_indicator_prompt(&p);
        assert!(out.starts_with("You are Teacher GPT."));
        assert!(out.contains("  - Conceptual Understanding (CU)\n"));
        assert!(out.contains("Problem (in Korean): Solve 2x + 3 = 7.\n"));
        assert!(out.contains("Options: [{\"index\":1,\"text\":\"1\"}, {\"index\":2,\"text\":\"2\"}]"));
        assert!(out.contains("Unit (in Korean): Linear Equations\n"));
        assert_eq!(out, render_indicator_prompt(&p));
    }

    #[test]
    fn short_answer_has_no_options_block() {
        let out = render_indicator_prompt(&problem(QuestionType::ShortAnswer));
        assert!(!out.contains("Options:"));
        assert!(out.contains("Solve 2x + 3 = 7.\n\nUnit (in Korean)"));
    }

    #[test]
    fn student_prompt_keeps_rubric_order() {
        let p = problem(QuestionType::ShortAnswer);
        let out = render_student_prompt(&p, &rubric(), "2x = 4\nx = 2", "2");
        assert!(out.contains("Keep the student's mistakes. **Do not** correct them."));
        assert!(out.contains(UNKNOWN_ANSWER));
        let expected = "Input Indicators: {\n    \"SC1\": \"Isolate x\",\n    \"CU1\": \"Name the equation type\",\n    \"PF1\": \"Compute x\"\n}\n";
        assert!(out.contains(expected));
        assert!(out.ends_with("My solving process (OCR):2x = 4\nx = 2\n\nMy answer: 2\n"));
    }

    #[test]
    fn eval_prompt_lists_every_code() {
        let p = problem(QuestionType::ShortAnswer);
        let r = rubric();
        let out = render_eval_prompt(&p, &r, &ResponseSet::default());
        assert!(out.contains("If the student's response is **\"I don't know\"**, assign 0."));
        let tail = &out[out.find("Mathematical Proficiency Indicators:\n").unwrap()..];
        for code in r.codes() {
            assert!(tail.contains(&format!("{{\"{code}\": ")), "{code}");
        }
        // absent answers are rendered as unknown
        assert_eq!(tail.matches("\"I don't know\"").count(), 3);
    }
}
