//! Lenient JSON extraction and stage-output parsing.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{Indicator, IndicatorSet, PipelineError, ResponseSet, Verdicts, UNKNOWN_ANSWER};

const INDICATORS_KEY: &str = "mathematical_proficiency_indicators";

/// A parsed value plus the non-fatal problems found while parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

/// Returns the end (exclusive) of the bracketed JSON value starting at
/// `start`, honouring string literals and escapes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Rewrites escapes JSON does not allow. `\_` (markdown-escaped underscore)
/// becomes `_`; any other stray backslash is escaped literally, which keeps
/// LaTeX such as `\in` readable.
fn repair_escapes(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    let mut in_string = false;
    while let Some(c) = chars.next() {
        if !in_string {
            if c == '"' {
                in_string = true;
            }
            out.push(c);
            continue;
        }
        match c {
            '"' => {
                in_string = false;
                out.push(c);
            }
            '\\' => match chars.peek().copied() {
                Some('_') => {
                    chars.next();
                    out.push('_');
                }
                Some(n) if "\"\\/bfnrtu".contains(n) => {
                    chars.next();
                    out.push('\\');
                    out.push(n);
                }
                _ => out.push_str("\\\\"),
            },
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out
}

/// Finds the first JSON object embedded in `raw`, tolerating leading prose,
/// code fences, raw newlines inside strings and non-JSON backslash escapes.
pub fn extract_json(raw: &str) -> Result<Map<String, Value>, PipelineError> {
    let bytes = raw.as_bytes();
    for (start, _) in raw.match_indices('{') {
        let Some(end) = balanced_end(bytes, start) else { continue };
        let candidate = &raw[start..end];
        let parsed = serde_json::from_str::<Value>(candidate)
            .or_else(|_| serde_json::from_str::<Value>(&repair_escapes(candidate)));
        if let Ok(Value::Object(map)) = parsed {
            return Ok(map);
        }
    }
    Err(PipelineError::Parse(raw.chars().take(200).collect()))
}

/// Flattens either `{"k": v, ...}` or `[{"k": v}, ...]` into ordered pairs.
fn entries(value: &Value, warnings: &mut Vec<String>) -> Vec<(String, Value)> {
    match value {
        Value::Object(map) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        Value::Array(items) => {
            let mut out = Vec::new();
            for item in items {
                match item {
                    Value::Object(map) => out.extend(map.iter().map(|(k, v)| (k.clone(), v.clone()))),
                    other => warn(warnings, format!("ignoring non-object list entry {other}")),
                }
            }
            out
        }
        other => {
            warn(warnings, format!("expected an object or list, got {other}"));
            Vec::new()
        }
    }
}

/// Accepts the object itself, or a list of single-key objects, for stages
/// whose answer is a flat code map.
fn code_map(raw: &str, warnings: &mut Vec<String>) -> Result<Vec<(String, Value)>, PipelineError> {
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        if let Some(end) = balanced_end(trimmed.as_bytes(), 0) {
            if let Ok(v) = serde_json::from_str::<Value>(&repair_escapes(&trimmed[..end])) {
                return Ok(entries(&v, warnings));
            }
        }
    }
    let map = extract_json(raw)?;
    Ok(map.into_iter().collect())
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses the teacher's rubric. Entries with unknown category prefixes,
/// malformed codes, duplicate codes or non-string text are dropped with a
/// warning.
pub fn parse_indicators(problem_id: &str, raw: &str) -> Result<Parsed<IndicatorSet>, PipelineError> {
    let map = extract_json(raw)?;
    let list = map
        .get(INDICATORS_KEY)
        .ok_or_else(|| PipelineError::Parse(format!("missing `{INDICATORS_KEY}` key")))?;
    let mut warnings = Vec::new();
    let mut indicators: Vec<Indicator> = Vec::new();
    for (code, text) in entries(list, &mut warnings) {
        let Some((category, ordinal)) = Indicator::parse_code(&code) else {
            warn(&mut warnings, format!("dropping indicator `{code}`: unknown or malformed category code"));
            continue;
        };
        let Value::String(text) = text else {
            warn(&mut warnings, format!("dropping indicator `{code}`: text is not a string"));
            continue;
        };
        if indicators.iter().any(|i| i.code == code) {
            warn(&mut warnings, format!("dropping duplicate indicator `{code}`"));
            continue;
        }
        indicators.push(Indicator {
            code,
            category,
            ordinal,
            text,
        });
    }
    if indicators.is_empty() {
        return Err(PipelineError::EmptyRubric);
    }
    Ok(Parsed {
        value: IndicatorSet {
            problem_id: problem_id.to_string(),
            indicators,
        },
        warnings,
    })
}

/// Parses the student's answers. Codes outside the rubric are dropped;
/// rubric codes with no answer are filled with `"I don't know"`.
pub fn parse_responses(raw: &str, indicators: &IndicatorSet) -> Result<Parsed<ResponseSet>, PipelineError> {
    let mut warnings = Vec::new();
    let mut answers = BTreeMap::new();
    for (code, v) in code_map(raw, &mut warnings)? {
        if !indicators.contains(&code) {
            warn(&mut warnings, format!("dropping response for `{code}`: not in rubric"));
            continue;
        }
        answers.insert(code, value_text(&v));
    }
    for code in indicators.codes() {
        if !answers.contains_key(code) {
            warn(&mut warnings, format!("no response for `{code}`; treating as unanswered"));
            answers.insert(code.to_string(), UNKNOWN_ANSWER.to_string());
        }
    }
    Ok(Parsed {
        value: ResponseSet { answers },
        warnings,
    })
}

fn binary(v: &Value) -> Option<u8> {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if x == 0.0 => Some(0),
            Some(x) if x == 1.0 => Some(1),
            _ => None,
        },
        Value::Bool(b) => Some(*b as u8),
        Value::String(s) => match s.trim() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// Parses the teacher's 0/1 judgments. Every rubric code must be scored.
pub fn parse_verdicts(raw: &str, indicators: &IndicatorSet) -> Result<Parsed<Verdicts>, PipelineError> {
    let mut warnings = Vec::new();
    let mut scores = BTreeMap::new();
    for (code, v) in code_map(raw, &mut warnings)? {
        if !indicators.contains(&code) {
            warn(&mut warnings, format!("dropping verdict for `{code}`: not in rubric"));
            continue;
        }
        let score = binary(&v).ok_or_else(|| PipelineError::InvalidVerdict {
            code: code.clone(),
            value: v.to_string(),
        })?;
        scores.insert(code, score);
    }
    let missing: Vec<String> = indicators
        .codes()
        .filter(|c| !scores.contains_key(*c))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::IncompleteVerdict(missing));
    }
    Ok(Parsed {
        value: Verdicts { scores },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dimension;

    fn rubric(codes: &[&str]) -> IndicatorSet {
        IndicatorSet {
            problem_id: "p".into(),
            indicators: codes
                .iter()
                .map(|c| {
                    let (category, ordinal) = Indicator::parse_code(c).unwrap();
                    Indicator {
                        code: c.to_string(),
                        category,
                        ordinal,
                        text: format!("do {c}"),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn extracts_from_fences_and_prose() {
        let raw = "Sure! Here it is:\n```json\n{\"a\": 1, \"b\": \"x}\"}\n```\nDone.";
        let m = extract_json(raw).unwrap();
        assert_eq!(m["a"], 1);
        assert_eq!(m["b"], "x}");
    }

    #[test]
    fn no_json_is_a_parse_error() {
        assert!(matches!(extract_json("no json here"), Err(PipelineError::Parse(_))));
        assert!(matches!(parse_indicators("p", "no json here"), Err(PipelineError::Parse(_))));
    }

    #[test]
    fn repairs_latex_escapes() {
        let m = extract_json(r#"{"PF2": "2x + 5 \in {1, -1}", "k\_ey": "a"}"#).unwrap();
        assert_eq!(m["PF2"], "2x + 5 \\in {1, -1}");
        assert!(m.contains_key("k_ey"));
    }

    #[test]
    fn unknown_prefix_dropped_with_warning() {
        let raw = r#"{"mathematical_proficiency_indicators": [{"CU1": "a"}, {"AD1": "b"}, {"PF1": "c"}]}"#;
        let p = parse_indicators("p", raw).unwrap();
        assert_eq!(p.value.codes().collect::<Vec<_>>(), vec!["CU1", "PF1"]);
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("AD1"));
    }

    #[test]
    fn object_form_preserves_order() {
        let raw = r#"{"mathematical_proficiency_indicators": {"SC2": "a", "CU1": "b", "AR1": "c"}}"#;
        let p = parse_indicators("p", raw).unwrap();
        assert_eq!(p.value.codes().collect::<Vec<_>>(), vec!["SC2", "CU1", "AR1"]);
        assert_eq!(p.value.indicators[0].category, Dimension::SC);
        assert_eq!(p.value.indicators[0].ordinal, 2);
    }

    #[test]
    fn empty_rubric() {
        let raw = r#"{"mathematical_proficiency_indicators": [{"XX1": "a"}]}"#;
        assert!(matches!(parse_indicators("p", raw), Err(PipelineError::EmptyRubric)));
    }

    #[test]
    fn missing_response_filled() {
        let r = rubric(&["CU1", "SC1", "PF1"]);
        let p = parse_responses(r#"{"CU1": "x", "SC1": "y"}"#, &r).unwrap();
        assert_eq!(p.value.get("PF1"), Some(UNKNOWN_ANSWER));
        assert_eq!(p.value.answers.len(), 3);
        let full = parse_responses(r#"{"CU1": "x", "SC1": "y", "PF1": "I don't know"}"#, &r).unwrap();
        assert!(full.warnings.is_empty());
        assert_eq!(full.value.answers.keys().collect::<Vec<_>>(), vec!["CU1", "PF1", "SC1"]);
    }

    #[test]
    fn verdict_domain_and_completeness() {
        let r = rubric(&["CU1", "SC3"]);
        assert!(matches!(
            parse_verdicts(r#"{"CU1": 0.5, "SC3": 1}"#, &r),
            Err(PipelineError::InvalidVerdict { .. })
        ));
        match parse_verdicts(r#"{"CU1": 1}"#, &r) {
            Err(PipelineError::IncompleteVerdict(m)) => assert_eq!(m, vec!["SC3".to_string()]),
            other => panic!("{other:?}"),
        }
        let ok = parse_verdicts(r#"[{"CU1": 1}, {"SC3": "0"}, {"ZZ9": 1}]"#, &r).unwrap();
        assert_eq!(ok.value.ones(), 1);
        assert_eq!(ok.value.zeros(), 1);
        assert_eq!(ok.warnings.len(), 1);
    }
}
