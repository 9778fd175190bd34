//! Teacher–student–teacher extraction of MP ratios from solution text.
//!
//! 1. A teacher model turns the problem into a rubric of indicators, each
//!    tagged with one of the four proficiency dimensions.
//! 2. A student model answers every indicator from the student's written
//!    solution, keeping the student's mistakes.
//! 3. A teacher model scores each answer 0/1; per-dimension ratios are the
//!    fraction of satisfied indicators.

mod cache;
mod client;
mod parse;
mod pipeline;
mod prompts;
mod ratios;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dimension;

pub use cache::CompletionCache;
pub use client::{ChatClient, ChatParams, ClientError, HttpChatClient, MockChatClient};
pub use parse::{extract_json, parse_indicators, parse_responses, parse_verdicts, Parsed};
pub use pipeline::{
    interaction_key, load_audit, run_pipeline, AuditRecord, AuditStatus, FlaggedInteraction, PipelineOptions,
    PipelineReport, Stage,
};
pub use prompts::{
    indicator_list_text, indicator_map_text, option_string, render_eval_prompt, render_indicator_prompt,
    render_student_prompt, response_list_text, unit_title, EVALUATION_TEMPLATE, INDICATOR_TEMPLATE, STUDENT_TEMPLATE,
};
pub use ratios::compute_mp_ratios;

/// Answer text meaning the solution holds no evidence for an indicator.
pub const UNKNOWN_ANSWER: &str = "I don't know";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no JSON object found in completion")]
    Parse(String),
    #[error("rubric contains no valid indicators")]
    EmptyRubric,
    #[error("verdicts missing for {}", .0.join(", "))]
    IncompleteVerdict(Vec<String>),
    #[error("verdict for {code} must be 0 or 1, got {value}")]
    InvalidVerdict { code: String, value: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("cache {path}: {source}")]
    Cache {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One rubric question, e.g. `PF2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub code: String,
    pub category: Dimension,
    pub ordinal: u32,
    pub text: String,
}

impl Indicator {
    /// Splits a code like `SC12` into its dimension and ordinal. Returns
    /// `None` for unknown prefixes (such as `AD1`) or malformed codes.
    pub fn parse_code(code: &str) -> Option<(Dimension, u32)> {
        if code.len() < 3 || !code.is_char_boundary(2) {
            return None;
        }
        let (prefix, digits) = code.split_at(2);
        let category = Dimension::from_code(prefix)?;
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let ordinal: u32 = digits.parse().ok()?;
        (ordinal > 0).then_some((category, ordinal))
    }
}

/// Rubric for one problem, in the order the teacher produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorSet {
    pub problem_id: String,
    pub indicators: Vec<Indicator>,
}

impl IndicatorSet {
    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.indicators.iter().map(|i| i.code.as_str())
    }

    pub fn contains(&self, code: &str) -> bool {
        self.indicators.iter().any(|i| i.code == code)
    }

    pub fn len(&self) -> usize {
        self.indicators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicators.is_empty()
    }

    pub fn count_by_dimension(&self) -> BTreeMap<Dimension, usize> {
        let mut out = BTreeMap::new();
        for i in &self.indicators {
            *out.entry(i.category).or_insert(0) += 1;
        }
        out
    }
}

/// Student-stage answers keyed by indicator code.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResponseSet {
    pub answers: BTreeMap<String, String>,
}

impl ResponseSet {
    pub fn get(&self, code: &str) -> Option<&str> {
        self.answers.get(code).map(String::as_str)
    }
}

/// Teacher-stage 0/1 judgments keyed by indicator code.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Verdicts {
    pub scores: BTreeMap<String, u8>,
}

impl Verdicts {
    pub fn ones(&self) -> usize {
        self.scores.values().filter(|&&v| v == 1).count()
    }

    pub fn zeros(&self) -> usize {
        self.scores.values().filter(|&&v| v == 0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_parsing() {
        assert_eq!(Indicator::parse_code("CU1"), Some((Dimension::CU, 1)));
        assert_eq!(Indicator::parse_code("AR12"), Some((Dimension::AR, 12)));
        assert_eq!(Indicator::parse_code("AD1"), None);
        assert_eq!(Indicator::parse_code("CU"), None);
        assert_eq!(Indicator::parse_code("CU0"), None);
        assert_eq!(Indicator::parse_code("CU1a"), None);
        assert_eq!(Indicator::parse_code("cu1"), None);
        assert_eq!(Indicator::parse_code("C\u{e9}1"), None);
    }
}
