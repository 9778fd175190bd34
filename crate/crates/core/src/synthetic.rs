//! Simulated students with latent per-concept mastery, producing data in
//! the same format as real annotated interactions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    Dataset, DatasetError, Dimension, DimensionCount, InteractionRecord, MpRatios, Problem, QuestionType,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_students: usize,
    pub num_problems: usize,
    pub num_concepts: usize,
    pub steps_per_student: usize,
    /// Mastery gain per practice of a concept.
    pub learn_rate: f64,
    pub guess: f64,
    pub slip: f64,
    pub mp_noise_sd: f64,
    pub seed: u64,
    /// Share of mastery variance that is a per-student ability common to
    /// all concepts.
    pub ability_share: f64,
    /// Probability that the next problem stays on the current concept.
    pub concept_stickiness: f64,
    /// Standard deviation of problem difficulty `b_q`.
    pub difficulty_sd: f64,
    /// Logistic slope applied to `θ − b_q`.
    pub discrimination: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_students: 300,
            num_problems: 500,
            num_concepts: 40,
            steps_per_student: 50,
            learn_rate: 0.08,
            guess: 0.15,
            slip: 0.08,
            mp_noise_sd: 0.08,
            seed: 42,
            ability_share: 0.5,
            concept_stickiness: 0.5,
            difficulty_sd: 0.5,
            discrimination: 1.7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.num_students == 0 || self.num_problems == 0 || self.num_concepts == 0 || self.steps_per_student == 0 {
            return bad("counts must be positive");
        }
        if self.num_problems < self.num_concepts {
            return bad("need at least one problem per concept");
        }
        for (name, p) in [
            ("guess", self.guess),
            ("slip", self.slip),
            ("ability_share", self.ability_share),
            ("concept_stickiness", self.concept_stickiness),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.guess + self.slip >= 1.0 {
            return bad("guess + slip must be below 1");
        }
        if !(self.learn_rate >= 0.0 && self.mp_noise_sd >= 0.0 && self.difficulty_sd >= 0.0 && self.discrimination > 0.0)
        {
            return bad("learn_rate, mp_noise_sd and difficulty_sd must be >= 0, discrimination > 0");
        }
        Ok(())
    }
}

/// Latent quantities behind one generated interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStep {
    pub concept: usize,
    /// Mastery of the practised concept before this attempt.
    pub theta: f64,
    pub difficulty: f64,
    pub p_correct: f64,
    /// Number of earlier practices of this concept.
    pub practice: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    /// Per student (in dataset order), per step.
    pub latent: Vec<Vec<LatentStep>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps a difficulty to the 1..=5 scale by quintile boundaries of its
/// distribution.
fn difficulty_level(b: f64, sd: f64) -> u8 {
    if sd == 0.0 {
        return 3;
    }
    let z = b / sd;
    match z {
        z if z < -0.8416 => 1,
        z if z < -0.2533 => 2,
        z if z < 0.2533 => 3,
        z if z < 0.8416 => 4,
        _ => 5,
    }
}

fn process_lines<R: Rng>(rng: &mut R, problem: usize, correct: bool) -> String {
    let n = rng.random_range(5..=8);
    let mut lines = Vec::with_capacity(n);
    lines.push(format!("Read problem {problem} and list the given values"));
    for i in 1..n - 1 {
        let a: u32 = rng.random_range(1..50);
        let b: u32 = rng.random_range(1..50);
        lines.push(format!("step {i}: {a} + {b} = {}", a + b));
    }
    lines.push(if correct { "Check the result: consistent".into() } else { "Answer chosen without checking".into() });
    lines.join("\n")
}

/// Generates problems and student sequences. Mastery starts at
/// `sqrt(ρ)·a_s + sqrt(1−ρ)·u_{s,c}` with standard normal parts, so each
/// `θ[s,c] ~ N(0, 1)`, and grows by `learn_rate` per practice.
pub fn generate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.mp_noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");

    let concept_name = |c: usize| format!("C{:03}", c + 1);
    let mut problems = Vec::with_capacity(cfg.num_problems);
    let mut difficulty = Vec::with_capacity(cfg.num_problems);
    let mut by_concept: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_concepts];
    for i in 0..cfg.num_problems {
        let c = i % cfg.num_concepts;
        let b = cfg.difficulty_sd * std_normal.sample(&mut rng);
        let multiple_choice = rng.random_bool(0.5);
        let answer = rng.random_range(1..=5u32);
        problems.push(Problem {
            problem_id: format!("P{:04}", i + 1),
            kc_ids: vec![concept_name(c)],
            text: format!("Synthetic problem {} on concept {}.", i + 1, concept_name(c)),
            solution_text: None,
            answer: answer.to_string(),
            question_type: if multiple_choice { QuestionType::MultipleChoice } else { QuestionType::ShortAnswer },
            difficulty: difficulty_level(b, cfg.difficulty_sd),
            options: if multiple_choice { (1..=5).map(|k| format!("option {k}")).collect() } else { vec![] },
        });
        difficulty.push(b);
        by_concept[c].push(i);
    }

    let (wa, wu) = (cfg.ability_share.sqrt(), (1.0 - cfg.ability_share).sqrt());
    let mut records = Vec::with_capacity(cfg.num_students * cfg.steps_per_student);
    let mut latent = Vec::with_capacity(cfg.num_students);
    for s in 0..cfg.num_students {
        let student_id = format!("S{:04}", s + 1);
        let ability = std_normal.sample(&mut rng);
        let mut theta: Vec<f64> = (0..cfg.num_concepts)
            .map(|_| wa * ability + wu * std_normal.sample(&mut rng))
            .collect();
        let mut practice = vec![0usize; cfg.num_concepts];
        let mut concept = rng.random_range(0..cfg.num_concepts);
        let mut time = 1_700_000_000_000i64 + s as i64 * 86_400_000;
        let mut steps = Vec::with_capacity(cfg.steps_per_student);
        for t in 0..cfg.steps_per_student {
            if t > 0 && !rng.random_bool(cfg.concept_stickiness) {
                concept = rng.random_range(0..cfg.num_concepts);
            }
            let pool = &by_concept[concept];
            let q = pool[rng.random_range(0..pool.len())];
            let th = theta[concept];
            let skill = sigmoid(cfg.discrimination * (th - difficulty[q]));
            let p = cfg.guess + (1.0 - cfg.guess - cfg.slip) * skill;
            let correct = rng.random_bool(p);

            let mut counts = [DimensionCount::default(); 4];
            for d in Dimension::ALL {
                let e = if cfg.mp_noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = (skill + e).clamp(0.0, 1.0);
                let total = rng.random_range(2..=6u32);
                let satisfied = (v * total as f64).round() as u32;
                counts[d.index()] = DimensionCount { satisfied, total };
            }
            let mp = MpRatios::from_counts(counts)?;

            let answer: u32 = problems[q].answer.parse().expect("numeric answer");
            let selected = if correct { answer } else { (answer % 5) + 1 };
            time += rng.random_range(60_000..600_000);
            records.push(InteractionRecord {
                student_id: student_id.clone(),
                problem_id: problems[q].problem_id.clone(),
                selected_answer: selected.to_string(),
                correct: correct as u8,
                duration: rng.random_range(20.0..300.0f64).round(),
                process_text: process_lines(&mut rng, q + 1, correct),
                timestamp: time,
                mp: Some(mp),
            });
            steps.push(LatentStep {
                concept,
                theta: th,
                difficulty: difficulty[q],
                p_correct: p,
                practice: practice[concept],
            });
            theta[concept] += cfg.learn_rate;
            practice[concept] += 1;
        }
        latent.push(steps);
    }
    let dataset = Dataset::from_parts(problems, records)?;
    Ok(SimOutput { dataset, latent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difficulty_levels_cover_scale() {
        assert_eq!(difficulty_level(-2.0, 1.0), 1);
        assert_eq!(difficulty_level(0.0, 1.0), 3);
        assert_eq!(difficulty_level(2.0, 1.0), 5);
        assert_eq!(difficulty_level(0.7, 0.0), 3);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let cfg = SimConfig {
            guess: 0.6,
            slip: 0.5,
            ..SimConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
