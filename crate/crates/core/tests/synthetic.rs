use std::collections::BTreeMap;

use prockt_core::dataset::{load_dataset, preprocess, save_dataset, Dimension};
use prockt_core::synthetic::{generate, SimConfig};

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn fixed_seed_is_deterministic() {
    let a = generate(&SimConfig::default()).unwrap();
    let b = generate(&SimConfig::default()).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.latent, b.latent);
    let c = generate(&SimConfig {
        seed: 7,
        ..SimConfig::default()
    })
    .unwrap();
    assert_ne!(a.dataset, c.dataset);
}

#[test]
fn mp_mean_predicts_next_correctness_on_shared_concept() {
    let cfg = SimConfig {
        mp_noise_sd: 0.0,
        ..SimConfig::default()
    };
    let out = generate(&cfg).unwrap();
    let concept = |pid: &str| out.dataset.problems[pid].kc_ids[0].clone();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for seq in &out.dataset.sequences {
        for w in seq.steps.windows(2) {
            if concept(&w[0].problem_id) != concept(&w[1].problem_id) {
                continue;
            }
            let mp = w[0].mp.as_ref().unwrap();
            let mean = Dimension::ALL.iter().map(|&d| mp.value(d).unwrap()).sum::<f64>() / 4.0;
            xs.push(mean);
            ys.push(w[1].correct as f64);
        }
    }
    assert!(xs.len() > 1000);
    let r = pearson(&xs, &ys);
    assert!(r > 0.3, "correlation {r}");
}

#[test]
fn files_round_trip_and_survive_preprocessing() {
    let out = generate(&SimConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&out.dataset, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, out.dataset);
    let (clean, report) = preprocess(&loaded);
    assert_eq!(report.kept_interactions, 300 * 50);
    assert_eq!(report.input_interactions, report.kept_interactions);
    assert_eq!(report.removed_empty_sequences, 0);
    assert_eq!(clean, loaded);
}

#[test]
fn marginal_correctness_within_response_bounds() {
    for seed in [1, 2, 3] {
        let cfg = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let n = out.dataset.num_interactions() as f64;
        let rate = out.dataset.records().filter(|r| r.correct == 1).count() as f64 / n;
        assert!(rate > cfg.guess && rate < 1.0 - cfg.slip, "{rate}");
        for step in out.latent.iter().flatten() {
            assert!(step.p_correct > cfg.guess && step.p_correct < 1.0 - cfg.slip);
        }
    }
}

#[test]
fn mastery_never_decreases_with_practice() {
    let out = generate(&SimConfig::default()).unwrap();
    for steps in &out.latent {
        let mut last: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for s in steps {
            if let Some(&(practice, theta)) = last.get(&s.concept) {
                assert_eq!(s.practice, practice + 1);
                assert!(s.theta >= theta);
            } else {
                assert_eq!(s.practice, 0);
            }
            last.insert(s.concept, (s.practice, s.theta));
        }
    }
}

#[test]
fn ratios_are_small_fractions() {
    let out = generate(&SimConfig::default()).unwrap();
    for r in out.dataset.records() {
        let mp = r.mp.as_ref().unwrap();
        for d in Dimension::ALL {
            let c = mp.count(d);
            assert!((2..=6).contains(&c.total));
            assert!(c.satisfied <= c.total);
            assert_eq!(mp.value(d).unwrap(), c.satisfied as f64 / c.total as f64);
        }
    }
}

#[test]
fn problems_map_difficulty_to_five_levels() {
    let out = generate(&SimConfig::default()).unwrap();
    let mut seen = [0usize; 6];
    for p in out.dataset.problems.values() {
        seen[p.difficulty as usize] += 1;
    }
    assert_eq!(seen[0], 0);
    assert!(seen[1..].iter().all(|&k| k > 50));
}
