use prockt_autodiff::Tape;
use prockt_core::dataset::Batch;
use prockt_core::kt_models::*;
use prockt_core::training::{batch_loss, gradcheck_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NQ: usize = 9;
const NC: usize = 4;
const T: usize = 10;

fn small(backbone: Backbone, variant: Variant, seed: u64) -> KtModel {
    let cfg = ModelConfig {
        embed_dim: 12,
        attention_heads: 3,
        max_len: T,
        dropout: 0.0,
        seed,
        ..ModelConfig::new(backbone, variant, NQ, NC)
    };
    KtModel::build(cfg).unwrap()
}

fn batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<usize> = (0..3).map(|_| rng.random_range(2..=T)).collect();
    random_batch(&mut rng, &lengths, T, NQ, NC)
}

/// Independent tally of every declared layer's shape.
fn enumerate_layers(c: &ModelConfig) -> usize {
    let (d, q, k, t) = (c.embed_dim, c.num_questions, c.num_concepts, c.max_len);
    let mut layers: Vec<(usize, usize)> = vec![
        (q, d),     // question embedding
        (k, d),     // concept embedding
        (2 * k, d), // concept x response embedding
        (2 * d, d), // readout weight
        (1, d),     // readout bias
        (d, 1),     // head weight
        (1, 1),     // head bias
    ];
    match c.backbone {
        Backbone::Recurrent => layers.extend([(d, 4 * d), (d, 4 * d), (1, 4 * d)]),
        Backbone::Attention => {
            layers.push((t, d));
            for _ in 0..6 {
                layers.extend([(d, d), (1, d)]);
            }
        }
    }
    if c.variant == Variant::Statuskt {
        layers.extend([(8, d), (1, d), (d, 4), (1, 4)]);
    }
    layers.iter().map(|(a, b)| a * b).sum()
}

#[test]
fn parameter_counts_match_closed_form() {
    for backbone in Backbone::ALL {
        for variant in Variant::ALL {
            let cfg = ModelConfig::new(backbone, variant, 500, 40);
            let model = KtModel::build(cfg.clone()).unwrap();
            assert_eq!(model.num_parameters(), enumerate_layers(&cfg), "{backbone}/{variant}");
            assert_eq!(model.num_parameters(), cfg.expected_parameter_count(), "{backbone}/{variant}");
        }
    }
    let rec = ModelConfig::new(Backbone::Recurrent, Variant::Original, 500, 40);
    assert_eq!(rec.embed_dim, 200);
    // 500·200 + 40·200 + 80·200 + 2·200² + 200 + 201 + 8·200² + 800
    assert_eq!(rec.expected_parameter_count(), 525_201);
}

#[test]
fn shared_parameters_identical_across_variants() {
    for backbone in Backbone::ALL {
        let a = small(backbone, Variant::Original, 7);
        let b = small(backbone, Variant::Statuskt, 7);
        for p in a.store.iter() {
            let q = b.store.by_name(&p.name).unwrap();
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        assert_eq!(b.store.len(), a.store.len() + 4);
    }
}

fn perturb_future(b: &Batch, t: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut p = b.clone();
    for row in 0..b.num_sequences {
        let base = row * b.max_len;
        // permute the step contents after t
        let mut idx: Vec<usize> = (t + 1..b.max_len).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        for (k, &src) in (t + 1..b.max_len).zip(&idx) {
            p.question_ids[base + k] = b.question_ids[base + src];
            p.concept_ids[base + k] = b.concept_ids[base + src];
            p.correctness[base + k] = 1.0 - b.correctness[base + src];
            for f in 0..8 {
                p.mp_inputs[(base + k) * 8 + f] = rng.random();
            }
            p.target_question_ids[base + k] = rng.random_range(0..NQ);
            p.target_concept_ids[base + k] = rng.random_range(0..NC);
        }
    }
    p
}

#[test]
fn future_steps_do_not_leak() {
    for backbone in Backbone::ALL {
        for variant in Variant::ALL {
            let model = small(backbone, variant, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for s in 0..50 {
                let b = batch(100 + s);
                let t = rng.random_range(0..T - 1);
                let before = model.predict(&b).unwrap();
                let after = model.predict(&perturb_future(&b, t, &mut rng)).unwrap();
                for row in 0..b.num_sequences {
                    for k in 0..=t {
                        let cell = row * T + k;
                        if b.step_mask[cell] == 0.0 {
                            continue;
                        }
                        assert_eq!(before.r_pred[cell], after.r_pred[cell], "{backbone}/{variant} row {row} t {k}");
                        if let (Some(x), Some(y)) = (&before.mp_pred, &after.mp_pred) {
                            assert_eq!(x[cell * 4..cell * 4 + 4], y[cell * 4..cell * 4 + 4]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn original_ignores_mp_inputs() {
    for backbone in Backbone::ALL {
        let model = small(backbone, Variant::Original, 5);
        let b = batch(1);
        let mut c = b.clone();
        c.mp_inputs.iter_mut().for_each(|x| *x = 1.0 - *x);
        let p = model.predict(&b).unwrap();
        assert_eq!(p.r_pred, model.predict(&c).unwrap().r_pred);
        assert!(p.mp_pred.is_none());
    }
}

#[test]
fn zeroed_mp_path_matches_original() {
    for backbone in Backbone::ALL {
        let original = small(backbone, Variant::Original, 9);
        let mut fused = small(backbone, Variant::Statuskt, 9);
        for name in fused.mp_parameter_names() {
            fused.store.by_name_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let b = batch(4);
        let p = fused.predict(&b).unwrap();
        assert_eq!(p.r_pred, original.predict(&b).unwrap().r_pred);
        // zeroed MP head emits exactly 0.5
        assert!(p.mp_pred.unwrap().iter().all(|&x| x == 0.5));
    }
}

#[test]
fn outputs_in_open_unit_interval() {
    for backbone in Backbone::ALL {
        let model = small(backbone, Variant::Statuskt, 2);
        let p = model.predict(&batch(8)).unwrap();
        assert!(p.r_pred.iter().chain(p.mp_pred.as_ref().unwrap()).all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(p.r_pred.len(), 3 * T);
        assert_eq!(p.mp_pred.unwrap().len(), 3 * T * 4);
    }
}

#[test]
fn mp_projection_receives_gradient() {
    for backbone in Backbone::ALL {
        let mut failures = 0;
        for seed in 0..20 {
            let mut model = small(backbone, Variant::Statuskt, seed);
            let b = batch(1000 + seed);
            assert!(b.target_mp_mask.iter().zip(b.valid_mask.iter().flat_map(|v| [v; 4])).any(|(m, v)| m * v > 0.0));
            let mut tape = Tape::with_training(true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let loss = batch_loss(&model, &model.store, &mut tape, &b, 0.5, &mut rng).unwrap();
            tape.backward(loss, &mut model.store).unwrap();
            let g = &model.store.by_name("mp_proj.w").unwrap().grad;
            if g.data().iter().all(|&x| x == 0.0) {
                failures += 1;
            }
        }
        assert_eq!(failures, 0, "{backbone}");
    }
}

#[test]
fn all_padding_batch_has_zero_loss() {
    for backbone in Backbone::ALL {
        let model = small(backbone, Variant::Statuskt, 1);
        let b = random_batch(&mut ChaCha8Rng::seed_from_u64(0), &[0, 0], T, NQ, NC);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = batch_loss(&model, &model.store, &mut tape, &b, 0.5, &mut rng).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }
}

#[test]
fn max_len_mismatch_is_rejected() {
    let model = small(Backbone::Recurrent, Variant::Original, 1);
    let b = random_batch(&mut ChaCha8Rng::seed_from_u64(0), &[3], T + 1, NQ, NC);
    assert!(matches!(model.predict(&b), Err(ModelError::MaxLen { .. })));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for backbone in Backbone::ALL {
        for variant in Variant::ALL {
            let report = gradcheck_model(backbone, variant, 17).unwrap();
            assert!(report.passed(1e-4), "{backbone}/{variant}: {report:?}");
            assert!(report.checked > 100);
        }
    }
}
