use prockt_autodiff::gradcheck::{check_op, MAX_REL_ERROR, OPS};
use prockt_autodiff::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn all_ops_match_finite_differences_over_100_seeds() {
    for op in OPS {
        for seed in 0..100 {
            let r = check_op(op, seed).unwrap();
            assert!(r.passed(MAX_REL_ERROR), "{op} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn identical_seeds_give_identical_dropout_masks() {
    use rand::SeedableRng;
    let run = || {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::with_training(true);
        let x = tape.constant(Tensor::full(&[64], 1.0));
        let y = tape.dropout(x, 0.3, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn outputs_stay_finite_on_finite_inputs(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![3, 4], data).unwrap());
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        let sm = tape.softmax(x);
        let ln = tape.layer_norm(x, 1e-5);
        let l = tape.bce(s, &[1.0; 12], &[1.0; 12]).unwrap();
        for v in [s, t, sm, ln, l.var] {
            prop_assert!(tape.value(v).all_finite());
        }
        tape.backward(l.var, &mut ParamStore::new()).unwrap();
        prop_assert!(tape.grad(x).unwrap().iter().all(|g| g.is_finite()));
    }
}
