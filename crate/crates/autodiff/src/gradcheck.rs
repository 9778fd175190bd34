//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const FD_EPS: f64 = 1e-4;
/// Pass threshold on the worst relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor so that entries whose true gradient is ~0 are compared
/// absolutely instead of dividing round-off by round-off.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `param[index]` with the worst error.
    pub worst: Option<String>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares `backward` against central differences for every scalar of
/// every parameter in `store`. `f` must rebuild the same scalar function
/// on a fresh tape each call (including any randomness it uses).
pub fn check_params<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::with_training(true);
    let out = f(&mut tape, store)?;
    tape.backward(out, store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store, &mut f)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store, &mut f)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(format!("{}[{i}] analytic={a:e} numeric={numeric:e}", store.get(id).name));
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::with_training(true);
    let out = f(&mut tape, store)?;
    tape.value(out).item()
}

/// Every tape operation covered by [`check_op`].
pub const OPS: &[&str] = &[
    "matmul",
    "matmul_batched",
    "matmul_broadcast",
    "add",
    "add_broadcast",
    "mul",
    "mul_broadcast",
    "scale",
    "concat",
    "slice",
    "reshape",
    "permute",
    "embedding",
    "sigmoid",
    "tanh",
    "relu",
    "clamp",
    "softmax",
    "layer_norm",
    "dropout",
    "sum",
    "masked_mean",
    "bce",
    "masked_mse",
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values in ±[0.05, 1], keeping clear of kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect();
    m[0] = 1.0;
    m
}

/// Runs a finite-difference check of one named operation on random inputs
/// drawn from `seed`. The op output is reduced to a scalar through a random
/// fixed weighting so every output entry contributes a distinct gradient.
pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let input = |store: &mut ParamStore, label: &str, t: Tensor| store.insert(label, t);

    macro_rules! u {
        ($($d:expr),+) => { random_tensor(&mut rng, &[$($d),+], -1.0, 1.0) };
    }

    let a;
    let mut b = None;
    match name {
        "matmul" => {
            a = input(&mut store, "a", u!(3, 4))?;
            b = Some(input(&mut store, "b", u!(4, 2))?);
        }
        "matmul_batched" => {
            a = input(&mut store, "a", u!(2, 3, 4))?;
            b = Some(input(&mut store, "b", u!(2, 4, 2))?);
        }
        "matmul_broadcast" => {
            a = input(&mut store, "a", u!(2, 3, 4))?;
            b = Some(input(&mut store, "b", u!(4, 5))?);
        }
        "add" | "mul" => {
            a = input(&mut store, "a", u!(3, 4))?;
            b = Some(input(&mut store, "b", u!(3, 4))?);
        }
        "add_broadcast" | "mul_broadcast" => {
            a = input(&mut store, "a", u!(2, 3, 4))?;
            b = Some(input(&mut store, "b", u!(3, 4))?);
        }
        "concat" => {
            a = input(&mut store, "a", u!(2, 3))?;
            b = Some(input(&mut store, "b", u!(2, 2))?);
        }
        "relu" => a = input(&mut store, "a", away_from_zero(&mut rng, &[3, 4]))?,
        "clamp" => {
            // |x| in [0.05, 1] with the clamp window at ±0.5 would put some
            // entries on the boundary only with probability zero
            let mut t = away_from_zero(&mut rng, &[3, 4]);
            for v in t.data_mut() {
                if (v.abs() - 0.5).abs() < 0.01 {
                    *v *= 1.1;
                }
            }
            a = input(&mut store, "a", t)?;
        }
        "bce" => a = input(&mut store, "a", random_tensor(&mut rng, &[6], 0.05, 0.95))?,
        "embedding" => a = input(&mut store, "a", u!(5, 3))?,
        "slice" => a = input(&mut store, "a", u!(3, 5))?,
        "permute" | "reshape" => a = input(&mut store, "a", u!(2, 3, 4))?,
        "sum" | "masked_mean" | "masked_mse" => a = input(&mut store, "a", u!(6))?,
        _ => a = input(&mut store, "a", u!(3, 4))?,
    }

    let targets_bin: Vec<f64> = (0..6).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let targets_real = random_tensor(&mut rng, &[6], 0.0, 1.0).into_data();
    let mask = random_mask(&mut rng, 6);
    let weights_seed = rng.random::<u64>();
    let dropout_seed = rng.random::<u64>();
    let name = name.to_string();

    check_params(&mut store, FD_EPS, |tape, store| {
        let av = tape.param(store, a);
        let bv = b.map(|id| tape.param(store, id));
        let out = match name.as_str() {
            "matmul" | "matmul_batched" | "matmul_broadcast" => tape.matmul(av, bv.unwrap())?,
            "add" | "add_broadcast" => tape.add(av, bv.unwrap())?,
            "mul" | "mul_broadcast" => tape.mul(av, bv.unwrap())?,
            "scale" => tape.scale(av, -1.7),
            "concat" => tape.concat(&[av, bv.unwrap()], 1)?,
            "slice" => tape.slice(av, 1, 1, 3)?,
            "reshape" => tape.reshape(av, &[6, 4])?,
            "permute" => tape.permute(av, &[2, 0, 1])?,
            "embedding" => tape.embedding(av, &[0, 2, 2, 4, 1, 2], &[2, 3])?,
            "sigmoid" => tape.sigmoid(av),
            "tanh" => tape.tanh(av),
            "relu" => tape.relu(av),
            "clamp" => tape.clamp(av, -0.5, 0.5),
            "softmax" => tape.softmax(av),
            "layer_norm" => tape.layer_norm(av, 1e-5),
            "dropout" => {
                let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
                tape.dropout(av, 0.3, &mut drng)?
            }
            "sum" => tape.sum(av),
            "masked_mean" => tape.masked_mean(av, &mask)?,
            "bce" => tape.bce(av, &targets_bin, &mask)?.var,
            "masked_mse" => tape.masked_mse(av, &targets_real, &mask)?.var,
            other => {
                return Err(crate::AutodiffError::InvalidArgument(format!("no gradient check for op `{other}`")));
            }
        };
        let shape = tape.shape(out).to_vec();
        let mut wrng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = tape.constant(random_tensor(&mut wrng, &shape, -1.0, 1.0));
        let weighted = tape.mul(out, w)?;
        Ok(tape.sum(weighted))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_one_seed() {
        for op in OPS {
            let r = check_op(op, 1).unwrap();
            assert!(r.passed(MAX_REL_ERROR), "{op}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("nope", 0).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x*x evaluated with a constant copy of x: analytic gradient
        // sees only one factor, so the check must flag it.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.5)).unwrap();
        let id = store.id("x").unwrap();
        let r = check_params(&mut store, FD_EPS, |tape, store| {
            let x = tape.param(store, id);
            let c = tape.constant(store.get(id).value.clone());
            tape.mul(x, c)
        })
        .unwrap();
        assert!(!r.passed(MAX_REL_ERROR));
    }
}
