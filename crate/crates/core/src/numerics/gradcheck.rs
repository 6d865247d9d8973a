use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, CmtrError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Which coordinates of each input are perturbed.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    All,
    /// At most `per_tensor` coordinates per input, drawn without replacement.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Central-difference check of a scalar function of one tensor.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, CoordSelection::All)?;
    Ok(report.max_rel_error)
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    ensure!(tape.value(out).len() == 1, "grad_check: function output is not scalar");
    Ok(tape.item(out).as_f64())
}

/// Central-difference check of a scalar function of several tensors.
///
/// The function is evaluated twice at the base point first; differing
/// results are reported as [`CmtrError::UnreliableCheck`].
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, coords: CoordSelection) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    ensure!((1e-7..=1e-3).contains(&eps), "grad_check: eps {} outside [1e-7, 1e-3]", eps);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    ensure!(tape.value(out).len() == 1, "grad_check: function output is not scalar");
    let base = tape.item(out).as_f64();
    let grads = tape.backward(out)?;

    let again = evaluate(&f, inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(CmtrError::UnreliableCheck(format!("f(x) gave {} then {}", base, again)));
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    let mut rng = match coords {
        CoordSelection::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CoordSelection::All => None,
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.dense(vars[ti], input.len());
        let picks: Vec<usize> = match (&coords, rng.as_mut()) {
            (CoordSelection::Sample { per_tensor, .. }, Some(r)) if *per_tensor < input.len() => {
                let mut v = sample(r, input.len(), *per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        for c in picks {
            let orig = input.data()[c];
            probe[ti].data_mut()[c] = orig + T::of(eps);
            let plus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[c] = orig - T::of(eps);
            let minus = evaluate(&f, &probe)?;
            probe[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[c].as_f64();
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(CmtrError::NonFinite(format!("grad_check input {} coord {}", ti, c)));
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, c));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero() {
        let x = Tensor::<f64>::scalar(0.0);
        let err = grad_check(|t, v| Ok(t.softplus(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{}", err);
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.square(v);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap(), &[6.0]);
        let err = grad_check(|t, v| Ok(t.square(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.square(v)), &x, 1e-2).is_err());
        assert!(grad_check(|t, v| Ok(t.square(v)), &x, 1e-9).is_err());
    }

    #[test]
    fn nondeterministic_function_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::<f64>::scalar(1.0);
        let res = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                Ok(t.add_scalar(v, calls.get()))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(CmtrError::UnreliableCheck(_))));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at a kink: analytic 0 vs numeric 0.5
        let x = Tensor::<f64>::scalar(0.0);
        let err = grad_check(|t, v| Ok(t.relu(v)), &x, 1e-5).unwrap();
        assert!((err - 0.5).abs() < 1e-9);
    }
}
