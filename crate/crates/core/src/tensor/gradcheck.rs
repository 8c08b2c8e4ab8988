//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Relative errors below this magnitude are measured against it instead of
/// against the (tiny) gradient itself.
pub const REL_ERR_FLOOR: f32 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, REL_ERR_FLOOR)`
    pub max_rel_err: f32,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
    /// Coordinates within `10·eps` of zero, where kinks (relu, |·|) may sit.
    /// They are skipped rather than counted as failures.
    pub excluded: Vec<usize>,
}

impl GradCheck {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel_err < tol
    }
}

fn eval<F>(f: &F, input: &Tensor, record: bool) -> Result<(Tape, Var, Var)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = if record { Tape::new() } else { Tape::inference() };
    let x = tape.leaf(input.clone())?;
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return invalid(format!("grad_check needs a scalar output, got {:?}", tape.value(y).shape()));
    }
    Ok((tape, x, y))
}

/// Compares the tape gradient of `scalar_fn` at `input` with
/// `(f(x+eps) − f(x−eps)) / (2·eps)` coordinate by coordinate, where `f` is
/// `scalar_fn` itself evaluated in f32.
///
/// f32 round-off limits this to loose tolerances; [`grad_check_reference`]
/// takes a 64-bit evaluation of the same function for tight checks.
pub fn grad_check<F>(scalar_fn: F, input: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let f32_eval = |x: &[f64]| -> Result<f64> {
        let t = Tensor::new(input.shape().to_vec(), x.iter().map(|&v| v as f32).collect())?;
        let (tape, _, y) = eval(&scalar_fn, &t, false)?;
        Ok(tape.value(y).item() as f64)
    };
    check(&scalar_fn, f32_eval, input, eps)
}

/// As [`grad_check`], but the central differences are taken on `reference`,
/// an independent 64-bit evaluation of the function the tape computes.
pub fn grad_check_reference<F, R>(scalar_fn: F, reference: R, input: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Fn(&[f64]) -> f64,
{
    check(&scalar_fn, |x: &[f64]| Ok(reference(x)), input, eps)
}

fn check<F, R>(scalar_fn: &F, numeric_fn: R, input: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return invalid("grad_check eps must be positive");
    }
    let (tape, x, y) = eval(scalar_fn, input, true)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let mut numeric = vec![0.0f32; input.len()];
    let mut excluded = Vec::new();
    let mut max_rel_err = 0.0f32;
    let mut probe: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let h = eps as f64;
    for i in 0..input.len() {
        let x0 = probe[i];
        if x0.abs() <= 10.0 * h {
            excluded.push(i);
            continue;
        }
        probe[i] = x0 + h;
        let plus = numeric_fn(&probe)?;
        probe[i] = x0 - h;
        let minus = numeric_fn(&probe)?;
        probe[i] = x0;

        let n = ((plus - minus) / (2.0 * h)) as f32;
        numeric[i] = n;
        let a = analytic[i];
        let denom = a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        max_rel_err = max_rel_err.max((a - n).abs() / denom);
    }
    Ok(GradCheck {
        max_rel_err,
        analytic,
        numeric,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let a = [0.5f32, -1.25, 2.0];
        let x = Tensor::from_vec(vec![0.3, -0.7, 0.9]);
        let r = grad_check(|t, v| t.weighted_sum(v, &a), &x, 1e-3).unwrap();
        assert_eq!(r.analytic, a.to_vec());
        assert!(r.max_rel_err < 1e-3, "{}", r.max_rel_err);
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let x = Tensor::from_vec(vec![0.0, 0.5, -0.5]);
        let r = grad_check(
            |t, v| {
                let y = t.relu(v)?;
                t.weighted_sum(y, &[1.0, 1.0, 1.0])
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert!(r.passes(1e-3));
    }

    #[test]
    fn reference_path_is_tight_on_a_quadratic() {
        // f(x) = Σ x², evaluated in f64 for the differences
        let x = Tensor::from_vec(vec![0.3, -0.7, 0.9]);
        let r = grad_check_reference(
            |t, v| {
                let w = t.value(v).data().to_vec();
                t.weighted_sum(v, &w)
            },
            |x| x.iter().map(|v| v * v).sum(),
            &x,
            1e-3,
        )
        .unwrap();
        // the tape treats the weights as constants, so its gradient is x, not 2x
        assert!((r.numeric[0] - 0.6).abs() < 1e-5);
        assert!((r.analytic[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::from_vec(vec![0.3, 0.4]);
        assert!(grad_check(|t, v| t.scale(v, 2.0), &x, 1e-3).is_err());
    }
}

