//! Tape-free numerics on plain slices.

use crate::error::{PoeError, Result};

pub(crate) fn softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub(crate) fn log_softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn check_logits(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        return Err(PoeError::Invalid("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PoeError::NonFinite("softmax input"));
    }
    Ok(())
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f32]) -> Result<Vec<f32>> {
    check_logits(x)?;
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub fn log_softmax(x: &[f32]) -> Result<Vec<f32>> {
    check_logits(x)?;
    let mut out = vec![0.0; x.len()];
    log_softmax_into(x, &mut out);
    Ok(out)
}

/// `D_KL(p ‖ q)` in nats for two probability vectors.
pub fn kl_div(p: &[f32], q: &[f32]) -> Result<f32> {
    if p.len() != q.len() || p.is_empty() {
        return Err(PoeError::Shape(format!("kl_div lengths {} and {}", p.len(), q.len())));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(PoeError::Domain(format!("{name} is not a probability vector")));
        }
        let s: f64 = v.iter().map(|&x| x as f64).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(PoeError::Domain(format!("{name} sums to {s}")));
        }
    }
    let mut total = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(PoeError::Domain("q is zero where p is positive".into()));
            }
            total += pi as f64 * ((pi as f64).ln() - (qi as f64).ln());
        }
    }
    Ok(total.max(0.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_ln3_gap_gives_quarter_and_three_quarters() {
        for c in [-7.5f32, 0.0, 3.25, 40.0] {
            let p = softmax(&[c, c + 3f32.ln()]).unwrap();
            assert!((p[0] - 0.25).abs() < 1e-6, "{p:?}");
            assert!((p[1] - 0.75).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-7);
        assert!(p[1] >= 0.0 && p[1] < 1e-30);
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        assert!(softmax(&[]).is_err());
        assert!(matches!(softmax(&[1.0, f32::NAN]), Err(PoeError::NonFinite(_))));
        assert!(softmax(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = [0.1, 0.2, 0.7];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_half_vs_quarter() {
        // 0.5·ln2 + 0.5·ln(2/3)
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_div(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((got as f64 - want).abs() < 1e-6);
        assert!((got - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_support_violation_is_domain_error() {
        assert!(matches!(kl_div(&[1.0, 0.0], &[0.0, 1.0]), Err(PoeError::Domain(_))));
    }
}
