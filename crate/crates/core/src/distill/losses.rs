//! Distillation objectives. Teacher logits are plain tensors, so gradients
//! reach the student only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, PoeError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which terms of the conditional objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkdTerms {
    /// `soft + α·scale`
    #[default]
    Both,
    /// `soft`
    SoftOnly,
    /// `α·scale`
    ScaleOnly,
}

fn check_temperature(t: f32) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return invalid(format!("temperature must be positive, got {t}"));
    }
    Ok(())
}

/// Columns `classes` of a `[N, K]` logit matrix.
pub fn sub_logits(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return shape_err(format!("sub_logits of {:?}", logits.shape()));
    }
    let k = logits.dim(1);
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(PoeError::Domain(format!("class index {bad} outside 0..{k}")));
    }
    let n = logits.dim(0);
    let mut data = Vec::with_capacity(n * classes.len());
    for i in 0..n {
        let row = logits.row(i);
        data.extend(classes.iter().map(|&c| row[c]));
    }
    Tensor::new(vec![n, classes.len()], data)
}

/// `softmax(t/T)` rounded exactly as the student side computes its
/// log-probabilities, so identical logits give a zero divergence.
fn softened(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    let cols = logits.dim(1);
    let inv = 1.0 / temperature;
    let scaled: Vec<f32> = logits.data().iter().map(|v| v * inv).collect();
    let mut out = vec![0.0; logits.len()];
    for (o, x) in out.chunks_mut(cols).zip(scaled.chunks(cols)) {
        crate::tensor::log_softmax_into(x, o);
        o.iter_mut().for_each(|v| *v = v.exp());
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Batch mean of `KL(softmax(t/T) ‖ softmax(s/T))`.
pub fn kd_term(tape: &mut Tape, teacher: &Tensor, student: Var, temperature: f32) -> Result<Var> {
    check_temperature(temperature)?;
    if teacher.shape() != tape.value(student).shape() || teacher.rank() != 2 {
        return shape_err(format!(
            "teacher {:?} vs student {:?}",
            teacher.shape(),
            tape.value(student).shape()
        ));
    }
    let p = tape.constant(softened(teacher, temperature)?)?;
    let s = tape.scale(student, 1.0 / temperature)?;
    let log_q = tape.log_softmax(s)?;
    tape.kl_div(p, log_q)
}

/// KD restricted to the teacher's sub-logit over `classes`.
pub fn soft_term(tape: &mut Tape, teacher: &Tensor, student_sub: Var, classes: &[usize], temperature: f32) -> Result<Var> {
    let t_sub = sub_logits(teacher, classes)?;
    kd_term(tape, &t_sub, student_sub, temperature)
}

/// Batch mean of the L1 distance between raw sub-logits.
pub fn scale_term(tape: &mut Tape, teacher: &Tensor, student_sub: Var, classes: &[usize]) -> Result<Var> {
    let t_sub = sub_logits(teacher, classes)?;
    if t_sub.shape() != tape.value(student_sub).shape() {
        return shape_err(format!(
            "teacher sub-logit {:?} vs student {:?}",
            t_sub.shape(),
            tape.value(student_sub).shape()
        ));
    }
    let t = tape.constant(t_sub)?;
    tape.l1(student_sub, t)
}

pub fn ckd_term(
    tape: &mut Tape,
    teacher: &Tensor,
    student_sub: Var,
    classes: &[usize],
    temperature: f32,
    alpha: f32,
    terms: CkdTerms,
) -> Result<Var> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be nonnegative, got {alpha}"));
    }
    match terms {
        CkdTerms::SoftOnly => soft_term(tape, teacher, student_sub, classes, temperature),
        CkdTerms::ScaleOnly => {
            let scale = scale_term(tape, teacher, student_sub, classes)?;
            tape.scale(scale, alpha)
        }
        CkdTerms::Both => {
            let soft = soft_term(tape, teacher, student_sub, classes, temperature)?;
            let scale = scale_term(tape, teacher, student_sub, classes)?;
            let weighted = tape.scale(scale, alpha)?;
            tape.add(soft, weighted)
        }
    }
}

fn row(v: &[f32]) -> Result<Tensor> {
    if v.is_empty() {
        return invalid("empty logit vector");
    }
    Tensor::new(vec![1, v.len()], v.to_vec())
}

fn scalar(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f32> {
    let mut tape = Tape::inference();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

/// `KL(softmax(t/T) ‖ softmax(s/T))` for single logit vectors.
pub fn loss_kd(t: &[f32], s: &[f32], temperature: f32) -> Result<f32> {
    if t.len() != s.len() {
        return shape_err(format!("teacher length {} vs student {}", t.len(), s.len()));
    }
    let (t, s) = (row(t)?, row(s)?);
    scalar(|tape| {
        let sv = tape.constant(s)?;
        kd_term(tape, &t, sv, temperature)
    })
}

pub fn loss_soft(t: &[f32], s_sub: &[f32], classes: &[usize], temperature: f32) -> Result<f32> {
    let (t, s) = (row(t)?, row(s_sub)?);
    scalar(|tape| {
        let sv = tape.constant(s)?;
        soft_term(tape, &t, sv, classes, temperature)
    })
}

pub fn loss_scale(t: &[f32], s_sub: &[f32], classes: &[usize]) -> Result<f32> {
    let (t, s) = (row(t)?, row(s_sub)?);
    scalar(|tape| {
        let sv = tape.constant(s)?;
        scale_term(tape, &t, sv, classes)
    })
}

pub fn loss_ckd(t: &[f32], s_sub: &[f32], classes: &[usize], temperature: f32, alpha: f32) -> Result<f32> {
    let (t, s) = (row(t)?, row(s_sub)?);
    scalar(|tape| {
        let sv = tape.constant(s)?;
        ckd_term(tape, &t, sv, classes, temperature, alpha, CkdTerms::Both)
    })
}
