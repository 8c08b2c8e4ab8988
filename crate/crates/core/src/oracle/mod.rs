//! Independent oracles for tests: 64-bit reference evaluations and the
//! finite-difference gradient suites built on them. Compiled only for tests
//! or with the `oracle` feature.

pub mod reference;

use rand::Rng as _;

use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::gradcheck::{grad_check_reference, GradCheck};
use crate::tensor::{Tape, Tensor, Var};
use reference as r;

/// Finite-difference step used by the standard suites.
pub const SUITE_EPS: f32 = 1e-3;
/// Acceptance bound on the relative gradient error.
pub const SUITE_TOL: f32 = 1e-3;

/// A named, seeded gradient check.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(seed: u64) -> Result<GradCheck>,
}

impl GradCase {
    /// Worst error over `seeds`, with the seed that produced it.
    pub fn worst(&self, seeds: std::ops::Range<u64>) -> Result<(f32, u64)> {
        let mut worst = (0.0f32, seeds.start);
        for s in seeds {
            let e = (self.run)(s)?.max_rel_err;
            if e > worst.0 {
                worst = (e, s);
            }
        }
        Ok(worst)
    }
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn case_rng(seed: u64) -> Rng {
    rng::stream(seed, 0x6772_6164)
}

fn f64s(t: &Tensor) -> Vec<f64> {
    r::to_f64(t.data())
}

/// Checks `Σ w ⊙ op(x)` for random probe weights `w`.
fn projected<F, R>(x: &Tensor, w: &[f32], op: F, reference: R) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Fn(&[f64]) -> Vec<f64>,
{
    let w64 = r::to_f64(w);
    grad_check_reference(
        |t, v| {
            let y = op(t, v)?;
            t.weighted_sum(y, w)
        },
        |x| r::dot(&reference(x), &w64),
        x,
        SUITE_EPS,
    )
}

fn probe(rng: &mut Rng, n: usize) -> Vec<f32> {
    uniform(rng, &[n], -1.0, 1.0).into_data()
}

/// One case per differentiable tape op, each on inputs drawn from `[-1, 1]`.
pub fn op_suite() -> Vec<GradCase> {
    vec![
        GradCase { name: "matmul/lhs", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut g, &[4, 5], -1.0, 1.0);
            let w = probe(&mut g, 15);
            let b64 = f64s(&b);
            projected(&x, &w, |t, v| { let c = t.constant(b.clone())?; t.matmul(v, c) }, |x| r::matmul(x, &b64, 3, 4, 5))
        }},
        GradCase { name: "matmul/rhs", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[4, 5], -1.0, 1.0);
            let a = uniform(&mut g, &[3, 4], -1.0, 1.0);
            let w = probe(&mut g, 15);
            let a64 = f64s(&a);
            projected(&x, &w, |t, v| { let c = t.constant(a.clone())?; t.matmul(c, v) }, |x| r::matmul(&a64, x, 3, 4, 5))
        }},
        GradCase { name: "add_bias/input", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut g, &[4], -1.0, 1.0);
            let w = probe(&mut g, 12);
            let b64 = f64s(&b);
            projected(&x, &w, |t, v| { let c = t.constant(b.clone())?; t.add_bias(v, c) }, |x| r::add_bias(x, &b64))
        }},
        GradCase { name: "add_bias/bias", run: |s| {
            let mut g = case_rng(s);
            let b = uniform(&mut g, &[4], -1.0, 1.0);
            let x = uniform(&mut g, &[3, 4], -1.0, 1.0);
            let w = probe(&mut g, 12);
            let x64 = f64s(&x);
            projected(&b, &w, |t, v| { let c = t.constant(x.clone())?; t.add_bias(c, v) }, |b| r::add_bias(&x64, b))
        }},
        GradCase { name: "conv3x3_s1/input", run: |s| conv_case(s, 3, 1, true) },
        GradCase { name: "conv3x3_s1/weight", run: |s| conv_case(s, 3, 1, false) },
        GradCase { name: "conv3x3_s2/input", run: |s| conv_case(s, 3, 2, true) },
        GradCase { name: "conv3x3_s2/weight", run: |s| conv_case(s, 3, 2, false) },
        GradCase { name: "conv1x1_s1/input", run: |s| conv_case(s, 1, 1, true) },
        GradCase { name: "conv1x1_s1/weight", run: |s| conv_case(s, 1, 1, false) },
        GradCase { name: "conv1x1_s2/input", run: |s| conv_case(s, 1, 2, true) },
        GradCase { name: "conv1x1_s2/weight", run: |s| conv_case(s, 1, 2, false) },
        GradCase { name: "relu", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[2, 3, 2, 2], -1.0, 1.0);
            let w = probe(&mut g, 24);
            projected(&x, &w, |t, v| t.relu(v), r::relu)
        }},
        GradCase { name: "batch_norm_train/input", run: |s| bn_case(s, BnProbe::Input, true) },
        GradCase { name: "batch_norm_train/gamma", run: |s| bn_case(s, BnProbe::Gamma, true) },
        GradCase { name: "batch_norm_train/beta", run: |s| bn_case(s, BnProbe::Beta, true) },
        GradCase { name: "batch_norm_eval/input", run: |s| bn_case(s, BnProbe::Input, false) },
        GradCase { name: "batch_norm_eval/gamma", run: |s| bn_case(s, BnProbe::Gamma, false) },
        GradCase { name: "global_avg_pool", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[2, 3, 3, 3], -1.0, 1.0);
            let w = probe(&mut g, 6);
            projected(&x, &w, |t, v| t.global_avg_pool(v), |x| r::global_avg_pool(x, 9))
        }},
        GradCase { name: "add", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[2, 5], -1.0, 1.0);
            let o = uniform(&mut g, &[2, 5], -1.0, 1.0);
            let w = probe(&mut g, 10);
            let o64 = f64s(&o);
            projected(
                &x,
                &w,
                |t, v| { let c = t.constant(o.clone())?; let y = t.add(c, v)?; t.add(y, v) },
                |x| x.iter().zip(&o64).map(|(a, b)| 2.0 * a + b).collect(),
            )
        }},
        GradCase { name: "scale", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[2, 5], -1.0, 1.0);
            let w = probe(&mut g, 10);
            projected(&x, &w, |t, v| t.scale(v, 0.25), |x| x.iter().map(|v| v * 0.25).collect())
        }},
        GradCase { name: "concat_cols", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 2], -1.0, 1.0);
            let o = uniform(&mut g, &[3, 3], -1.0, 1.0);
            let w = probe(&mut g, 21);
            let o64 = f64s(&o);
            projected(
                &x,
                &w,
                |t, v| { let c = t.constant(o.clone())?; t.concat_cols(&[v, c, v]) },
                |x| (0..3).flat_map(|i| [&x[i * 2..i * 2 + 2], &o64[i * 3..i * 3 + 3], &x[i * 2..i * 2 + 2]].concat()).collect(),
            )
        }},
        GradCase { name: "gather_cols", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 5], -1.0, 1.0);
            let w = probe(&mut g, 9);
            projected(
                &x,
                &w,
                |t, v| t.gather_cols(v, &[4, 1, 1]),
                |x| (0..3).flat_map(|i| [x[i * 5 + 4], x[i * 5 + 1], x[i * 5 + 1]]).collect(),
            )
        }},
        GradCase { name: "softmax", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 5], -1.0, 1.0);
            let w = probe(&mut g, 15);
            projected(&x, &w, |t, v| t.softmax(v), |x| r::softmax_rows(x, 5))
        }},
        GradCase { name: "log_softmax", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 5], -1.0, 1.0);
            let w = probe(&mut g, 15);
            projected(&x, &w, |t, v| t.log_softmax(v), |x| r::log_softmax_rows(x, 5))
        }},
        GradCase { name: "kl_div/log_q", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 4], -1.0, 1.0);
            let p = Tensor::new(vec![3, 4], r::softmax_rows(&f64s(&uniform(&mut g, &[3, 4], -1.0, 1.0)), 4).iter().map(|&v| v as f32).collect())?;
            let p64 = f64s(&p);
            grad_check_reference(
                |t, v| { let p = t.constant(p.clone())?; t.kl_div(p, v) },
                |x| r::kl_rows(&p64, x, 3),
                &x,
                SUITE_EPS,
            )
        }},
        GradCase { name: "kl_div/p", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 4], 0.1, 1.0);
            let lq = f64s(&uniform(&mut g, &[3, 4], -1.0, 1.0));
            let lq = r::log_softmax_rows(&lq, 4);
            let lq32 = Tensor::new(vec![3, 4], lq.iter().map(|&v| v as f32).collect())?;
            grad_check_reference(
                |t, v| { let q = t.constant(lq32.clone())?; t.kl_div(v, q) },
                |x| r::kl_rows(x, &lq, 3),
                &x,
                SUITE_EPS,
            )
        }},
        GradCase { name: "l1", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[3, 4], -1.0, 1.0);
            // keep every |x − target| well away from the kink
            let target: Vec<f32> = x
                .data()
                .iter()
                .map(|&v| v + if g.gen::<bool>() { 1.0 } else { -1.0 } * g.gen_range(0.1..0.5))
                .collect();
            let t64 = r::to_f64(&target);
            let target = Tensor::new(vec![3, 4], target)?;
            grad_check_reference(
                |t, v| { let c = t.constant(target.clone())?; t.l1(v, c) },
                |x| r::l1_rows(x, &t64, 3),
                &x,
                SUITE_EPS,
            )
        }},
        GradCase { name: "cross_entropy", run: |s| {
            let mut g = case_rng(s);
            let x = uniform(&mut g, &[4, 5], -1.0, 1.0);
            let labels: Vec<usize> = (0..4).map(|_| g.gen_range(0..5)).collect();
            grad_check_reference(
                |t, v| t.cross_entropy(v, &labels),
                |x| r::cross_entropy(x, 5, &labels),
                &x,
                SUITE_EPS,
            )
        }},
    ]
}

fn conv_case(seed: u64, k: usize, stride: usize, wrt_input: bool) -> Result<GradCheck> {
    let mut g = case_rng(seed);
    let pad = k / 2;
    let x = uniform(&mut g, &[2, 3, 5, 5], -1.0, 1.0);
    let wt = uniform(&mut g, &[4, 3, k, k], -1.0, 1.0);
    let out = (5 + 2 * pad - k) / stride + 1;
    let w = probe(&mut g, 2 * 4 * out * out);
    let (x64, w64) = (f64s(&x), f64s(&wt));
    if wrt_input {
        projected(
            &x,
            &w,
            |t, v| { let c = t.constant(wt.clone())?; t.conv2d(v, c, stride, pad) },
            |x| r::conv2d(x, &w64, 2, 3, 5, 5, 4, k, stride, pad),
        )
    } else {
        projected(
            &wt,
            &w,
            |t, v| { let c = t.constant(x.clone())?; t.conv2d(c, v, stride, pad) },
            |wt| r::conv2d(&x64, wt, 2, 3, 5, 5, 4, k, stride, pad),
        )
    }
}

#[derive(Clone, Copy)]
enum BnProbe {
    Input,
    Gamma,
    Beta,
}

fn bn_case(seed: u64, which: BnProbe, batch: bool) -> Result<GradCheck> {
    const EPS: f32 = 1e-5;
    let mut g = case_rng(seed);
    let x = uniform(&mut g, &[3, 2, 2, 2], -1.0, 1.0);
    let gamma = uniform(&mut g, &[2], 0.5, 1.5);
    let beta = uniform(&mut g, &[2], -1.0, 1.0);
    let rm = uniform(&mut g, &[2], -0.2, 0.2).into_data();
    let rv = uniform(&mut g, &[2], 0.5, 1.5).into_data();
    let w = probe(&mut g, 24);
    let (rm64, rv64) = (r::to_f64(&rm), r::to_f64(&rv));
    let (x64, g64, b64) = (f64s(&x), f64s(&gamma), f64s(&beta));
    let running = if batch { None } else { Some((rm.as_slice(), rv.as_slice())) };
    let running64 = if batch { None } else { Some((rm64.as_slice(), rv64.as_slice())) };
    let tape_bn = |t: &mut Tape, xv: Var, gv: Var, bv: Var| -> Result<Var> {
        Ok(t.batch_norm(xv, gv, bv, running, EPS)?.0)
    };
    let ref_bn = |x: &[f64], g: &[f64], b: &[f64]| r::batch_norm(x, 3, 2, 4, g, b, running64, EPS as f64);
    match which {
        BnProbe::Input => projected(
            &x,
            &w,
            |t, v| { let gv = t.constant(gamma.clone())?; let bv = t.constant(beta.clone())?; tape_bn(t, v, gv, bv) },
            |x| ref_bn(x, &g64, &b64),
        ),
        BnProbe::Gamma => projected(
            &gamma,
            &w,
            |t, v| { let xv = t.constant(x.clone())?; let bv = t.constant(beta.clone())?; tape_bn(t, xv, v, bv) },
            |g| ref_bn(&x64, g, &b64),
        ),
        BnProbe::Beta => projected(
            &beta,
            &w,
            |t, v| { let xv = t.constant(x.clone())?; let gv = t.constant(gamma.clone())?; tape_bn(t, xv, gv, v) },
            |b| ref_bn(&x64, &g64, b),
        ),
    }
}

const LOSS_T: f32 = 2.0;
const LOSS_ALPHA: f32 = 0.3;
const LOSS_CLASSES: [usize; 3] = [0, 2, 5];

/// Teacher logits `[3, 6]` whose sub-logit sits at least 0.2 away from the
/// student `[3, 3]`, keeping the L1 term away from its kink.
fn loss_inputs(seed: u64) -> (Tensor, Tensor) {
    let mut g = case_rng(seed);
    let student = uniform(&mut g, &[3, 3], -1.0, 1.0);
    let mut teacher = uniform(&mut g, &[3, 6], -1.0, 1.0).into_data();
    for r in 0..3 {
        for (j, &c) in LOSS_CLASSES.iter().enumerate() {
            let gap = g.gen_range(0.2f32..1.0) * if g.gen_bool(0.5) { 1.0 } else { -1.0 };
            teacher[r * 6 + c] = student.data()[r * 3 + j] + gap;
        }
    }
    (Tensor::new(vec![3, 6], teacher).expect("3x6"), student)
}

fn ref_sub(t: &[f64]) -> Vec<f64> {
    t.chunks(6).flat_map(|r| LOSS_CLASSES.iter().map(move |&c| r[c])).collect()
}

fn ref_kd(t: &[f64], s: &[f64], cols: usize, temp: f64) -> f64 {
    let ts: Vec<f64> = t.iter().map(|v| v / temp).collect();
    let ss: Vec<f64> = s.iter().map(|v| v / temp).collect();
    r::kl_rows(&r::softmax_rows(&ts, cols), &r::log_softmax_rows(&ss, cols), t.len() / cols)
}

/// The four distillation objectives, differentiated w.r.t. the student.
pub fn loss_suite() -> Vec<GradCase> {
    use crate::distill::{ckd_term, kd_term, scale_term, soft_term, CkdTerms};
    vec![
        GradCase { name: "loss_kd", run: |s| {
            let (t, x) = loss_inputs(s);
            let tsub = crate::distill::sub_logits(&t, &LOSS_CLASSES)?;
            let t64 = f64s(&tsub);
            grad_check_reference(|tp, v| kd_term(tp, &tsub, v, LOSS_T), |x| ref_kd(&t64, x, 3, LOSS_T as f64), &x, SUITE_EPS)
        }},
        GradCase { name: "loss_soft", run: |s| {
            let (t, x) = loss_inputs(s);
            let t64 = ref_sub(&f64s(&t));
            grad_check_reference(
                |tp, v| soft_term(tp, &t, v, &LOSS_CLASSES, LOSS_T),
                |x| ref_kd(&t64, x, 3, LOSS_T as f64),
                &x,
                SUITE_EPS,
            )
        }},
        GradCase { name: "loss_scale", run: |s| {
            let (t, x) = loss_inputs(s);
            let t64 = ref_sub(&f64s(&t));
            grad_check_reference(|tp, v| scale_term(tp, &t, v, &LOSS_CLASSES), |x| r::l1_rows(x, &t64, 3), &x, SUITE_EPS)
        }},
        GradCase { name: "loss_ckd", run: |s| {
            let (t, x) = loss_inputs(s);
            let t64 = ref_sub(&f64s(&t));
            grad_check_reference(
                |tp, v| ckd_term(tp, &t, v, &LOSS_CLASSES, LOSS_T, LOSS_ALPHA, CkdTerms::Both),
                |x| ref_kd(&t64, x, 3, LOSS_T as f64) + LOSS_ALPHA as f64 * r::l1_rows(x, &t64, 3),
                &x,
                SUITE_EPS,
            )
        }},
    ]
}
