//! Training objective: full and partial cross-entropy, smoothed KL
//! distillation from the top branch to the bottom branch, Shannon entropy,
//! min-entropy, and the weighted joint objective.
//!
//! Every term is a per-pixel mean over the pixels it covers. Each loss has a
//! `*_with_grad` form returning the gradient with respect to the input
//! probabilities; [`crate::field::softmax_backward`] maps it onto logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    floored_ln, floored_ln_grad, smooth_simplex, softmax_backward, DenseMask, DualOutput, PartialMask, SimplexField,
};
use crate::scalar::Scalar;

/// Weights of the auxiliary terms relative to the full-supervision term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_w: f64,
    pub lambda_kd: f64,
    pub lambda_ent: f64,
}

impl LossWeights {
    /// 0.1 / 50 / 1.
    pub const DEFAULT: LossWeights = LossWeights {
        lambda_w: 0.1,
        lambda_kd: 50.0,
        lambda_ent: 1.0,
    };

    pub fn new(lambda_w: f64, lambda_kd: f64, lambda_ent: f64) -> Result<Self> {
        let w = Self {
            lambda_w,
            lambda_kd,
            lambda_ent,
        };
        for (name, v) in [
            ("lambda_w", lambda_w),
            ("lambda_kd", lambda_kd),
            ("lambda_ent", lambda_ent),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(w)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Whether the distillation term sends gradient into the teacher branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherGradient {
    #[default]
    Blocked,
    Flowing,
}

/// Value of a loss and its gradient with respect to the input probabilities.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Gradient of a two-argument loss.
#[derive(Clone, Debug)]
pub struct DualLossGrad<T> {
    pub value: T,
    pub top: Vec<T>,
    pub bottom: Vec<T>,
}

fn require_same_shape<T: Scalar>(pred: &SimplexField<T>, h: usize, w: usize, c: usize) -> Result<()> {
    if pred.height() != h || pred.width() != w || pred.num_classes() != c {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs target {h}x{w}x{c}",
            pred.height(),
            pred.width(),
            pred.num_classes()
        )));
    }
    Ok(())
}

// Each `*_sum` helper returns the sum of the per-pixel loss over the pixels it
// covers and, when given a buffer, adds `scale * d(sum)/dp` into it.

fn ce_sum<T: Scalar>(
    pred: &SimplexField<T>,
    label: impl Fn(usize) -> Option<u8>,
    scale: T,
    mut grad: Option<&mut [T]>,
) -> (T, usize) {
    let n = pred.pixels();
    let mut sum = T::zero();
    let mut count = 0;
    for i in 0..n {
        let Some(c) = label(i) else { continue };
        let p = pred.prob(c as usize, i);
        sum -= floored_ln(p);
        count += 1;
        if let Some(g) = grad.as_deref_mut() {
            g[c as usize * n + i] -= scale * floored_ln_grad(p);
        }
    }
    (sum, count)
}

fn kl_sum<T: Scalar>(
    out: &DualOutput<T>,
    scale: T,
    teacher: TeacherGradient,
    grads: Option<(&mut [T], &mut [T])>,
) -> T {
    let st = smooth_simplex(&out.top);
    let sb = smooth_simplex(&out.bottom);
    let n = st.pixels();
    let k = st.num_classes();
    let mut sum = T::zero();
    for i in 0..n {
        for c in 0..k {
            let (t, b) = (st.prob(c, i), sb.prob(c, i));
            sum += t * (floored_ln(t) - floored_ln(b));
        }
    }
    if let Some((gtop, gbottom)) = grads {
        let mut d_sb = vec![T::zero(); n * k];
        for (idx, d) in d_sb.iter_mut().enumerate() {
            *d = -scale * st.probs()[idx] * floored_ln_grad(sb.probs()[idx]);
        }
        for (g, d) in gbottom.iter_mut().zip(softmax_backward(&sb, &d_sb)) {
            *g += d;
        }
        if teacher == TeacherGradient::Flowing {
            let mut d_st = vec![T::zero(); n * k];
            for (idx, d) in d_st.iter_mut().enumerate() {
                let (t, b) = (st.probs()[idx], sb.probs()[idx]);
                *d = scale * (floored_ln(t) + t * floored_ln_grad(t) - floored_ln(b));
            }
            for (g, d) in gtop.iter_mut().zip(softmax_backward(&st, &d_st)) {
                *g += d;
            }
        }
    }
    sum
}

fn entropy_sum<T: Scalar>(pred: &SimplexField<T>, scale: T, grad: Option<&mut [T]>) -> T {
    let probs = pred.probs();
    let sum = probs.iter().map(|&p| -p * floored_ln(p)).sum();
    if let Some(g) = grad {
        for (gi, &p) in g.iter_mut().zip(probs) {
            *gi -= scale * (floored_ln(p) + p * floored_ln_grad(p));
        }
    }
    sum
}

fn min_entropy_sum<T: Scalar>(pred: &SimplexField<T>, scale: T, mut grad: Option<&mut [T]>) -> T {
    let n = pred.pixels();
    let mut sum = T::zero();
    for i in 0..n {
        let mut best = 0;
        for c in 1..pred.num_classes() {
            if pred.prob(c, i) > pred.prob(best, i) {
                best = c;
            }
        }
        let p = pred.prob(best, i);
        sum -= floored_ln(p);
        if let Some(g) = grad.as_deref_mut() {
            g[best * n + i] -= scale * floored_ln_grad(p);
        }
    }
    sum
}

fn maybe<T>(want: bool, g: &mut [T]) -> Option<&mut [T]> {
    if want {
        Some(g)
    } else {
        None
    }
}

fn count_scale<T: Scalar>(count: usize) -> T {
    T::one() / T::of(count as f64)
}

/// Mean over all pixels of `-ln p[target]`.
pub fn full_ce<T: Scalar>(pred: &SimplexField<T>, target: &DenseMask) -> Result<T> {
    require_same_shape(pred, target.height(), target.width(), target.num_classes())?;
    let (sum, count) = ce_sum(pred, |i| Some(target.labels()[i]), T::zero(), None);
    Ok(sum * count_scale(count))
}

pub fn full_ce_with_grad<T: Scalar>(pred: &SimplexField<T>, target: &DenseMask) -> Result<LossGrad<T>> {
    require_same_shape(pred, target.height(), target.width(), target.num_classes())?;
    let scale = count_scale(pred.pixels());
    let mut grad = vec![T::zero(); pred.probs().len()];
    let (sum, _) = ce_sum(pred, |i| Some(target.labels()[i]), scale, Some(&mut grad));
    Ok(LossGrad {
        value: sum * scale,
        grad,
    })
}

/// Mean of `-ln p[target]` over the labeled pixels only.
pub fn partial_ce<T: Scalar>(pred: &SimplexField<T>, target: &PartialMask) -> Result<T> {
    partial_ce_with_grad(pred, target).map(|l| l.value)
}

pub fn partial_ce_with_grad<T: Scalar>(pred: &SimplexField<T>, target: &PartialMask) -> Result<LossGrad<T>> {
    require_same_shape(pred, target.height(), target.width(), target.num_classes())?;
    let labeled = target.labeled_count();
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let scale = count_scale(labeled);
    let mut grad = vec![T::zero(); pred.probs().len()];
    let (sum, _) = ce_sum(pred, |i| target.label(i), scale, Some(&mut grad));
    Ok(LossGrad {
        value: sum * scale,
        grad,
    })
}

/// Mean over pixels of `KL(p || q)` on the raw (unsmoothed) distributions.
pub fn kl_divergence<T: Scalar>(p: &SimplexField<T>, q: &SimplexField<T>) -> Result<T> {
    if !p.same_shape(q) {
        return Err(Error::ShapeMismatch("KL arguments differ in shape".into()));
    }
    let sum: T = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&a, &b)| a * (floored_ln(a) - floored_ln(b)))
        .sum();
    Ok(sum / T::of(p.pixels() as f64))
}

/// Mean over pixels of `KL(smooth(top) || smooth(bottom))`.
pub fn kl_distill<T: Scalar>(out: &DualOutput<T>) -> Result<T> {
    check_dual(out)?;
    Ok(kl_sum(out, T::zero(), TeacherGradient::Blocked, None) * count_scale(out.top.pixels()))
}

pub fn kl_distill_with_grad<T: Scalar>(out: &DualOutput<T>, teacher: TeacherGradient) -> Result<DualLossGrad<T>> {
    check_dual(out)?;
    let scale = count_scale(out.top.pixels());
    let len = out.top.probs().len();
    let mut top = vec![T::zero(); len];
    let mut bottom = vec![T::zero(); len];
    let sum = kl_sum(out, scale, teacher, Some((&mut top, &mut bottom)));
    Ok(DualLossGrad {
        value: sum * scale,
        top,
        bottom,
    })
}

fn check_dual<T: Scalar>(out: &DualOutput<T>) -> Result<()> {
    // fields are public, so the constructor check may have been bypassed
    if !out.top.same_shape(&out.bottom) {
        return Err(Error::ShapeMismatch("top and bottom branch shapes differ".into()));
    }
    Ok(())
}

/// Mean over pixels of `-sum_c p_c ln p_c`.
pub fn shannon_entropy<T: Scalar>(pred: &SimplexField<T>) -> T {
    entropy_sum(pred, T::zero(), None) * count_scale(pred.pixels())
}

pub fn shannon_entropy_with_grad<T: Scalar>(pred: &SimplexField<T>) -> LossGrad<T> {
    let scale = count_scale(pred.pixels());
    let mut grad = vec![T::zero(); pred.probs().len()];
    let sum = entropy_sum(pred, scale, Some(&mut grad));
    LossGrad {
        value: sum * scale,
        grad,
    }
}

/// Mean over pixels of `-ln max_c p_c`: the loss implicitly minimized by
/// self-training on argmax pseudo-masks.
pub fn min_entropy<T: Scalar>(pred: &SimplexField<T>) -> T {
    min_entropy_sum(pred, T::zero(), None) * count_scale(pred.pixels())
}

pub fn min_entropy_with_grad<T: Scalar>(pred: &SimplexField<T>) -> LossGrad<T> {
    let scale = count_scale(pred.pixels());
    let mut grad = vec![T::zero(); pred.probs().len()];
    let sum = min_entropy_sum(pred, scale, Some(&mut grad));
    LossGrad {
        value: sum * scale,
        grad,
    }
}

/// Which terms a training sample takes part in.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    /// Densely labeled image: full CE on the top branch, distillation, and
    /// partial CE on the bottom branch when a synthesized partial mask is given.
    Strong {
        dense: &'a DenseMask,
        partial: Option<&'a PartialMask>,
    },
    /// Sparsely labeled image: partial CE on the bottom branch, plus the
    /// entropy term when `entropy` is set.
    Weak { partial: &'a PartialMask, entropy: bool },
}

/// Decomposition of the joint objective for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub l_kd: f64,
    pub l_ent: f64,
    pub n_s: usize,
    pub n_w: usize,
    pub n_kd: usize,
    pub n_ent: usize,
}

impl LossReport {
    /// `total` recomputed from the components.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        self.l_s + w.lambda_w * self.l_w + w.lambda_kd * self.l_kd + w.lambda_ent * self.l_ent
    }
}

/// Joint objective with per-sample gradients with respect to the logits of
/// each branch.
#[derive(Clone, Debug)]
pub struct JointGrad<T> {
    pub report: LossReport,
    pub top: Vec<Vec<T>>,
    pub bottom: Vec<Vec<T>>,
}

pub fn joint_loss<T: Scalar>(
    outputs: &[DualOutput<T>],
    targets: &[Supervision<'_>],
    weights: &LossWeights,
) -> Result<LossReport> {
    joint(outputs, targets, weights, TeacherGradient::Blocked, false).map(|j| j.report)
}

pub fn joint_loss_with_grad<T: Scalar>(
    outputs: &[DualOutput<T>],
    targets: &[Supervision<'_>],
    weights: &LossWeights,
    teacher: TeacherGradient,
) -> Result<JointGrad<T>> {
    joint(outputs, targets, weights, teacher, true)
}

fn joint<T: Scalar>(
    outputs: &[DualOutput<T>],
    targets: &[Supervision<'_>],
    weights: &LossWeights,
    teacher: TeacherGradient,
    want_grad: bool,
) -> Result<JointGrad<T>> {
    if outputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }

    // First pass: validate and count the pixels each term covers.
    let mut report = LossReport::default();
    for (out, target) in outputs.iter().zip(targets) {
        check_dual(out)?;
        let (h, w, c) = (out.top.height(), out.top.width(), out.top.num_classes());
        match *target {
            Supervision::Strong { dense, partial } => {
                require_same_shape(&out.top, dense.height(), dense.width(), dense.num_classes())?;
                report.n_s += out.top.pixels();
                report.n_kd += out.top.pixels();
                if let Some(p) = partial {
                    require_same_shape(&out.bottom, p.height(), p.width(), p.num_classes())?;
                    report.n_w += p.labeled_count();
                }
            }
            Supervision::Weak { partial, entropy } => {
                require_same_shape(&out.bottom, partial.height(), partial.width(), partial.num_classes())?;
                debug_assert_eq!((h, w, c), (partial.height(), partial.width(), partial.num_classes()));
                report.n_w += partial.labeled_count();
                if entropy {
                    report.n_ent += out.bottom.pixels();
                }
            }
        }
    }

    let inv = |n: usize| if n == 0 { T::zero() } else { count_scale::<T>(n) };
    let (w_s, w_w, w_kd, w_ent) = (
        inv(report.n_s),
        T::of(weights.lambda_w) * inv(report.n_w),
        T::of(weights.lambda_kd) * inv(report.n_kd),
        T::of(weights.lambda_ent) * inv(report.n_ent),
    );

    let mut top_grads = Vec::with_capacity(outputs.len());
    let mut bottom_grads = Vec::with_capacity(outputs.len());
    let (mut s_sum, mut w_sum, mut kd_sum, mut ent_sum) = (T::zero(), T::zero(), T::zero(), T::zero());

    for (out, target) in outputs.iter().zip(targets) {
        let len = out.top.probs().len();
        let mut gt = vec![T::zero(); if want_grad { len } else { 0 }];
        let mut gb = vec![T::zero(); if want_grad { len } else { 0 }];
        match *target {
            Supervision::Strong { dense, partial } => {
                s_sum += ce_sum(&out.top, |i| Some(dense.labels()[i]), w_s, maybe(want_grad, &mut gt)).0;
                if let Some(p) = partial {
                    w_sum += ce_sum(&out.bottom, |i| p.label(i), w_w, maybe(want_grad, &mut gb)).0;
                }
                let grads = if want_grad {
                    Some((gt.as_mut_slice(), gb.as_mut_slice()))
                } else {
                    None
                };
                kd_sum += kl_sum(out, w_kd, teacher, grads);
            }
            Supervision::Weak { partial, entropy } => {
                w_sum += ce_sum(&out.bottom, |i| partial.label(i), w_w, maybe(want_grad, &mut gb)).0;
                if entropy {
                    ent_sum += entropy_sum(&out.bottom, w_ent, maybe(want_grad, &mut gb));
                }
            }
        }
        if want_grad {
            top_grads.push(softmax_backward(&out.top, &gt));
            bottom_grads.push(softmax_backward(&out.bottom, &gb));
        }
    }

    let mean = |sum: T, n: usize| if n == 0 { 0.0 } else { sum.to_f64_lossy() / n as f64 };
    report.l_s = mean(s_sum, report.n_s);
    report.l_w = mean(w_sum, report.n_w);
    report.l_kd = mean(kd_sum, report.n_kd);
    report.l_ent = mean(ent_sum, report.n_ent);
    report.total = report.recombined(weights);
    Ok(JointGrad {
        report,
        top: top_grads,
        bottom: bottom_grads,
    })
}
