//! Classification losses: cross-entropy, temperature-softened distillation,
//! its smoothed-label form, and the label-smoothness diagnostic.
//!
//! Logits stay raw everywhere else in the crate; this module is the single
//! place where probabilities are formed.

use crate::checkpoint::MaskedCheckpoint;
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::network::forward_eval;
use crate::tensor::{Scalar, Tensor};
use crate::threads::Parallelism;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn default_true() -> bool {
    true
}

/// Distillation loss settings: soft/hard mixture weight and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Scale the soft term by tau^2 to keep its gradient magnitude comparable
    /// to the hard term.
    #[serde(default = "default_true")]
    pub tau_sq_scaling: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.95,
            tau: 10.0,
            tau_sq_scaling: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// A length-K probability vector (nonnegative, sums to 1 within 1e-6).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| *v < -T::of_f64(1e-9) || !v.is_finite()) {
            return Err(Error::Config("probabilities must be nonnegative".into()));
        }
        let sum: T = values.iter().copied().sum();
        if (sum.as_f64() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "probabilities must sum to 1, got {}",
                sum
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn one_hot(class: usize, k: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::Config(format!(
                "class {} out of range for {} classes",
                class, k
            )));
        }
        let mut v = vec![T::zero(); k];
        v[class] = T::one();
        Ok(ProbVector(v))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Temperature softmax, computed max-subtracted.
pub fn softmax<T: Scalar>(logits: &[T], tau: T) -> Result<ProbVector<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("tau must be > 0, got {}", tau)));
    }
    if logits.is_empty() {
        return Err(Error::Config("softmax of empty logits".into()));
    }
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, tau, &mut out);
    Ok(ProbVector(out))
}

fn softmax_into<T: Scalar>(logits: &[T], tau: T, out: &mut [T]) {
    let mut max = logits[0];
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = ((v - max) / tau).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::of_f64(PROB_FLOOR)).ln()
}

/// `H(p, q) = -sum_k p[k] ln q[k]`, with q clamped at [`PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(target: &ProbVector<T>, pred: &ProbVector<T>) -> Result<T> {
    if target.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    let mut acc = T::zero();
    for (&p, &q) in target.values().iter().zip(pred.values()) {
        acc -= p * clamped_ln(q);
    }
    Ok(acc)
}

/// Convex mixture `(1-alpha) * f_true + alpha * f_teacher`.
pub fn smoothed_label<T: Scalar>(
    f_true: &ProbVector<T>,
    f_teacher: &ProbVector<T>,
    alpha: f64,
) -> Result<ProbVector<T>> {
    if f_true.len() != f_teacher.len() {
        return Err(Error::ShapeMismatch(format!(
            "smoothed_label length mismatch: {} vs {}",
            f_true.len(),
            f_teacher.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0,1], got {}",
            alpha
        )));
    }
    let a = T::of_f64(alpha);
    let b = T::one() - a;
    Ok(ProbVector(
        f_true
            .values()
            .iter()
            .zip(f_teacher.values())
            .map(|(&t, &s)| b * t + a * s)
            .collect(),
    ))
}

fn check_batch_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be NxK, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {}",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!(
            "label {} out of range for {} classes",
            bad, k
        )));
    }
    Ok((n, k))
}

/// Mean cross-entropy between one-hot labels and `softmax(logits, 1)`.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(ce_loss_grad(logits, labels)?.0)
}

/// Cross-entropy loss and its gradient w.r.t. the logits.
pub fn ce_loss_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = check_batch_logits(logits, labels)?;
    let inv_n = T::one() / T::of_usize(n);
    let mut grad = vec![T::zero(); n * k];
    let mut loss = T::zero();
    let mut q = vec![T::zero(); k];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        softmax_into(row, T::one(), &mut q);
        loss -= clamped_ln(q[y]);
        let g = &mut grad[i * k..(i + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let target = if j == y { T::one() } else { T::zero() };
            *gv = (q[j] - target) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Distillation loss: `(1-alpha) H(one_hot, softmax(z_s, 1)) +
/// alpha * s * H(softmax(z_t, tau), softmax(z_s, tau))` averaged over the
/// batch, with `s = tau^2` when `tau_sq_scaling` is set.
pub fn kd_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<T> {
    Ok(kd_loss_grad(student_logits, teacher_logits, labels, cfg)?.0)
}

/// Distillation loss and its gradient w.r.t. the student logits.
pub fn kd_loss_grad<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(T, Tensor<T>)> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        // Reduces exactly to plain cross-entropy; reuse that path bit-for-bit.
        return ce_loss_grad(student_logits, labels);
    }
    let (n, k) = check_batch_logits(student_logits, labels)?;
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher logits {:?} vs student {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let tau = T::of_f64(cfg.tau);
    let alpha = T::of_f64(cfg.alpha);
    let hard_w = T::one() - alpha;
    let scale = if cfg.tau_sq_scaling {
        tau * tau
    } else {
        T::one()
    };
    let inv_n = T::one() / T::of_usize(n);
    let mut grad = vec![T::zero(); n * k];
    let mut loss = T::zero();
    let mut q1 = vec![T::zero(); k];
    let mut qt_s = vec![T::zero(); k];
    let mut qt_t = vec![T::zero(); k];
    for (i, &y) in labels.iter().enumerate() {
        let s_row = &student_logits.data()[i * k..(i + 1) * k];
        let t_row = &teacher_logits.data()[i * k..(i + 1) * k];
        softmax_into(s_row, T::one(), &mut q1);
        softmax_into(s_row, tau, &mut qt_s);
        softmax_into(t_row, tau, &mut qt_t);
        let mut soft = T::zero();
        for (&p, &q) in qt_t.iter().zip(&qt_s) {
            soft -= p * clamped_ln(q);
        }
        loss += hard_w * (-clamped_ln(q1[y])) + alpha * scale * soft;
        let g = &mut grad[i * k..(i + 1) * k];
        let soft_g = alpha * scale / tau * inv_n;
        for (j, gv) in g.iter_mut().enumerate() {
            let target = if j == y { T::one() } else { T::zero() };
            *gv = hard_w * (q1[j] - target) * inv_n + soft_g * (qt_s[j] - qt_t[j]);
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(student_logits.shape(), grad)?))
}

/// Smoothed-label form at temperature 1: mean `H(f_m, softmax(z_s, 1))`
/// with `f_m = (1-alpha) one_hot + alpha softmax(z_t, 1)`.
pub fn lsr_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
) -> Result<T> {
    let (n, k) = check_batch_logits(student_logits, labels)?;
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher logits {:?} vs student {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0,1], got {}",
            alpha
        )));
    }
    let a = T::of_f64(alpha);
    let b = T::one() - a;
    let mut loss = T::zero();
    let mut q = vec![T::zero(); k];
    let mut p_t = vec![T::zero(); k];
    for (i, &y) in labels.iter().enumerate() {
        let s_row = &student_logits.data()[i * k..(i + 1) * k];
        let t_row = &teacher_logits.data()[i * k..(i + 1) * k];
        softmax_into(s_row, T::one(), &mut q);
        softmax_into(t_row, T::one(), &mut p_t);
        for j in 0..k {
            let target = if j == y { T::one() } else { T::zero() };
            let m = b * target + a * p_t[j];
            loss -= m * clamped_ln(q[j]);
        }
    }
    Ok(loss / T::of_usize(n))
}

/// Mean entropy of `softmax(logits, 1)` rows; used by self-target checks.
pub fn mean_entropy<T: Scalar>(logits: &Tensor<T>) -> Result<T> {
    if logits.shape().len() != 2 || logits.shape()[0] == 0 {
        return Err(Error::ShapeMismatch("logits must be non-empty NxK".into()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut acc = T::zero();
    let mut q = vec![T::zero(); k];
    for i in 0..n {
        softmax_into(&logits.data()[i * k..(i + 1) * k], T::one(), &mut q);
        for &p in &q {
            acc -= p * clamped_ln(p);
        }
    }
    Ok(acc / T::of_usize(n))
}

// ---------------------------------------------------------------------------
// Label-smoothness diagnostic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SmoothnessSample {
    pub index: usize,
    pub true_label: usize,
    pub prob_a: f64,
    pub prob_b: f64,
    pub log_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothnessReport {
    pub mean_log_ratio: f64,
    pub per_sample: Vec<SmoothnessSample>,
}

/// Compare two models' confidence at the true label:
/// `mean_i [ ln p_a(x_i)[y_i] - ln p_b(x_i)[y_i] ]` over the given split,
/// probabilities clamped at [`PROB_FLOOR`]. Exactly antisymmetric in (a, b).
pub fn smoothness_report<T: Scalar>(
    model_a: &MaskedCheckpoint<T>,
    model_b: &MaskedCheckpoint<T>,
    data: &LabeledDataset,
    split: Split,
    batch_size: usize,
    par: &Parallelism,
) -> Result<SmoothnessReport> {
    let ka = model_a.arch.num_classes()?;
    let kb = model_b.arch.num_classes()?;
    if ka != kb {
        return Err(Error::Config(format!(
            "class counts differ: {} vs {}",
            ka, kb
        )));
    }
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut per_sample = Vec::with_capacity(indices.len());
    let mut sum = 0.0f64;
    let mut qa = vec![T::zero(); ka];
    let mut qb = vec![T::zero(); ka];
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = data.gather::<T>(chunk)?;
        let la = forward_eval(&model_a.arch, &model_a.params, &batch, par)?;
        let lb = forward_eval(&model_b.arch, &model_b.params, &batch, par)?;
        for (row, (&idx, &y)) in chunk.iter().zip(&labels).enumerate() {
            softmax_into(&la.data()[row * ka..(row + 1) * ka], T::one(), &mut qa);
            softmax_into(&lb.data()[row * ka..(row + 1) * ka], T::one(), &mut qb);
            let pa = qa[y].as_f64().max(PROB_FLOOR);
            let pb = qb[y].as_f64().max(PROB_FLOOR);
            let log_ratio = pa.ln() - pb.ln();
            sum += log_ratio;
            per_sample.push(SmoothnessSample {
                index: idx as usize,
                true_label: y,
                prob_a: pa,
                prob_b: pb,
                log_ratio,
            });
        }
    }
    Ok(SmoothnessReport {
        mean_log_ratio: sum / per_sample.len() as f64,
        per_sample,
    })
}
