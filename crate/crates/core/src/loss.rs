//! Distributional (teacher-student KL) loss and cross-entropy.
//!
//! The distributional loss is the batch mean of `KL(p_teacher || p_student)`
//! with the student distribution taken from a log-softmax of its logits. The
//! teacher side is a plain probability tensor and never receives gradient.

use crate::error::{Error, Result};
use crate::layers::{log_softmax, softmax};
use crate::tensor::FloatTensor;

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

fn validate_teacher(student: &FloatTensor, teacher: &FloatTensor) -> Result<(usize, usize)> {
    let (n, k) = student.dims2()?;
    teacher.ensure_shape(&[n, k])?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for (i, row) in teacher.data().chunks(k).enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "teacher row {i} has a negative or non-finite probability"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("teacher row {i} sums to {s}")));
        }
    }
    Ok((n, k))
}

/// Mean over the batch of `sum_c p_t * (log p_t - log p_s)`.
pub fn distributional_loss(student_logits: &FloatTensor, teacher_probs: &FloatTensor) -> Result<f64> {
    let (n, _) = validate_teacher(student_logits, teacher_probs)?;
    let log_ps = log_softmax(student_logits)?;
    let total: f64 = teacher_probs
        .data()
        .iter()
        .zip(log_ps.data())
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &lps)| pt * (pt.ln() - lps))
        .sum();
    // Rounding can push an exact match a hair below zero.
    Ok((total / n as f64).max(0.0))
}

/// `(softmax(student) - teacher) / n`.
pub fn distributional_loss_backward(
    student_logits: &FloatTensor,
    teacher_probs: &FloatTensor,
) -> Result<FloatTensor> {
    let (n, _) = validate_teacher(student_logits, teacher_probs)?;
    let mut grad = softmax(student_logits)?;
    for (g, pt) in grad.data_mut().iter_mut().zip(teacher_probs.data()) {
        *g = (*g - pt) / n as f64;
    }
    Ok(grad)
}

fn validate_labels(logits: &FloatTensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

pub fn cross_entropy(logits: &FloatTensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = validate_labels(logits, labels)?;
    let lp = log_softmax(logits)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -lp.data()[i * k + l]).sum();
    Ok(total / n as f64)
}

pub fn cross_entropy_backward(logits: &FloatTensor, labels: &[usize]) -> Result<FloatTensor> {
    let (n, k) = validate_labels(logits, labels)?;
    let mut grad = softmax(logits)?;
    for (i, &l) in labels.iter().enumerate() {
        grad.data_mut()[i * k + l] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= n as f64);
    Ok(grad)
}

/// Which objective a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Distributional,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Distributional => "distributional",
            LossKind::CrossEntropy => "cross-entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "distributional" | "kl" => Ok(LossKind::Distributional),
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}
