//! Softmax link, per-element cross-entropy risk and its functional gradient.
//!
//! Scores are logits; `q(y)_j = softmax(y_j)`. The risk of a score field
//! against ground truth `p` is `-sum_j sum_k p_jk ln q_jk` (natural log),
//! and the regression target for the next weak learner is the descent
//! direction `p_j - q_j`.

use crate::error::{ensure_dims, Error, Result};
use crate::types::{ClassDistribution, LabelField, Matrix, ScoreField};

/// `ln sum_k exp(v_k)`, shifted by the max for stability.
#[inline]
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Writes `softmax(v)` into `out` without validation.
#[inline]
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn softmax(scores_row: &[f64]) -> Result<ClassDistribution> {
    if scores_row.is_empty() {
        return Err(Error::Empty("score row"));
    }
    if scores_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let mut out = vec![0.0; scores_row.len()];
    softmax_into(scores_row, &mut out);
    Ok(ClassDistribution::from_raw(out))
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
#[inline]
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy of `softmax(v)` computed from logits directly.
#[inline]
pub(crate) fn softmax_entropy(v: &[f64], scratch: &mut [f64]) -> f64 {
    softmax_into(v, scratch);
    entropy(scratch)
}

/// Cross-entropy of one element: `-sum_k p_k ln softmax(y)_k`.
#[inline]
pub(crate) fn element_cross_entropy(y: &[f64], p: &[f64]) -> f64 {
    let lse = log_sum_exp(y);
    y.iter().zip(p).map(|(&yk, &pk)| pk * (lse - yk)).sum()
}

fn check_pair(scores: &ScoreField, truth: &LabelField) -> Result<()> {
    ensure_dims("element count", truth.num_elements(), scores.num_elements())?;
    ensure_dims("class count", truth.num_classes(), scores.num_classes())
}

/// Risk of one score field, summed over its elements.
pub fn cross_entropy_risk(scores: &ScoreField, truth: &LabelField) -> Result<f64> {
    check_pair(scores, truth)?;
    Ok((0..scores.num_elements())
        .map(|j| element_cross_entropy(scores.row(j), truth.row(j)))
        .sum())
}

/// Risk averaged over a set of instances.
pub fn corpus_risk<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a ScoreField, &'a LabelField)>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, t) in pairs {
        total += cross_entropy_risk(s, t)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("instance set"));
    }
    Ok(total / n as f64)
}

/// Per-element `p_j - softmax(y_j)`: the negative gradient of
/// [`cross_entropy_risk`] with respect to the scores.
pub fn descent_direction(scores: &ScoreField, truth: &LabelField) -> Result<Matrix> {
    check_pair(scores, truth)?;
    let k = scores.num_classes();
    let mut out = Matrix::zeros(scores.num_elements(), k);
    let mut q = vec![0.0; k];
    for j in 0..scores.num_elements() {
        softmax_into(scores.row(j), &mut q);
        for ((o, &p), &qk) in out.row_mut(j).iter_mut().zip(truth.row(j)).zip(&q) {
            *o = p - qk;
        }
    }
    Ok(out)
}

/// Mean softmax entropy over a set of elements.
pub fn mean_entropy(scores: &ScoreField, pixel_set: &[usize]) -> Result<f64> {
    if pixel_set.is_empty() {
        return Err(Error::Empty("pixel set"));
    }
    let mut scratch = vec![0.0; scores.num_classes()];
    let mut sum = 0.0;
    for &j in pixel_set {
        if j >= scores.num_elements() {
            return Err(Error::OutOfRange {
                what: "pixel",
                index: j,
                len: scores.num_elements(),
            });
        }
        sum += softmax_entropy(scores.row(j), &mut scratch);
    }
    Ok(sum / pixel_set.len() as f64)
}
