//! Training objectives: the Lovasz hinge surrogate that optimizes the
//! Jaccard index directly, and a stable binary cross-entropy baseline.
//!
//! The hinge form: per-pixel margins m_i = 1 - logit_i * sign_i with
//! sign = +-1 from the label. Margins are sorted descending (stable), the
//! Jaccard set function's discrete gradient is computed along that order,
//! and the loss is the inner product of the clamped sorted margins with
//! those weights. The backward holds the sort order fixed, the standard
//! subgradient of the piecewise-linear extension.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::{Tape, VarId};

/// Loss value plus its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossValue<E> {
    pub value: E,
    pub grad_logits: Vec<E>,
}

/// Discrete gradient of the Jaccard loss along a descending-error ordering.
///
/// `gt_sorted` holds the labels reordered by descending hinge error. Entry k
/// is the increase of the Jaccard loss when the k-th sorted pixel joins the
/// mistake set. Entries are nonnegative and telescope to the full-set value.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Result<Vec<f64>> {
    if gt_sorted.is_empty() {
        return Err(Error::Data("lovasz_grad on empty vector".into()));
    }
    let gts = gt_sorted.iter().filter(|&&v| v).count() as f64;
    if gts == 0.0 {
        return Err(Error::Data(
            "lovasz_grad needs foreground pixels; flip labels for all-background maps".into(),
        ));
    }
    let p = gt_sorted.len();
    let mut out = Vec::with_capacity(p);
    let mut cum_gt = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_gt += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_gt;
        let union = gts + cum_bg;
        let jaccard_loss = 1.0 - intersection / union;
        out.push(jaccard_loss - prev);
        prev = jaccard_loss;
    }
    Ok(out)
}

/// Lovasz hinge on flat logits/labels. All-background targets are scored on
/// flipped labels and negated logits (the Jaccard of the background), which
/// keeps the construction defined.
pub fn lovasz_hinge_value<E: Scalar>(logits: &[E], gt: &[bool]) -> Result<LossValue<E>> {
    if logits.len() != gt.len() {
        return Err(Error::dim("pixels", gt.len(), logits.len(), "lovasz_hinge"));
    }
    if logits.is_empty() {
        return Err(Error::Data("lovasz_hinge on empty map".into()));
    }
    let flip = !gt.iter().any(|&v| v);
    let labels: Vec<bool> = if flip { gt.iter().map(|&v| !v).collect() } else { gt.to_vec() };

    // margins in f64: the sort order must be exact
    let margins: Vec<f64> = logits
        .iter()
        .zip(&labels)
        .map(|(&l, &g)| {
            let sign = if g { 1.0 } else { -1.0 };
            let l = if flip { -l.to_f64() } else { l.to_f64() };
            1.0 - l * sign
        })
        .collect();

    let mut order: Vec<usize> = (0..margins.len()).collect();
    // stable descending sort; ties keep row-major order
    order.sort_by(|&a, &b| margins[b].partial_cmp(&margins[a]).unwrap());

    let gt_sorted: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
    let weights = lovasz_grad(&gt_sorted)?;

    let mut value = 0.0;
    let mut grad = vec![E::ZERO; logits.len()];
    for (k, &i) in order.iter().enumerate() {
        let m = margins[i];
        if m > 0.0 {
            value += m * weights[k];
            // d(margin)/d(logit) = -sign; the flip negates the logit once more
            let sign = if labels[i] { 1.0 } else { -1.0 };
            let d = -sign * weights[k];
            grad[i] = E::from_f64(if flip { -d } else { d });
        }
    }
    Ok(LossValue {
        value: E::from_f64(value),
        grad_logits: grad,
    })
}

/// Mean binary cross-entropy from logits, in the log-sum-exp-stable form.
pub fn bce_with_logits_value<E: Scalar>(logits: &[E], gt: &[bool]) -> Result<LossValue<E>> {
    if logits.len() != gt.len() {
        return Err(Error::dim("pixels", gt.len(), logits.len(), "bce_with_logits"));
    }
    if logits.is_empty() {
        return Err(Error::Data("bce_with_logits on empty map".into()));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![E::ZERO; logits.len()];
    for (i, (&l, &g)) in logits.iter().zip(gt).enumerate() {
        let l = l.to_f64();
        let sign = if g { 1.0 } else { -1.0 };
        let x = sign * l;
        // log(1 + exp(-x)) = max(-x, 0) + log(1 + exp(-|x|))
        value += (-x).max(0.0) + (-x.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-l).exp());
        let target = if g { 1.0 } else { 0.0 };
        grad[i] = E::from_f64((sig - target) / n);
    }
    Ok(LossValue {
        value: E::from_f64(value / n),
        grad_logits: grad,
    })
}

/// Record the Lovasz hinge of a logits slot against a mask on the tape.
pub fn lovasz_hinge<E: Scalar>(tape: &mut Tape<E>, logits: VarId, gt: &Mask) -> Result<VarId> {
    let v = tape.value(logits);
    if v.shape.h != gt.h || v.shape.w != gt.w || v.shape.n != 1 || v.shape.c != 1 {
        return Err(Error::dim("pixels", gt.h * gt.w, v.numel(), "lovasz_hinge logits"));
    }
    let loss = lovasz_hinge_value(&v.data, &gt.data)?;
    tape.custom_scalar(logits, loss.value, loss.grad_logits)
}

/// Record the stable BCE of a logits slot against a mask on the tape.
pub fn bce_with_logits<E: Scalar>(tape: &mut Tape<E>, logits: VarId, gt: &Mask) -> Result<VarId> {
    let v = tape.value(logits);
    if v.shape.h != gt.h || v.shape.w != gt.w || v.shape.n != 1 || v.shape.c != 1 {
        return Err(Error::dim("pixels", gt.h * gt.w, v.numel(), "bce logits"));
    }
    let loss = bce_with_logits_value(&v.data, &gt.data)?;
    tape.custom_scalar(logits, loss.value, loss.grad_logits)
}
