//! Training objectives with their gradients.

use super::array::{Array4, Real};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Mean softmax cross-entropy over supervised pixels.
///
/// `labels` holds one class id per pixel (`batch * h * w`, same order as
/// the logits' planes). Pixels whose id is in `ignore` contribute neither
/// loss nor gradient. Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Array4<T>, labels: &[u8], ignore: &[u8]) -> Result<(f64, Array4<T>)> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::ShapeMismatch {
            node: "softmax_cross_entropy".into(),
            detail: format!("{} labels for {} pixels", labels.len(), n * hw),
        });
    }
    let supervised = labels.iter().filter(|l| !ignore.contains(l)).count();
    if supervised == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    let inv = 1.0 / supervised as f64;
    let mut grad = Array4::zeros(logits.shape());
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for b in 0..n {
        let src = logits.image(b);
        let dst = grad.image_mut(b);
        for p in 0..hw {
            let label = labels[b * hw + p];
            if ignore.contains(&label) {
                continue;
            }
            let label = label as usize;
            if label >= c {
                return Err(Error::Invariant(format!("label {label} out of range for {c} classes")));
            }
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(src[ch * hw + p].to_f64().unwrap());
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (src[ch * hw + p].to_f64().unwrap() - mx).exp();
                probs[ch] = e;
                sum += e;
            }
            total += sum.ln() + mx - src[label * hw + p].to_f64().unwrap();
            for ch in 0..c {
                let target = if ch == label { 1.0 } else { 0.0 };
                dst[ch * hw + p] = T::lit((probs[ch] / sum - target) * inv);
            }
        }
    }
    Ok((total * inv, grad))
}

/// Positive-weighted binary cross-entropy
/// `-mean[pw * t * ln p + (1 - t) * ln(1 - p)]` over valid pixels, with `p`
/// clamped to `[1e-7, 1 - 1e-7]`.
///
/// Returns the loss plus gradients w.r.t. `pred` and w.r.t. the logit that
/// produced `pred` through a sigmoid (the latter ignores the clamp and is
/// what training uses).
pub fn weighted_bce<T: Real>(
    pred: &Array4<T>,
    target: &Array4<T>,
    valid: Option<&[bool]>,
    pos_weight: f64,
) -> Result<BceOutput<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            node: "weighted_bce".into(),
            detail: format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        });
    }
    if let Some(v) = valid {
        if v.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                node: "weighted_bce".into(),
                detail: format!("{} validity flags for {} values", v.len(), pred.len()),
            });
        }
    }
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let count = (0..pred.len()).filter(|&i| is_valid(i)).count();
    if count == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0f64;
    let mut grad_pred = Array4::zeros(pred.shape());
    let mut grad_logit = Array4::zeros(pred.shape());
    for i in 0..pred.len() {
        if !is_valid(i) {
            continue;
        }
        let raw = pred.data()[i].to_f64().unwrap();
        let t = target.data()[i].to_f64().unwrap();
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= pos_weight * t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        let dp = if raw == p {
            -(pos_weight * t / p - (1.0 - t) / (1.0 - p)) * inv
        } else {
            0.0
        };
        grad_pred.data_mut()[i] = T::lit(dp);
        grad_logit.data_mut()[i] = T::lit((-pos_weight * t * (1.0 - raw) + (1.0 - t) * raw) * inv);
    }
    Ok(BceOutput {
        loss: loss * inv,
        grad_pred,
        grad_logit,
    })
}

#[derive(Debug, Clone)]
pub struct BceOutput<T> {
    pub loss: f64,
    pub grad_pred: Array4<T>,
    pub grad_logit: Array4<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Array4::<f32>::zeros([1, 5, 2, 2]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 2, 3], &[]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-9);
        // softmax - onehot, averaged over 4 pixels
        let g = grad.at(0, 0, 0, 0) as f64;
        assert!((g - (0.2 - 1.0) / 4.0).abs() < 1e-7);
        assert!((grad.at(0, 1, 0, 0) as f64 - 0.2 / 4.0).abs() < 1e-7);
    }

    #[test]
    fn ignored_pixels_have_no_gradient() {
        let logits = Array4::<f64>::from_vec([1, 2, 1, 2], vec![1.0, -1.0, 0.5, 2.0]);
        let (_, grad) = softmax_cross_entropy(&logits, &[0, 9], &[9]).unwrap();
        assert_eq!(grad.at(0, 0, 0, 1), 0.0);
        assert_eq!(grad.at(0, 1, 0, 1), 0.0);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[9, 9], &[9]),
            Err(Error::NoSupervisedPixels)
        ));
    }

    #[test]
    fn bce_closed_forms() {
        let p = Array4::<f64>::full([1, 1, 2, 2], 0.5);
        let t = Array4::<f64>::full([1, 1, 2, 2], 1.0);
        let out = weighted_bce(&p, &t, None, 2.0).unwrap();
        assert!((out.loss - 2.0 * 2f64.ln()).abs() < 1e-12);

        let p = Array4::<f64>::from_vec([1, 1, 1, 2], vec![0.9, 0.2]);
        let t = Array4::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 0.0]);
        let out = weighted_bce(&p, &t, None, 2.0).unwrap();
        let expected = -(2.0 * 0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.21694).abs() < 1e-5);
    }

    #[test]
    fn bce_respects_validity() {
        let p = Array4::<f32>::from_vec([1, 1, 1, 2], vec![0.9, 0.2]);
        let t = Array4::<f32>::from_vec([1, 1, 1, 2], vec![1.0, 1.0]);
        let out = weighted_bce(&p, &t, Some(&[true, false]), 1.0).unwrap();
        assert!((out.loss + 0.9f64.ln()).abs() < 1e-6);
        assert_eq!(out.grad_logit.data()[1], 0.0);
        assert!(matches!(
            weighted_bce(&p, &t, Some(&[false, false]), 1.0),
            Err(Error::NoSupervisedPixels)
        ));
    }
}
