use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::tiling::LabelMap;

const LOG_FLOOR: f64 = 1e-12;

/// Mean focal loss `−(1 − p_t)^γ · log p_t` over non-ignored pixels, where
/// `p_t` is the softmax probability of the true class. `γ = 0` is cross-entropy.
pub fn focal_loss<T: Real>(logits: &Var<T>, labels: &LabelMap, gamma: f64, ignore: u8) -> Result<Var<T>> {
    let (c, h, w) = match *logits.shape() {
        [1, c, h, w] => (c, h, w),
        ref s => return Err(Error::Dimension(format!("focal loss expects [1,C,H,W] logits, got {s:?}"))),
    };
    if (labels.height, labels.width) != (h, w) {
        return Err(Error::Dimension(format!(
            "labels {}x{} do not match logits {h}x{w}",
            labels.height, labels.width
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Argument(format!("focal gamma {gamma} must be >= 0")));
    }
    let hw = h * w;
    let z = logits.value().data();
    let counted = labels.data.iter().filter(|&&l| l != ignore).count();
    if counted == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv = 1.0 / counted as f64;
    let log_floor = LOG_FLOOR.ln();
    let mut total = 0.0;
    // d loss / d logits, computed alongside the value.
    let mut grad = vec![T::zero(); c * hw];
    let mut probs = vec![0.0; c];
    for (i, &label) in labels.data.iter().enumerate() {
        if label == ignore {
            continue;
        }
        let t = label as usize;
        if t >= c {
            return Err(Error::Argument(format!("label {t} outside {c} classes")));
        }
        let max = (0..c).map(|k| z[k * hw + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (k, p) in probs.iter_mut().enumerate() {
            *p = (z[k * hw + i].as_f64() - max).exp();
            sum += *p;
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        let log_pt = (z[t * hw + i].as_f64() - max - sum.ln()).max(log_floor);
        let pt = probs[t];
        let q = 1.0 - pt;
        total -= q.powf(gamma) * log_pt;
        // dFL/dz_k = [γ(1−p)^(γ−1)·p·log p − (1−p)^γ]·(δ_tk − p_k)
        let pull = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * log_pt
        };
        let coef = (pull - q.powf(gamma)) * inv;
        for (k, &p) in probs.iter().enumerate() {
            let delta = if k == t { 1.0 } else { 0.0 };
            grad[k * hw + i] = T::of_f64(coef * (delta - p));
        }
    }
    let value = Tensor::scalar(T::of_f64(total * inv));
    Ok(Var::from_op(
        value,
        vec![logits.clone()],
        Box::new(move |go| {
            let g = go[0];
            vec![Some(grad.iter().map(|&v| v * g).collect())]
        }),
    ))
}
