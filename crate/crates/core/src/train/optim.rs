use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

/// `lr0 · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, lr0: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Argument("poly schedule needs total_iter > 0".into()));
    }
    if iter > total {
        return Err(Error::Argument(format!("iteration {iter} beyond total {total}")));
    }
    if iter == total {
        return Ok(0.0);
    }
    Ok(lr0 * (1.0 - iter as f64 / total as f64).powf(power))
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment buffers, one per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.var.value().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated on `params`.
/// Missing gradients count as zero. The store is replaced by fresh leaves, so
/// gradients start from zero again.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let (b1, b2, eps) = (T::of_f64(BETA1), T::of_f64(BETA2), T::of_f64(EPSILON));
    let (one, step_lr) = (T::one(), T::of_f64(lr));
    let (c1, c2) = (T::of_f64(c1), T::of_f64(c2));
    let mut values = Vec::with_capacity(params.len());
    for ((p, m), v) in params.iter().zip(&mut state.m).zip(&mut state.v) {
        let value = p.var.value();
        if m.len() != value.len() {
            return Err(Error::State(format!(
                "moment buffer of {} has {} entries, parameter has {}",
                p.name,
                m.len(),
                value.len()
            )));
        }
        let grad = p.var.grad();
        let mut out = value.to_vec();
        for i in 0..out.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g.data()[i]);
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            out[i] = out[i] - step_lr * m_hat / (v_hat.sqrt() + eps);
        }
        values.push(Tensor::new(value.shape(), out)?);
    }
    *params = params.with_values(values)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Var;

    #[test]
    fn poly_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 5e-5, 0.9).unwrap(), 5e-5);
        assert_eq!(poly_lr(100, 100, 5e-5, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 1.0, 0.9).unwrap();
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.535_886_731).abs() < 1e-9);
        assert!(matches!(poly_lr(101, 100, 1.0, 0.9), Err(Error::Argument(_))));
        assert!(poly_lr(0, 0, 1.0, 0.9).is_err());
        let lrs: Vec<f64> = (0..=37).map(|i| poly_lr(i, 37, 1e-3, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    fn set_grad(s: &ParamStore<f64>, g: f64) {
        s.get("w").unwrap().accumulate_grad(&[g]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        set_grad(&s, 1.0);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        let w = s.get("w").unwrap();
        assert!((w.value().item() - 0.9).abs() < 1e-7);
        assert!(w.grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut s = scalar_store(3.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().value().item(), 3.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&ParamStore::<f64>::new());
        assert!(matches!(adam_step(&mut s, &mut st, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        // Minimises (w − 3)² with a plain scalar Adam alongside.
        let mut s = scalar_store(-1.0);
        let mut st = AdamState::new(&s);
        let (mut w, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let lr = poly_lr(t - 1, 100, 0.05, 0.9).unwrap();
            let p = s.get("w").unwrap().clone();
            let loss = p.add(&Var::constant(Tensor::scalar(-3.0))).unwrap();
            loss.mul(&loss).unwrap().sum().backward().unwrap();
            adam_step(&mut s, &mut st, lr).unwrap();

            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((s.get("w").unwrap().value().item() - w).abs() < 1e-10, "step {t}");
        }
    }
}
