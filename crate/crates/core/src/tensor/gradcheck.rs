use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, Var};
use crate::error::{arg_err, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

const ABS_FLOOR: f64 = 1e-8;

/// Compares the autodiff gradient of `f` at `params` with central finite
/// differences. With `sample = Some((count, seed))` only `count` coordinates
/// drawn uniformly over all parameters are checked; otherwise all of them.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    sample_coords: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(arg_err!("finite-difference step {eps} outside [1e-6, 1e-3]"));
    }
    let vars: Vec<Var<f64>> = params.iter().cloned().map(Var::param).collect();
    let loss = f(&vars)?;
    if loss.value().len() != 1 {
        return Err(arg_err!(
            "grad_check needs a scalar function, got shape {:?}",
            loss.shape()
        ));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().map_or_else(|| vec![0.0; v.value().len()], |g| g.to_vec()))
        .collect();

    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = match sample_coords {
        Some((count, seed)) if count < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, count).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let inputs: Vec<Var<f64>> = params
            .iter()
            .enumerate()
            .map(|(p, t)| {
                if p == which {
                    let mut data = t.to_vec();
                    data[idx] += delta;
                    Var::constant(Tensor::from_parts(t.shape().to_vec(), data))
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        Ok(f(&inputs)?.value().item())
    };

    let mut max_rel_error: f64 = 0.0;
    for &flat in &coords {
        let (which, idx) = locate(params, flat);
        let numeric = (eval(which, idx, eps)? - eval(which, idx, -eps)?) / (2.0 * eps);
        let a = analytic[which][idx];
        let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
        max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked: coords.len(),
    })
}

fn locate(params: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    unreachable!("coordinate beyond parameter count")
}
