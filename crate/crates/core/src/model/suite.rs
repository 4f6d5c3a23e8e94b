//! The finite-difference suite behind `fctl grad-check`: every differentiable
//! op on small random inputs, then sampled parameters of both full networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{focal_loss, fuse, lcc, Aggregate, ContextFusion, ParamStore, RefineConfig, RefineNet, SegModel, SegModelConfig};
use crate::error::Result;
use crate::tensor::{grad_check, GradCheckReport, Tensor, Var};
use crate::tiling::{ContextScale, LabelMap, IGNORE_LABEL};

/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for sampled full-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Initial values plus uniform noise, so zero-initialised layers (fusion split,
/// refinement head) and zero biases do not hide gradients upstream.
fn jittered(params: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let values = params.values().into_iter().map(|t| t.map(|v| v + rng.random_range(-0.3..0.3))).collect();
    params.with_values(values)
}

/// Random values pushed away from zero and from each other, so ReLU kinks and
/// max-pool ties stay outside the finite-difference stencil.
fn spread_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = rand_tensor(shape, rng);
    let d = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v.abs() < 0.05 { v + 0.1 } else { v } + i as f64 * 1e-2)
        .collect();
    Tensor::new(shape, d).expect("sized")
}

/// `Σ probe ⊙ y`, a scalar that exercises every output element.
fn probe_sum(y: Var<f64>, rng_seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let probe = rand_tensor(y.shape(), &mut rng);
    Ok(y.mul(&Var::constant(probe))?.sum())
}

type OpFn = fn(&[Var<f64>]) -> Result<Var<f64>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let x = |rng: &mut ChaCha8Rng| rand_tensor(&[1, 3, 4, 4], rng);
    vec![
        ("conv2d", |p| p[0].conv2d(&p[1], &p[2], 1, 1), vec![x(rng), rand_tensor(&[2, 3, 3, 3], rng), rand_tensor(&[2], rng)]),
        ("conv2d_stride2", |p| p[0].conv2d(&p[1], &p[2], 2, 0), vec![x(rng), rand_tensor(&[2, 3, 2, 2], rng), rand_tensor(&[2], rng)]),
        ("max_pool2d", |p| p[0].max_pool2d(2, 2), vec![spread_tensor(&[1, 3, 4, 4], rng)]),
        ("upsample_bilinear", |p| p[0].upsample_bilinear(2), vec![x(rng)]),
        ("resize_bilinear", |p| p[0].resize_bilinear(3, 7), vec![x(rng)]),
        ("softmax", |p| p[0].softmax(1), vec![x(rng)]),
        ("matmul", |p| p[0].matmul(&p[1]), vec![rand_tensor(&[3, 4], rng), rand_tensor(&[4, 2], rng)]),
        ("transpose", |p| p[0].transpose(), vec![rand_tensor(&[3, 5], rng)]),
        ("reshape", |p| p[0].reshape(&[4, 12]), vec![x(rng)]),
        ("concat", |p| Var::concat(&[p[0].clone(), p[1].clone()], 1), vec![x(rng), rand_tensor(&[1, 2, 4, 4], rng)]),
        ("narrow", |p| p[0].narrow(2, 1, 2), vec![x(rng)]),
        ("add", |p| p[0].add(&p[1]), vec![x(rng), x(rng)]),
        ("add_bias", |p| p[0].add(&p[1]), vec![x(rng), rand_tensor(&[3], rng)]),
        ("mul", |p| p[0].mul(&p[1]), vec![x(rng), x(rng)]),
        ("relu", |p| Ok(p[0].relu()), vec![spread_tensor(&[1, 3, 4, 4], rng)]),
        ("scale", |p| Ok(p[0].scale(-2.5)), vec![x(rng)]),
        ("sum", |p| Ok(p[0].sum()), vec![x(rng)]),
        ("mean", |p| Ok(p[0].mean()), vec![x(rng)]),
        ("lcc_local", |p| Ok(lcc(&p[0], &p[1], Aggregate::Local)?.0), vec![x(rng), x(rng)]),
        ("lcc_context", |p| Ok(lcc(&p[0], &p[1], Aggregate::Context)?.0), vec![x(rng), x(rng)]),
        (
            "fuse_adaptive",
            |p| {
                let mut store = ParamStore::new();
                store.insert("fusion.squeeze.weight", Tensor::zeros(&[2, 9, 1, 1]))?;
                store.insert("fusion.squeeze.bias", Tensor::zeros(&[2]))?;
                store.insert("fusion.split.weight", Tensor::zeros(&[3, 2, 1, 1]))?;
                store.insert("fusion.split.bias", Tensor::zeros(&[3]))?;
                let store = store.with_vars(p[3..].to_vec())?;
                Ok(fuse(&p[..3], &store, ContextFusion::Adaptive, 3)?.0)
            },
            vec![
                x(rng),
                x(rng),
                x(rng),
                rand_tensor(&[2, 9, 1, 1], rng),
                rand_tensor(&[2], rng).map(|v| v + 1.5),
                rand_tensor(&[3, 2, 1, 1], rng),
                rand_tensor(&[3], rng),
            ],
        ),
    ]
}

fn random_labels(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let data = (0..h * w)
        .map(|_| if rng.random_range(0..10) == 0 { IGNORE_LABEL } else { rng.random_range(0..c as u8) })
        .collect();
    LabelMap::new(h, w, data).expect("sized")
}

/// Runs every check at step `eps`. Deterministic in `seed`.
pub fn grad_check_suite(seed: u64, eps: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, (name, f, params)) in op_cases(&mut rng).into_iter().enumerate() {
        let probe_seed = seed ^ (i as u64 + 1);
        let report = grad_check(|p| probe_sum(f(p)?, probe_seed), &params, eps, None)?;
        out.push(CheckOutcome { name: name.into(), report, tolerance: OP_TOLERANCE });
    }

    for gamma in [0.0, 3.0] {
        let z = rand_tensor(&[1, 4, 3, 3], &mut rng).map(|v| 3.0 * v);
        let labels = random_labels(3, 3, 4, &mut rng);
        let report = grad_check(|p| focal_loss(&p[0], &labels, gamma, IGNORE_LABEL), &[z], eps, None)?;
        out.push(CheckOutcome { name: format!("focal_loss_gamma{gamma}"), report, tolerance: OP_TOLERANCE });
    }

    let seg_cfg = SegModelConfig {
        num_classes: 3,
        patch: 8,
        enc_channels: vec![3, 4, 4],
        squeeze_channels: 4,
        context_lambdas: vec![ContextScale::Factor(1.0), ContextScale::Factor(2.0), ContextScale::Factor(3.0)],
        ..SegModelConfig::default()
    };
    for aggregate in [Aggregate::Local, Aggregate::Context] {
        let cfg = SegModelConfig { aggregate, ..seg_cfg.clone() };
        let fresh = SegModel::<f64>::new(cfg.clone(), seed)?;
        let model = SegModel::from_params(cfg.clone(), jittered(&fresh.params, &mut rng)?)?;
        let patch = Var::constant(rand_tensor(&[1, 3, 8, 8], &mut rng));
        let contexts: Vec<_> = (0..3).map(|_| Var::constant(rand_tensor(&[1, 3, 8, 8], &mut rng))).collect();
        let labels = random_labels(8, 8, 3, &mut rng);
        let report = grad_check(
            |p| {
                let m = SegModel::from_params(cfg.clone(), model.params.with_vars(p.to_vec())?)?;
                focal_loss(&m.forward(&patch, &contexts)?.logits, &labels, cfg.focal_gamma, IGNORE_LABEL)
            },
            &model.params.values(),
            eps,
            Some((64, seed)),
        )?;
        out.push(CheckOutcome {
            name: format!("seg_forward_focal_{aggregate}"),
            report,
            tolerance: MODEL_TOLERANCE,
        });
    }

    let ref_cfg = RefineConfig { num_classes: 3, patch: 8, channels: [3, 4], ..RefineConfig::default() };
    let fresh = RefineNet::<f64>::new(ref_cfg.clone(), seed)?;
    let net = RefineNet::from_params(ref_cfg.clone(), jittered(&fresh.params, &mut rng)?)?;
    let prob = |rng: &mut ChaCha8Rng| Var::constant(rand_tensor(&[1, 3, 8, 8], rng).map(|v| 2.0 * v)).softmax(1);
    let (a, b) = (prob(&mut rng)?, prob(&mut rng)?);
    let labels = random_labels(8, 8, 3, &mut rng);
    let report = grad_check(
        |p| {
            let n = RefineNet::from_params(ref_cfg.clone(), net.params.with_vars(p.to_vec())?)?;
            focal_loss(&n.forward(&a, &b)?, &labels, ref_cfg.focal_gamma, IGNORE_LABEL)
        },
        &net.params.values(),
        eps,
        Some((64, seed)),
    )?;
    out.push(CheckOutcome { name: "refine_forward_focal".into(), report, tolerance: MODEL_TOLERANCE });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = grad_check_suite(1, 1e-5).unwrap();
        assert!(results.len() >= 25);
        for r in &results {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }
}
