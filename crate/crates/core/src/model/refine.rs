//! Two-stream U-Net that refines a local probability mask using the crude
//! merged mask around it.

use super::params::{conv, ParamStore};
use super::seg::{lcc, Aggregate};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub num_classes: usize,
    pub patch: usize,
    /// Widths of the two encoder blocks of each stream.
    pub channels: [usize; 2],
    pub aggregate: Aggregate,
    pub focal_gamma: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            patch: 64,
            channels: [16, 32],
            aggregate: Aggregate::Local,
            focal_gamma: 3.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.patch % 4 != 0 || self.patch == 0 || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid refinement config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefineNet<T: Real> {
    pub config: RefineConfig,
    pub params: ParamStore<T>,
}

const STREAMS: [&str; 2] = ["refine.local", "refine.context"];
/// Probabilities are clamped here before the log so hard zeros stay finite.
const LOG_FLOOR: f64 = 1e-6;

impl<T: Real> RefineNet<T> {
    pub fn new(config: RefineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.channels;
        let mut params = ParamStore::new();
        for stream in STREAMS {
            params.add_conv(&format!("{stream}.conv1"), c1, config.num_classes, 3, seed)?;
            params.add_conv(&format!("{stream}.conv2"), c2, c1, 3, seed)?;
        }
        params.add_conv("refine.decoder.conv1", c2, c2 + c2, 3, seed)?;
        params.add_conv("refine.decoder.conv2", c1, c2 + c1, 3, seed)?;
        // The head predicts a correction to the local log-probabilities; zero
        // weights make an untrained refiner the identity.
        params.add_zero_conv("refine.decoder.head", config.num_classes, c1, 1)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: RefineConfig, params: ParamStore<T>) -> Result<Self> {
        Self::new(config.clone(), 0)?.params.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    pub fn detached(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.detached(),
        }
    }

    /// Returns the pre-pool features of both blocks and the pooled bottleneck input.
    fn stream(&self, name: &str, x: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        let s1 = conv(&self.params, &format!("{name}.conv1"), x, 1)?.relu();
        let s2 = conv(&self.params, &format!("{name}.conv2"), &s1.max_pool2d(2, 2)?, 1)?.relu();
        let bottom = s2.max_pool2d(2, 2)?;
        Ok((s1, s2, bottom))
    }

    /// Refined logits `[1,C,patch,patch]` from the local mask and the rescaled
    /// context mask: `ln(local) + head(...)`.
    pub fn forward(&self, local_prob: &Var<T>, context_prob: &Var<T>) -> Result<Var<T>> {
        let (c, p) = (self.config.num_classes, self.config.patch);
        for (what, x) in [("local", local_prob), ("context", context_prob)] {
            if x.shape() != [1, c, p, p] {
                return Err(Error::Dimension(format!(
                    "{what} mask must be [1,{c},{p},{p}], got {:?}",
                    x.shape()
                )));
            }
        }
        let (skip1, skip2, local) = self.stream(STREAMS[0], local_prob)?;
        let (_, _, context) = self.stream(STREAMS[1], context_prob)?;
        let (attended, _) = lcc(&local, &context, self.config.aggregate)?;
        let bottleneck = attended.add(&local)?;
        let up = Var::concat(&[bottleneck.upsample_bilinear(2)?, skip2], 1)?;
        let up = conv(&self.params, "refine.decoder.conv1", &up, 1)?.relu();
        let up = Var::concat(&[up.upsample_bilinear(2)?, skip1], 1)?;
        let up = conv(&self.params, "refine.decoder.conv2", &up, 1)?.relu();
        let correction = conv(&self.params, "refine.decoder.head", &up, 0)?;
        let floor = T::of_f64(LOG_FLOOR);
        correction.add(&Var::constant(local_prob.value().map(|v| v.max(floor).ln())))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::focal_loss;
    use crate::tensor::{grad_check, Tensor};
    use crate::tiling::LabelMap;

    fn prob(c: usize, p: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let z = Tensor::new(&[1, c, p, p], (0..c * p * p).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        Var::constant(z).softmax(1).unwrap().value().clone()
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = RefineConfig { patch: 16, ..RefineConfig::default() };
        let net = RefineNet::<f32>::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Var::constant(prob(5, 16, &mut rng).cast());
        let b = Var::constant(prob(5, 16, &mut rng).cast());
        assert_eq!(net.forward(&a, &b).unwrap().shape(), &[1, 5, 16, 16]);
        let wrong = Var::constant(Tensor::zeros(&[1, 4, 16, 16]));
        assert!(net.forward(&a, &wrong).is_err());
    }

    #[test]
    fn untrained_refiner_is_the_identity() {
        let cfg = RefineConfig { num_classes: 4, patch: 8, ..RefineConfig::default() };
        let net = RefineNet::<f64>::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let local = prob(4, 8, &mut rng);
        let out = net.forward(&Var::constant(local.clone()), &Var::constant(prob(4, 8, &mut rng))).unwrap();
        let back = out.softmax(1).unwrap();
        assert!(back.value().max_abs_diff(&local) < 1e-12);
    }

    #[test]
    fn zero_decoder_adds_bias_to_log_local() {
        let cfg = RefineConfig { num_classes: 3, patch: 8, ..RefineConfig::default() };
        let net = RefineNet::<f64>::new(cfg.clone(), 2).unwrap();
        let values = net
            .params
            .iter()
            .map(|p| match p.name.as_str() {
                "refine.decoder.head.bias" => Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap(),
                n if n.starts_with("refine.decoder") => Tensor::zeros(p.var.shape()),
                _ => p.var.value().clone(),
            })
            .collect();
        let net = RefineNet::from_params(cfg, net.params.with_values(values).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let local = prob(3, 8, &mut rng);
        let mut data = local.to_vec();
        data[0] = 0.0;
        let local = Tensor::new(local.shape(), data).unwrap();
        let out = net.forward(&Var::constant(local.clone()), &Var::constant(prob(3, 8, &mut rng))).unwrap();
        for (i, &v) in out.value().data().iter().enumerate() {
            let expected = [0.5, -1.0, 2.0][i / 64] + local.data()[i].max(LOG_FLOOR).ln();
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn refine_with_focal_loss_passes_grad_check() {
        let cfg = RefineConfig { num_classes: 3, patch: 8, channels: [3, 4], ..RefineConfig::default() };
        let net = RefineNet::<f64>::new(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Move off the zero-initialised head so every layer carries gradient.
        let values = net
            .params
            .values()
            .into_iter()
            .map(|t| t.map(|v| v + rng.random_range(-0.3..0.3)))
            .collect();
        let net = RefineNet::from_params(cfg.clone(), net.params.with_values(values).unwrap()).unwrap();
        let a = Var::constant(prob(3, 8, &mut rng));
        let b = Var::constant(prob(3, 8, &mut rng));
        let labels = LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3)).collect()).unwrap();
        let r = grad_check(
            |p| {
                let net = RefineNet::from_params(cfg.clone(), net.params.with_vars(p.to_vec())?)?;
                focal_loss(&net.forward(&a, &b)?, &labels, 3.0, 255)
            },
            &net.params.values(),
            1e-5,
            Some((64, 12)),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
