//! The local segmentation network: a siamese encoder shared by the patch and
//! all of its contexts, locality-aware attention between patch and context
//! features, adaptive fusion of the per-context results and an upsampling
//! decoder on top of a residual join with the patch features.

use super::params::{conv, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use crate::tiling::ContextScale;

/// Which features the attention map aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregate {
    /// `softmax(R)·X_i`: re-weights the local patch features.
    #[default]
    Local,
    /// `softmax(R)·X_u`: gathers context features (non-local block convention).
    Context,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Aggregate::Local),
            "context" => Ok(Aggregate::Context),
            _ => Err(Error::Config(format!("aggregate must be local|context, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregate::Local => "local",
            Aggregate::Context => "context",
        })
    }
}

/// How per-context features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextFusion {
    /// Learned squeeze-and-split weight maps.
    #[default]
    Adaptive,
    /// Fixed weights `1/T`.
    Uniform,
    /// No contexts at all: the decoder sees only the patch features.
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub context_lambdas: Vec<ContextScale>,
    pub patch: usize,
    pub enc_channels: Vec<usize>,
    pub feature_stride: usize,
    pub squeeze_channels: usize,
    pub focal_gamma: f64,
    pub aggregate: Aggregate,
    pub fusion: ContextFusion,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            in_channels: 3,
            context_lambdas: vec![
                ContextScale::Factor(1.0),
                ContextScale::Factor(2.0),
                ContextScale::Factor(3.0),
            ],
            patch: 64,
            enc_channels: vec![16, 32, 32],
            feature_stride: 4,
            squeeze_channels: 32,
            focal_gamma: 3.0,
            aggregate: Aggregate::Local,
            fusion: ContextFusion::Adaptive,
        }
    }
}

fn scale_rank(s: &ContextScale) -> f64 {
    match s {
        ContextScale::Factor(l) => *l,
        ContextScale::Global => f64::INFINITY,
    }
}

impl SegModelConfig {
    /// Number of contexts actually encoded.
    pub fn num_contexts(&self) -> usize {
        match self.fusion {
            ContextFusion::Disabled => 0,
            _ => self.context_lambdas.len(),
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.enc_channels.last().expect("validated")
    }

    pub fn feature_size(&self) -> usize {
        self.patch / self.feature_stride
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes {} must be in 2..=255", self.num_classes));
        }
        if self.enc_channels.len() < 2 || self.enc_channels.contains(&0) {
            return bad(format!("enc_channels {:?} needs at least two positive widths", self.enc_channels));
        }
        let stride = 1usize << (self.enc_channels.len() - 1);
        if self.feature_stride != stride {
            return bad(format!(
                "feature_stride {} does not match {} encoder blocks (stride {stride})",
                self.feature_stride,
                self.enc_channels.len()
            ));
        }
        if self.patch == 0 || self.patch % self.feature_stride != 0 {
            return bad(format!("patch {} must be divisible by {}", self.patch, self.feature_stride));
        }
        if self.fusion != ContextFusion::Disabled {
            if self.context_lambdas.is_empty() {
                return bad("at least one context scale is required".into());
            }
            for pair in self.context_lambdas.windows(2) {
                if scale_rank(&pair[0]) >= scale_rank(&pair[1]) {
                    return bad(format!("context scales must increase strictly: {:?}", self.context_lambdas));
                }
            }
            if let Some(ContextScale::Factor(l)) = self.context_lambdas.first() {
                if *l < 1.0 {
                    return bad(format!("context scale {l} must be >= 1"));
                }
            }
        }
        if self.squeeze_channels == 0 {
            return bad("squeeze_channels must be positive".into());
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal gamma {} must be >= 0", self.focal_gamma));
        }
        Ok(())
    }
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct SegOutput<T: Real> {
    pub logits: Var<T>,
    /// `[1,T,h_x,w_x]` fusion weight maps (absent when contexts are disabled).
    pub fusion_weights: Option<Var<T>>,
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Real> {
    pub config: SegModelConfig,
    pub params: ParamStore<T>,
}

/// Locality-aware contextual correlation.
///
/// Flattens both feature maps to `[N,c]`, forms the relevance `R = A·Bᵀ`
/// (`A` local, `B` context), normalizes each row over context pixels and
/// aggregates `A` (or `B`) with it. Returns the output `[1,c,h,w]` and the
/// row-stochastic attention `[N,N]`.
pub fn lcc<T: Real>(local: &Var<T>, context: &Var<T>, aggregate: Aggregate) -> Result<(Var<T>, Var<T>)> {
    if local.shape() != context.shape() {
        return Err(Error::Dimension(format!(
            "lcc inputs differ: local {:?}, context {:?}",
            local.shape(),
            context.shape()
        )));
    }
    let (c, h, w) = match *local.shape() {
        [1, c, h, w] => (c, h, w),
        ref s => return Err(Error::Dimension(format!("lcc expects [1,c,h,w], got {s:?}"))),
    };
    let n = h * w;
    let a = local.reshape(&[c, n])?.transpose()?;
    let b_t = context.reshape(&[c, n])?;
    let attention = a.matmul(&b_t)?.softmax(1)?;
    let values = match aggregate {
        Aggregate::Local => a,
        Aggregate::Context => b_t.transpose()?,
    };
    let out = attention.matmul(&values)?.transpose()?.reshape(&[1, c, h, w])?;
    Ok((out, attention))
}

/// Repeats a `[1,1,h,w]` map across `c` channels.
fn expand_channels<T: Real>(map: &Var<T>, c: usize) -> Result<Var<T>> {
    Var::concat(&vec![map.clone(); c], 1)
}

/// Weighted sum `Σ_t H^t ⊙ X^t` with `H` a `[1,T,h,w]` weight tensor.
fn weighted_sum<T: Real>(features: &[Var<T>], weights: &Var<T>) -> Result<Var<T>> {
    let c = features[0].shape()[1];
    let mut acc: Option<Var<T>> = None;
    for (t, x) in features.iter().enumerate() {
        let term = x.mul(&expand_channels(&weights.narrow(1, t, 1)?, c)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one feature"))
}

/// Multi-context fusion. `Adaptive` predicts per-pixel weights through a
/// 1×1 squeeze convolution, ReLU, a 1×1 split convolution to `T` channels and
/// a softmax over those channels; `Uniform` uses `1/T` everywhere.
pub fn fuse<T: Real>(
    features: &[Var<T>],
    params: &ParamStore<T>,
    mode: ContextFusion,
    expected: usize,
) -> Result<(Var<T>, Var<T>)> {
    if features.len() != expected || expected == 0 {
        return Err(Error::Config(format!(
            "fusion configured for {expected} contexts, got {}",
            features.len()
        )));
    }
    let shape = features[0].shape().to_vec();
    if let Some(bad) = features.iter().find(|f| f.shape() != shape.as_slice()) {
        return Err(Error::Dimension(format!(
            "fusion inputs differ: {:?} vs {shape:?}",
            bad.shape()
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    let weights = match mode {
        ContextFusion::Adaptive => {
            let stacked = Var::concat(features, 1)?;
            let squeezed = conv(params, "fusion.squeeze", &stacked, 0)?.relu();
            conv(params, "fusion.split", &squeezed, 0)?.softmax(1)?
        }
        ContextFusion::Uniform => Var::constant(Tensor::full(
            &[1, expected, h, w],
            T::one() / T::of_f64(expected as f64),
        )),
        ContextFusion::Disabled => {
            return Err(Error::Config("fusion is disabled for this model".into()));
        }
    };
    Ok((weighted_sum(features, &weights)?, weights))
}

impl<T: Real> SegModel<T> {
    /// Fresh model with seeded He initialization.
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.enc_channels.iter().enumerate() {
            params.add_conv(&format!("encoder.conv{}", i + 1), cout, cin, 3, seed)?;
            cin = cout;
        }
        let c = config.feature_channels();
        let t = config.num_contexts();
        if config.fusion == ContextFusion::Adaptive {
            params.add_conv("fusion.squeeze", config.squeeze_channels, t * c, 1, seed)?;
            // Zero split weights: fusion starts as the plain average of the contexts.
            params.add_zero_conv("fusion.split", t, config.squeeze_channels, 1)?;
        }
        // Decoder widths mirror the encoder in reverse, one block per pooling level.
        let mut cin = c;
        let blocks = config.enc_channels.len() - 1;
        for i in 0..blocks {
            let cout = config.enc_channels[blocks - 1 - i];
            params.add_conv(&format!("decoder.conv{}", i + 1), cout, cin, 3, seed)?;
            cin = cout;
        }
        params.add_conv("decoder.head", config.num_classes, cin, 1, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against a fresh model.
    pub fn from_params(config: SegModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        template.params.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    /// Gradient-free copy for inference.
    pub fn detached(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.detached(),
        }
    }

    /// Siamese encoder: conv3×3 + ReLU blocks with a 2× max-pool between blocks.
    pub fn encode(&self, x: &Var<T>) -> Result<Var<T>> {
        let p = self.config.patch;
        match *x.shape() {
            [1, c, h, w] if c == self.config.in_channels && h == p && w == p => {}
            ref s => {
                return Err(Error::Dimension(format!(
                    "encoder expects [1,{},{p},{p}], got {s:?}",
                    self.config.in_channels
                )))
            }
        }
        let mut h = x.clone();
        for i in 0..self.config.enc_channels.len() {
            if i > 0 {
                h = h.max_pool2d(2, 2)?;
            }
            h = conv(&self.params, &format!("encoder.conv{}", i + 1), &h, 1)?.relu();
        }
        Ok(h)
    }

    fn decode(&self, features: &Var<T>) -> Result<Var<T>> {
        let mut h = features.clone();
        for i in 0..self.config.enc_channels.len() - 1 {
            h = conv(&self.params, &format!("decoder.conv{}", i + 1), &h, 1)?.relu();
            h = h.upsample_bilinear(2)?;
        }
        conv(&self.params, "decoder.head", &h, 0)
    }

    /// Logits `[1,C,patch,patch]` for a patch and its rescaled contexts.
    pub fn forward(&self, patch: &Var<T>, contexts: &[Var<T>]) -> Result<SegOutput<T>> {
        let t = self.config.num_contexts();
        if contexts.len() != t {
            return Err(Error::Config(format!(
                "model expects {t} contexts, got {}",
                contexts.len()
            )));
        }
        let local = self.encode(patch)?;
        let (joined, fusion_weights) = if t == 0 {
            (local, None)
        } else {
            let attended = contexts
                .iter()
                .map(|ctx| {
                    let encoded = self.encode(ctx)?;
                    Ok(lcc(&local, &encoded, self.config.aggregate)?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let (fused, weights) = fuse(&attended, &self.params, self.config.fusion, t)?;
            (fused.add(&local)?, Some(weights))
        };
        Ok(SegOutput {
            logits: self.decode(&joined)?,
            fusion_weights,
        })
    }
}
