//! Training: Adam with poly decay and gradient accumulation for the
//! segmentation and refinement networks, the early-stop refinement data
//! generator and the synthetic dataset.

mod optim;
pub mod synth;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::{adam_step, poly_lr, AdamState, BETA1, BETA2, EPSILON};
pub use synth::{synth_dataset, LabeledImage, SynthConfig};

use crate::error::{Error, Result};
use crate::eval::{patch_inputs, predict_patches, ConfusionMatrix};
use crate::model::{focal_loss, ParamStore, RefineNet, SegModel, SegModelConfig};
use crate::tensor::{Real, Tensor, Var};
use crate::tiling::{context_window, extract_context, merge_average, plan_grid, ContextScale, LabelMap, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub poly_power: f64,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub focal_gamma: f64,
    /// Epoch after which the segmentation model is snapshotted for refinement data.
    pub refine_source_epochs: usize,
    /// Random horizontal/vertical flips of every sample.
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            poly_power: 0.9,
            accum_steps: 6,
            epochs: 10,
            seed: 0,
            focal_gamma: 3.0,
            refine_source_epochs: Self::default_source_epochs(10),
            flips: false,
        }
    }
}

impl TrainConfig {
    /// 40% of the run, at least one epoch, always short of the full run
    /// (0, the untrained model, for a single-epoch run).
    pub fn default_source_epochs(epochs: usize) -> usize {
        (epochs * 2 / 5).max(1).min(epochs.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.accum_steps == 0 || self.epochs == 0 {
            return Err(Error::Config("accum_steps and epochs must be positive".into()));
        }
        if self.refine_source_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "refine_source_epochs {} must be below epochs {}",
                self.refine_source_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_miou: f64,
}

/// `epoch,iter,lr,loss,train_miou`, reals with 9 significant digits.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,iter,lr,loss,train_miou\n");
    for r in rows {
        writeln!(s, "{},{},{:.8e},{:.8e},{:.8e}", r.epoch, r.iter, r.lr, r.loss, r.train_miou).unwrap();
    }
    s
}

/// A patch, its contexts and its labels.
#[derive(Debug, Clone)]
pub struct SegSample<T: Real> {
    pub patch: Tensor<T>,
    pub contexts: Vec<Tensor<T>>,
    pub labels: LabelMap,
}

/// Cuts every image into grid patches with the contexts `model` expects.
pub fn seg_samples<T: Real>(data: &[LabeledImage], model: &SegModelConfig, overlap: usize) -> Result<Vec<SegSample<T>>> {
    model.validate()?;
    let scales = &model.context_lambdas[..model.num_contexts()];
    let mut out = Vec::new();
    for item in data {
        if item.image.height != item.labels.height || item.image.width != item.labels.width {
            return Err(Error::Config("image and label sizes differ".into()));
        }
        let image = item.image.to_tensor::<T>();
        let grid = plan_grid(item.image.height, item.image.width, model.patch, overlap)?;
        for k in 0..grid.len() {
            let (patch, contexts) = patch_inputs(&image, &grid, k, scales)?;
            let (y, x) = grid.origin(k);
            out.push(SegSample {
                patch,
                contexts,
                labels: item.labels.crop(y, x, grid.patch, grid.patch),
            });
        }
    }
    Ok(out)
}

/// Flips the last two axes of an `[.., H, W]` tensor.
fn flip<T: Real>(t: &Tensor<T>, vertical: bool, horizontal: bool) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in src.chunks_exact(h * w) {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

fn flip_labels(l: &LabelMap, vertical: bool, horizontal: bool) -> LabelMap {
    let t = Tensor::<f32>::new(&[l.height, l.width], l.data.iter().map(|&v| v as f32).collect()).expect("sized");
    let data = flip(&t, vertical, horizontal).data().iter().map(|&v| v as u8).collect();
    LabelMap::new(l.height, l.width, data).expect("sized")
}

/// Final parameters plus one log row per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<LogRow>,
}

/// What the shared loop needs from a sample.
trait Sample<T: Real> {
    fn inputs(&self) -> Vec<&Tensor<T>>;
    fn labels(&self) -> &LabelMap;
}

impl<T: Real> Sample<T> for SegSample<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.patch).chain(&self.contexts).collect()
    }

    fn labels(&self) -> &LabelMap {
        &self.labels
    }
}

/// Shared loop: shuffle per epoch, accumulate `accum_steps` scaled losses,
/// one Adam step with the poly rate per accumulation.
fn fit<T: Real, S: Sample<T>>(
    params: &mut ParamStore<T>,
    samples: &[S],
    cfg: &TrainConfig,
    num_classes: usize,
    forward: impl Fn(&ParamStore<T>, &[Var<T>]) -> Result<Var<T>>,
    mut on_epoch: impl FnMut(usize, &ParamStore<T>) -> Result<()>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    let n = samples.len();
    let steps = n.div_ceil(cfg.accum_steps);
    let total = cfg.epochs * steps;
    let mut state = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut cm = ConfusionMatrix::new(num_classes);
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.accum_steps) {
            let weight = T::one() / T::of_f64(chunk.len() as f64);
            for &i in chunk {
                let s = &samples[i];
                let (fv, fh) = if cfg.flips { (rng.random(), rng.random()) } else { (false, false) };
                let inputs: Vec<Var<T>> = s
                    .inputs()
                    .into_iter()
                    .map(|t| Var::constant(if fv || fh { flip(t, fv, fh) } else { t.clone() }))
                    .collect();
                let labels = if fv || fh { flip_labels(s.labels(), fv, fh) } else { s.labels().clone() };
                let logits = forward(params, &inputs)?;
                let loss = match focal_loss(&logits, &labels, cfg.focal_gamma, IGNORE_LABEL) {
                    Err(Error::NoValidPixels) => continue,
                    other => other?,
                };
                loss_sum += loss.value().item().as_f64();
                counted += 1;
                let c = logits.shape()[1];
                let pred = logits.value().reshape(&logits.shape()[1..])?.argmax_axis(0)?;
                let pred = LabelMap::new(labels.height, labels.width, pred.into_iter().map(|v| v as u8).collect())?;
                debug_assert_eq!(c, num_classes);
                cm.accumulate(&pred, &labels, IGNORE_LABEL)?;
                loss.scale(weight).backward()?;
            }
            lr = poly_lr(iter, total, cfg.lr0, cfg.poly_power)?;
            adam_step(params, &mut state, lr)?;
            iter += 1;
        }
        let loss = if counted == 0 { f64::NAN } else { loss_sum / counted as f64 };
        if !loss.is_finite() {
            return Err(Error::State(format!("training loss became {loss} in epoch {epoch}")));
        }
        log.push(LogRow {
            epoch,
            iter,
            lr,
            loss,
            train_miou: crate::eval::metrics(&cm).map(|m| m.miou).unwrap_or(0.0),
        });
        on_epoch(epoch, params)?;
    }
    Ok(log)
}

/// Trains `model` on prepared samples. `on_epoch` sees the parameters after
/// every epoch (used to snapshot the early-stopped model).
pub fn train_segmentation<T: Real>(
    model: SegModel<T>,
    samples: &[SegSample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &SegModel<T>) -> Result<()>,
) -> Result<TrainOutcome<SegModel<T>>> {
    let config = model.config.clone();
    let t = config.num_contexts();
    if let Some(bad) = samples
        .iter()
        .find(|s| s.contexts.len() != t || s.patch.shape() != [1, config.in_channels, config.patch, config.patch])
    {
        return Err(Error::Config(format!(
            "sample with patch {:?} and {} contexts does not fit the model ({} contexts, patch {})",
            bad.patch.shape(),
            bad.contexts.len(),
            t,
            config.patch
        )));
    }
    let mut params = model.params;
    let log = fit(
        &mut params,
        samples,
        cfg,
        config.num_classes,
        |p, inputs| {
            let m = SegModel { config: config.clone(), params: p.clone() };
            Ok(m.forward(&inputs[0], &inputs[1..])?.logits)
        },
        |epoch, p| on_epoch(epoch, &SegModel { config: config.clone(), params: p.clone() }),
    )?;
    Ok(TrainOutcome {
        model: SegModel { config, params },
        log,
    })
}

/// Refinement input: a local probability patch, the crude-map context
/// around it (rescaled to patch size) and ground truth.
#[derive(Debug, Clone)]
pub struct RefineSample {
    pub local: Tensor<f32>,
    pub context: Tensor<f32>,
    pub labels: LabelMap,
}

impl Sample<f32> for RefineSample {
    fn inputs(&self) -> Vec<&Tensor<f32>> {
        vec![&self.local, &self.context]
    }

    fn labels(&self) -> &LabelMap {
        &self.labels
    }
}

/// Runs the (early-stopped) segmentation model over every image, merges the
/// crude map by averaging and emits one sample per patch.
pub fn generate_refinement_data(
    seg: &SegModel<f32>,
    data: &[LabeledImage],
    overlap: usize,
    refine_scale: ContextScale,
    threads: usize,
) -> Result<Vec<RefineSample>> {
    let seg = seg.detached();
    let (c, p) = (seg.config.num_classes, seg.config.patch);
    let mut out = Vec::new();
    for item in data {
        let image = item.image.to_tensor::<f32>();
        let grid = plan_grid(item.image.height, item.image.width, p, overlap)?;
        let local = predict_patches(&seg, &image, &grid, threads)?;
        let crude = merge_average(&local, &grid)?;
        for (k, prob) in local {
            let win = context_window(&grid, k, refine_scale)?;
            let (y, x) = grid.origin(k);
            out.push(RefineSample {
                local: prob.reshape(&[1, c, p, p])?,
                context: extract_context(crude.tensor(), &win, p)?.reshape(&[1, c, p, p])?,
                labels: item.labels.crop(y, x, p, p),
            });
        }
    }
    Ok(out)
}

pub fn train_refinement(
    net: RefineNet<f32>,
    samples: &[RefineSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<RefineNet<f32>>> {
    let config = net.config.clone();
    let mut params = net.params;
    let log = fit(
        &mut params,
        samples,
        cfg,
        config.num_classes,
        |p, inputs| {
            RefineNet { config: config.clone(), params: p.clone() }.forward(&inputs[0], &inputs[1])
        },
        |_, _| Ok(()),
    )?;
    Ok(TrainOutcome {
        model: RefineNet { config, params },
        log,
    })
}
