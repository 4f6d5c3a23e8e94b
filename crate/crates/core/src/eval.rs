//! Confusion-matrix metrics and full tiled inference.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{RefineNet, SegModel};
use crate::tensor::{Real, Tensor, Var};
use crate::train::LabeledImage;
use crate::tiling::{
    context_window, extract_context, extract_patch, merge_average, montage, plan_grid, ContextScale,
    LabelMap, PatchGrid, ProbMap,
};

/// `cm[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    /// Adds the counts of `pred` against `gt`, skipping `ignore` pixels.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= c || p >= c {
                return Err(Error::Argument(format!("label {} outside {c} classes", g.max(p))));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension(format!(
                "cannot add {}-class and {}-class confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Counts `pred` against `gt`.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Per-class IoU; `None` for classes absent from both ground truth and prediction.
    pub iou: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub miou: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
}

/// IoU, F1 and pixel accuracy. Classes with no ground truth and no
/// predicted pixels do not enter the means.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::NoValidPixels);
    }
    let c = cm.num_classes;
    let mut iou = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k) as f64;
        let fn_: f64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p) as f64).sum();
        let fp: f64 = (0..c).filter(|&g| g != k).map(|g| cm.get(g, k) as f64).sum();
        if tp + fp + fn_ == 0.0 {
            iou.push(None);
            f1.push(None);
        } else {
            iou.push(Some(tp / (tp + fp + fn_)));
            f1.push(Some(2.0 * tp / (2.0 * tp + fp + fn_)));
        }
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MetricsReport {
        miou: mean(&iou),
        f1_macro: mean(&f1),
        accuracy: cm.trace() as f64 / total as f64,
        iou,
        f1,
    })
}

impl MetricsReport {
    /// `class,iou,f1` rows followed by a `miou,f1_macro,accuracy` summary, 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,f1\n");
        let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        for (k, (i, f)) in self.iou.iter().zip(&self.f1).enumerate() {
            writeln!(s, "{k},{},{}", cell(*i), cell(*f)).unwrap();
        }
        s.push_str("miou,f1_macro,accuracy\n");
        writeln!(s, "{:.6},{:.6},{:.6}", self.miou, self.f1_macro, self.accuracy).unwrap();
        s
    }
}

/// How local results become the full-resolution mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    Montage,
    Average,
    Refine,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "montage" => Ok(MergeMode::Montage),
            "average" => Ok(MergeMode::Average),
            "refine" => Ok(MergeMode::Refine),
            _ => Err(Error::Config(format!("merge mode must be montage|average|refine, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMode::Montage => "montage",
            MergeMode::Average => "average",
            MergeMode::Refine => "refine",
        })
    }
}

/// Anything that turns one grid cell of an image into class probabilities.
pub trait PatchPredictor: Sync {
    /// `[C,patch,patch]` probabilities for patch `index`.
    fn predict(&self, image: &Tensor<f32>, grid: &PatchGrid, index: usize) -> Result<Tensor<f32>>;
}

/// The patch `[1,C,p,p]` and its rescaled contexts for one grid cell.
pub fn patch_inputs<T: Real>(
    image: &Tensor<T>,
    grid: &PatchGrid,
    index: usize,
    scales: &[ContextScale],
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let with_batch = |t: Tensor<T>| -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape)
    };
    let patch = with_batch(extract_patch(image, grid, index)?)?;
    let contexts = scales
        .iter()
        .map(|&s| with_batch(extract_context(image, &context_window(grid, index, s)?, grid.patch)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((patch, contexts))
}

/// Channel softmax of `[1,C,p,p]` logits as `[C,p,p]`.
pub fn logits_to_probs<T: Real>(logits: &Var<T>) -> Result<Tensor<T>> {
    let p = logits.softmax(1)?;
    let s = p.shape()[1..].to_vec();
    p.value().reshape(&s)
}

impl PatchPredictor for SegModel<f32> {
    fn predict(&self, image: &Tensor<f32>, grid: &PatchGrid, index: usize) -> Result<Tensor<f32>> {
        let scales = &self.config.context_lambdas[..self.config.num_contexts()];
        let (patch, contexts) = patch_inputs(image, grid, index, scales)?;
        let contexts: Vec<_> = contexts.into_iter().map(Var::constant).collect();
        let out = self.forward(&Var::constant(patch), &contexts)?;
        logits_to_probs(&out.logits)
    }
}

/// Worker count from `FCTL_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("FCTL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `f` for every grid cell on up to `threads` workers; results come back in grid order.
pub fn map_patches<R: Send>(
    count: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, count.max(1));
    if threads == 1 {
        return (0..count).map(&f).collect();
    }
    let chunk = count.div_ceil(threads);
    let results: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(count)).map(f).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Probabilities for every patch of `image`, in grid order.
pub fn predict_patches<P: PatchPredictor + ?Sized>(
    predictor: &P,
    image: &Tensor<f32>,
    grid: &PatchGrid,
    threads: usize,
) -> Result<Vec<(usize, Tensor<f32>)>> {
    let probs = map_patches(grid.len(), threads, |k| predictor.predict(image, grid, k))?;
    Ok(probs.into_iter().enumerate().collect())
}

/// Refines every patch against the crude merged map and returns the refined
/// probabilities in grid order.
pub fn refine_patches(
    refiner: &RefineNet<f32>,
    local: &[(usize, Tensor<f32>)],
    crude: &ProbMap<f32>,
    grid: &PatchGrid,
    refine_scale: ContextScale,
    threads: usize,
) -> Result<Vec<(usize, Tensor<f32>)>> {
    let c = crude.num_classes();
    let p = grid.patch;
    let refined = map_patches(local.len(), threads, |i| {
        let (k, prob) = &local[i];
        let win = context_window(grid, *k, refine_scale)?;
        let ctx = extract_context(crude.tensor(), &win, p)?.reshape(&[1, c, p, p])?;
        let logits = refiner.forward(
            &Var::constant(prob.reshape(&[1, c, p, p])?),
            &Var::constant(ctx),
        )?;
        Ok((*k, logits_to_probs(&logits)?))
    })?;
    Ok(refined)
}

/// Result of [`evaluate_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub probs: ProbMap<f32>,
    pub labels: LabelMap,
    pub report: Option<MetricsReport>,
}

/// Geometry and merge settings for whole-image inference.
#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub patch: usize,
    pub overlap: usize,
    pub merge: MergeMode,
    pub refine_scale: ContextScale,
    pub num_classes: usize,
    pub ignore: u8,
    pub threads: usize,
}

/// Tiles `image`, predicts every patch, merges per `cfg.merge` and scores
/// against `gt` when given.
pub fn evaluate_pipeline<P: PatchPredictor + ?Sized>(
    image: &Tensor<f32>,
    gt: Option<&LabelMap>,
    predictor: &P,
    refiner: Option<&RefineNet<f32>>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let (h, w) = match *image.shape() {
        [_, h, w] => (h, w),
        ref s => return Err(Error::Dimension(format!("image must be [C,H,W], got {s:?}"))),
    };
    if cfg.merge == MergeMode::Refine && refiner.is_none() {
        return Err(Error::Config("refine merge mode needs a refinement checkpoint".into()));
    }
    let grid = plan_grid(h, w, cfg.patch, cfg.overlap)?;
    let local = predict_patches(predictor, image, &grid, cfg.threads)?;
    let probs = match cfg.merge {
        MergeMode::Montage => montage(&local, &grid)?,
        MergeMode::Average => merge_average(&local, &grid)?,
        MergeMode::Refine => {
            let crude = merge_average(&local, &grid)?;
            let refiner = refiner.expect("checked above");
            let refined = refine_patches(refiner, &local, &crude, &grid, cfg.refine_scale, cfg.threads)?;
            merge_average(&refined, &grid)?
        }
    };
    let labels = probs.argmax();
    let report = gt
        .map(|gt| metrics(&confusion(&labels, gt, cfg.num_classes, cfg.ignore)?))
        .transpose()?;
    Ok(PipelineOutput { probs, labels, report })
}

/// Scores a whole labelled set through the pipeline with one global confusion matrix.
pub fn evaluate_images<P: PatchPredictor + ?Sized>(
    data: &[LabeledImage],
    predictor: &P,
    refiner: Option<&RefineNet<f32>>,
    cfg: &PipelineConfig,
) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for item in data {
        let out = evaluate_pipeline(&item.image.to_tensor(), None, predictor, refiner, cfg)?;
        cm.accumulate(&out.labels, &item.labels, cfg.ignore)?;
    }
    metrics(&cm)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tiling::IGNORE_LABEL;

    fn random_labels(h: usize, w: usize, c: u8, rng: &mut ChaCha8Rng) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c)).collect()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_labels(8, 8, 3, &mut rng);
        let cm = confusion(&gt, &gt, 3, IGNORE_LABEL).unwrap();
        assert_eq!(cm.trace(), 64);
        assert_eq!(cm.total(), 64);
        let m = metrics(&cm).unwrap();
        assert_eq!((m.miou, m.f1_macro, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ignored_ground_truth_counts_nothing() {
        let gt = LabelMap::new(2, 2, vec![IGNORE_LABEL; 4]).unwrap();
        let pred = LabelMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let cm = confusion(&pred, &gt, 2, IGNORE_LABEL).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(metrics(&cm), Err(Error::NoValidPixels)));
    }

    #[test]
    fn half_half_against_all_zero() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0; 4]).unwrap();
        let m = metrics(&confusion(&pred, &gt, 2, IGNORE_LABEL).unwrap()).unwrap();
        assert_eq!(m.iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(m.miou, 0.25);
        assert_eq!(m.accuracy, 0.5);
        // F1: class 0 → 2·2/(4 + 2) = 2/3, class 1 → 0.
        assert!((m.f1_macro - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_leave_the_mean() {
        let gt = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let m = metrics(&confusion(&gt, &gt, 4, IGNORE_LABEL).unwrap()).unwrap();
        assert_eq!(m.iou, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        let b = LabelMap::new(1, 4, vec![0; 4]).unwrap();
        assert!(matches!(confusion(&a, &b, 2, IGNORE_LABEL), Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_layout() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0; 4]).unwrap();
        let csv = metrics(&confusion(&pred, &gt, 2, IGNORE_LABEL).unwrap()).unwrap().to_csv();
        assert_eq!(
            csv,
            "class,iou,f1\n0,0.500000,0.666667\n1,0.000000,0.000000\nmiou,f1_macro,accuracy\n0.250000,0.333333,0.500000\n"
        );
    }

    /// Pixel-loop count oracle.
    fn count_oracle(pred: &LabelMap, gt: &LabelMap, c: usize) -> Vec<u64> {
        let mut out = vec![0; c * c];
        for y in 0..gt.height {
            for x in 0..gt.width {
                let g = gt.get(y, x);
                if g != IGNORE_LABEL {
                    out[g as usize * c + pred.get(y, x) as usize] += 1;
                }
            }
        }
        out
    }

    #[test]
    fn confusion_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random_labels(16, 16, 3, &mut rng);
        let mut gt = random_labels(16, 16, 3, &mut rng);
        gt.data[5] = IGNORE_LABEL;
        let cm = confusion(&pred, &gt, 3, IGNORE_LABEL).unwrap();
        assert_eq!(cm.counts, count_oracle(&pred, &gt, 3));
    }

    /// Returns the one-hot ground truth for each patch.
    struct Oracle<'a>(&'a LabelMap, usize);

    impl PatchPredictor for Oracle<'_> {
        fn predict(&self, _: &Tensor<f32>, grid: &PatchGrid, k: usize) -> Result<Tensor<f32>> {
            let (y, x) = grid.origin(k);
            Ok(self.0.crop(y, x, grid.patch, grid.patch).one_hot(self.1))
        }
    }

    #[test]
    fn oracle_predictor_is_perfect_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_labels(40, 36, 4, &mut rng);
        let image = Tensor::<f32>::zeros(&[3, 40, 36]);
        let refiner = RefineNet::<f32>::new(
            crate::model::RefineConfig { num_classes: 4, patch: 16, ..Default::default() },
            0,
        )
        .unwrap();
        for merge in [MergeMode::Montage, MergeMode::Average] {
            let cfg = PipelineConfig {
                patch: 16,
                overlap: 4,
                merge,
                refine_scale: ContextScale::Factor(2.0),
                num_classes: 4,
                ignore: IGNORE_LABEL,
                threads: 2,
            };
            let out = evaluate_pipeline(&image, Some(&gt), &Oracle(&gt, 4), Some(&refiner), &cfg).unwrap();
            assert_eq!(out.labels, gt);
            assert_eq!(out.report.unwrap().miou, 1.0);
        }
        let cfg = PipelineConfig {
            patch: 16,
            overlap: 4,
            merge: MergeMode::Refine,
            refine_scale: ContextScale::Factor(2.0),
            num_classes: 4,
            ignore: IGNORE_LABEL,
            threads: 1,
        };
        assert!(matches!(
            evaluate_pipeline(&image, Some(&gt), &Oracle(&gt, 4), None, &cfg),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn tiled_counts_equal_whole_image(h in 2usize..20, w in 2usize..20, cut in 1usize..19, seed in any::<u64>()) {
            prop_assume!(cut < h);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_labels(h, w, 3, &mut rng);
            let gt = random_labels(h, w, 3, &mut rng);
            let whole = confusion(&pred, &gt, 3, IGNORE_LABEL).unwrap();
            let mut a = confusion(&pred.crop(0, 0, cut, w), &gt.crop(0, 0, cut, w), 3, IGNORE_LABEL).unwrap();
            let b = confusion(&pred.crop(cut, 0, h - cut, w), &gt.crop(cut, 0, h - cut, w), 3, IGNORE_LABEL).unwrap();
            let mut ba = b.clone();
            ba.merge(&a).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);
            prop_assert_eq!(&ba, &whole);
            let m = metrics(&whole).unwrap();
            for v in [m.miou, m.f1_macro, m.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
