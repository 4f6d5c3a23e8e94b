//! Patch grids, context windows and merging of per-patch results.
//!
//! A [`PatchGrid`] tiles an `H×W` raster with square patches whose starts are
//! spaced `patch − overlap` apart, the last start clamped flush to the border.
//! Context windows are λ-scaled squares centred on a patch and translated the
//! minimal distance needed to stay inside the image.

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear_plane, Real, ResizeTable, Tensor};

/// Reserved label for pixels excluded from training and scoring.
pub const IGNORE_LABEL: u8 = 255;

fn geometry(msg: String) -> Error {
    Error::Geometry(msg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub overlap: usize,
    pub starts_y: Vec<usize>,
    pub starts_x: Vec<usize>,
}

/// Minimal stride-spaced starts covering `[0, dim)`, last start flush.
fn plan_axis(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let steps = (dim - patch).div_ceil(stride);
    let mut starts: Vec<usize> = (0..steps).map(|i| i * stride).collect();
    starts.push(dim - patch);
    starts
}

/// Tiles an `image_h × image_w` raster with square patches.
pub fn plan_grid(image_h: usize, image_w: usize, patch: usize, overlap: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return Err(geometry("patch size must be positive".into()));
    }
    if overlap >= patch {
        return Err(geometry(format!("overlap {overlap} must be smaller than patch {patch}")));
    }
    if patch > image_h || patch > image_w {
        return Err(geometry(format!(
            "patch {patch} does not fit in a {image_h}x{image_w} image"
        )));
    }
    let stride = patch - overlap;
    Ok(PatchGrid {
        image_h,
        image_w,
        patch,
        overlap,
        starts_y: plan_axis(image_h, patch, stride),
        starts_x: plan_axis(image_w, patch, stride),
    })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.starts_y.len() * self.starts_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corner `(y, x)` of patch `index` (row-major).
    pub fn origin(&self, index: usize) -> (usize, usize) {
        let cols = self.starts_x.len();
        (self.starts_y[index / cols], self.starts_x[index % cols])
    }
}

/// Size of a context relative to its patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextScale {
    /// Square of side `λ·patch` centred on the patch, `λ ≥ 1`.
    Factor(f64),
    /// The whole image.
    Global,
}

impl ContextScale {
    pub fn local() -> Self {
        ContextScale::Factor(1.0)
    }
}

impl std::fmt::Display for ContextScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContextScale::Factor(l) => write!(f, "{l}"),
            ContextScale::Global => write!(f, "g"),
        }
    }
}

/// A rectangle of the image used as context for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextWindow {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub scale: ContextScale,
}

impl ContextWindow {
    pub fn contains(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        self.y0 <= y && self.x0 <= x && y + h <= self.y0 + self.h && x + w <= self.x0 + self.w
    }
}

fn place(origin: usize, patch: usize, size: usize, dim: usize) -> usize {
    let centred = origin as isize - ((size - patch) / 2) as isize;
    centred.clamp(0, (dim - size) as isize) as usize
}

/// Context window of patch `index` at the given scale.
pub fn context_window(grid: &PatchGrid, index: usize, scale: ContextScale) -> Result<ContextWindow> {
    if index >= grid.len() {
        return Err(geometry(format!("patch index {index} outside grid of {}", grid.len())));
    }
    let lambda = match scale {
        ContextScale::Global => {
            return Ok(ContextWindow {
                y0: 0,
                x0: 0,
                h: grid.image_h,
                w: grid.image_w,
                scale,
            })
        }
        ContextScale::Factor(l) => l,
    };
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(geometry(format!("context scale {lambda} must be >= 1")));
    }
    let size = (lambda * grid.patch as f64).round() as usize;
    if size > grid.image_h || size > grid.image_w {
        return Err(geometry(format!(
            "context {size}x{size} (scale {lambda}) exceeds the {}x{} image; use the global context instead",
            grid.image_h, grid.image_w
        )));
    }
    let (py, px) = grid.origin(index);
    Ok(ContextWindow {
        y0: place(py, grid.patch, size, grid.image_h),
        x0: place(px, grid.patch, size, grid.image_w),
        h: size,
        w: size,
        scale,
    })
}

/// Crops `win` from a `[C,H,W]` raster and resizes it to `[C,out,out]`.
pub fn extract_context<T: Real>(raster: &Tensor<T>, win: &ContextWindow, out: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match *raster.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Dimension(format!("raster must be [C,H,W], got {s:?}"))),
    };
    if win.h == 0 || win.w == 0 || win.y0 + win.h > h || win.x0 + win.w > w {
        return Err(geometry(format!(
            "window {}x{} at ({}, {}) outside {h}x{w} raster",
            win.h, win.w, win.y0, win.x0
        )));
    }
    if out == 0 {
        return Err(geometry("output size must be positive".into()));
    }
    let data = raster.data();
    let mut crop = Vec::with_capacity(c * win.h * win.w);
    for ch in 0..c {
        for y in win.y0..win.y0 + win.h {
            let row = (ch * h + y) * w;
            crop.extend_from_slice(&data[row + win.x0..row + win.x0 + win.w]);
        }
    }
    if (win.h, win.w) == (out, out) {
        return Tensor::new(&[c, out, out], crop);
    }
    let ty = ResizeTable::new(win.h, out);
    let tx = ResizeTable::new(win.w, out);
    let mut resized = vec![T::zero(); c * out * out];
    for (src, dst) in crop
        .chunks_exact(win.h * win.w)
        .zip(resized.chunks_exact_mut(out * out))
    {
        resize_bilinear_plane(src, win.w, &ty, &tx, dst);
    }
    Tensor::new(&[c, out, out], resized)
}

/// The `[C,patch,patch]` crop of patch `index`.
pub fn extract_patch<T: Real>(raster: &Tensor<T>, grid: &PatchGrid, index: usize) -> Result<Tensor<T>> {
    let win = context_window(grid, index, ContextScale::local())?;
    extract_context(raster, &win, grid.patch)
}

/// Hard per-pixel class ids, `IGNORE_LABEL` allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "label map {height}x{width} given {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        LabelMap { height: h, width: w, data }
    }

    /// One-hot `[C,H,W]` probabilities; ignored pixels get a uniform row.
    pub fn one_hot<T: Real>(&self, num_classes: usize) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); num_classes * hw];
        let uniform = T::one() / T::of_f64(num_classes as f64);
        for (i, &l) in self.data.iter().enumerate() {
            if (l as usize) < num_classes {
                out[l as usize * hw + i] = T::one();
            } else {
                for c in 0..num_classes {
                    out[c * hw + i] = uniform;
                }
            }
        }
        Tensor::from_parts(vec![num_classes, self.height, self.width], out)
    }
}

/// Per-pixel class probabilities `[C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T: Real>(pub Tensor<T>);

impl<T: Real> ProbMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Hard labels by per-pixel argmax (lowest class on ties).
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .0
            .argmax_axis(0)
            .expect("prob map has a class axis")
            .into_iter()
            .map(|c| c as u8)
            .collect();
        LabelMap {
            height: self.height(),
            width: self.width(),
            data: labels,
        }
    }

    /// Largest deviation of a per-pixel channel sum from 1.
    pub fn simplex_error(&self) -> f64 {
        let (c, hw) = (self.num_classes(), self.height() * self.width());
        let d = self.0.data();
        (0..hw)
            .map(|i| ((0..c).map(|k| d[k * hw + i].as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Checks one tensor per grid cell and returns them ordered by patch index.
fn ordered<'a, T: Real>(
    patch_probs: &'a [(usize, Tensor<T>)],
    grid: &PatchGrid,
) -> Result<(usize, Vec<&'a Tensor<T>>)> {
    let mut slots: Vec<Option<&Tensor<T>>> = vec![None; grid.len()];
    let mut classes = None;
    for (idx, t) in patch_probs {
        let slot = slots.get_mut(*idx).ok_or_else(|| {
            Error::Completeness(format!("patch index {idx} outside grid of {}", grid.len()))
        })?;
        if slot.is_some() {
            return Err(Error::Completeness(format!("patch {idx} given twice")));
        }
        let c = match *t.shape() {
            [c, h, w] if h == grid.patch && w == grid.patch => c,
            ref s => {
                return Err(Error::Dimension(format!(
                    "patch {idx} has shape {s:?}, expected [C,{p},{p}]",
                    p = grid.patch
                )))
            }
        };
        if *classes.get_or_insert(c) != c {
            return Err(Error::Dimension(format!("patch {idx} has {c} classes")));
        }
        *slot = Some(t);
    }
    let tensors = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Completeness(format!("missing patch {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((classes.unwrap_or(0), tensors))
}

/// Averages overlapping patch probabilities into a full-resolution map.
///
/// Contributions are summed in grid order regardless of input order.
pub fn merge_average<T: Real>(patch_probs: &[(usize, Tensor<T>)], grid: &PatchGrid) -> Result<ProbMap<T>> {
    let (c, tensors) = ordered(patch_probs, grid)?;
    let (h, w, p) = (grid.image_h, grid.image_w, grid.patch);
    let mut sum = vec![T::zero(); c * h * w];
    let mut count = vec![0u32; h * w];
    for (k, t) in tensors.iter().enumerate() {
        let (y0, x0) = grid.origin(k);
        let d = t.data();
        for ch in 0..c {
            for y in 0..p {
                let src = &d[(ch * p + y) * p..][..p];
                let dst = &mut sum[(ch * h + y0 + y) * w + x0..][..p];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
        for y in 0..p {
            count[(y0 + y) * w + x0..][..p].iter_mut().for_each(|n| *n += 1);
        }
    }
    for ch in 0..c {
        for (v, &n) in sum[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&count) {
            *v = *v / T::of_f64(n as f64);
        }
    }
    Ok(ProbMap(Tensor::new(&[c, h, w], sum)?))
}

/// For each coordinate along one axis, the index of the start whose patch
/// centre is nearest (lowest index on ties).
fn owners(starts: &[usize], patch: usize, dim: usize) -> Vec<usize> {
    (0..dim)
        .map(|y| {
            // Compare doubled distances to stay in integers: pixel centre 2y+1, patch centre 2s+patch.
            let dist = |s: usize| (2 * y + 1).abs_diff(2 * s + patch);
            let mut best = 0;
            for (i, &s) in starts.iter().enumerate().skip(1) {
                if dist(s) < dist(starts[best]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Stitches patches without blending: every pixel comes from the patch whose
/// centre is nearest.
pub fn montage<T: Real>(patch_probs: &[(usize, Tensor<T>)], grid: &PatchGrid) -> Result<ProbMap<T>> {
    let (c, tensors) = ordered(patch_probs, grid)?;
    let (h, w, p) = (grid.image_h, grid.image_w, grid.patch);
    let oy = owners(&grid.starts_y, p, h);
    let ox = owners(&grid.starts_x, p, w);
    let cols = grid.starts_x.len();
    let mut out = vec![T::zero(); c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (oy[y], ox[x]);
            let t = tensors[ry * cols + rx].data();
            let (ly, lx) = (y - grid.starts_y[ry], x - grid.starts_x[rx]);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = t[(ch * p + ly) * p + lx];
            }
        }
    }
    Ok(ProbMap(Tensor::new(&[c, h, w], out)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Smallest number of starts with spacing ≤ stride covering `dim`, by search.
    fn brute_force_count(dim: usize, patch: usize, stride: usize) -> usize {
        (1..=dim)
            .find(|&n| (n - 1) * stride + patch >= dim)
            .unwrap()
    }

    #[test]
    fn full_scale_grid() {
        let g = plan_grid(2448, 2448, 508, 120).unwrap();
        assert_eq!(g.starts_y, vec![0, 388, 776, 1164, 1552, 1940]);
        assert_eq!(g.starts_x, g.starts_y);
        assert_eq!(g.len(), 36);
        assert_eq!(brute_force_count(2448, 508, 388), 6);
    }

    #[test]
    fn small_grids() {
        let g = plan_grid(64, 64, 64, 0).unwrap();
        assert_eq!((g.starts_y.clone(), g.starts_x.clone()), (vec![0], vec![0]));
        let g = plan_grid(100, 100, 64, 16).unwrap();
        assert_eq!(g.starts_y, vec![0, 36]);
        assert_eq!(brute_force_count(100, 64, 48), 2);
        assert!(matches!(plan_grid(50, 100, 64, 16), Err(Error::Geometry(_))));
        assert!(plan_grid(100, 100, 64, 64).is_err());
    }

    #[test]
    fn context_window_examples() {
        let g = plan_grid(256, 256, 64, 32).unwrap();
        let idx = g.starts_y.iter().position(|&s| s == 96).unwrap() * g.starts_x.len()
            + g.starts_x.iter().position(|&s| s == 96).unwrap();
        let win = context_window(&g, idx, ContextScale::Factor(2.0)).unwrap();
        assert_eq!((win.y0, win.x0, win.h, win.w), (64, 64, 128, 128));
        let corner = context_window(&g, 0, ContextScale::Factor(2.0)).unwrap();
        assert_eq!((corner.y0, corner.x0, corner.h, corner.w), (0, 0, 128, 128));
        let glob = context_window(&g, 3, ContextScale::Global).unwrap();
        assert_eq!((glob.y0, glob.x0, glob.h, glob.w), (0, 0, 256, 256));
        let local = context_window(&g, 5, ContextScale::local()).unwrap();
        assert_eq!((local.y0, local.x0), g.origin(5));
        let err = context_window(&g, 0, ContextScale::Factor(5.0)).unwrap_err();
        assert!(err.to_string().contains("global"), "{err}");
    }

    #[test]
    fn extract_context_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raster = Tensor::<f64>::new(&[2, 8, 8], (0..128).map(|_| rng.random()).collect()).unwrap();
        let win = ContextWindow { y0: 2, x0: 4, h: 4, w: 4, scale: ContextScale::local() };
        let crop = extract_context(&raster, &win, 4).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(crop.data()[(c * 4 + y) * 4 + x], raster.data()[(c * 8 + y + 2) * 8 + x + 4]);
                }
            }
        }
        let flat = Tensor::<f32>::full(&[3, 16, 16], 0.25);
        let win = ContextWindow { y0: 1, x0: 3, h: 12, w: 12, scale: ContextScale::Factor(2.0) };
        assert!(extract_context(&flat, &win, 5).unwrap().data().iter().all(|&v| v == 0.25));
        let bad = ContextWindow { y0: 10, x0: 0, h: 8, w: 8, scale: ContextScale::local() };
        assert!(matches!(extract_context(&flat, &bad, 4), Err(Error::Geometry(_))));
    }

    #[test]
    fn extract_context_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raster = Tensor::<f64>::new(&[1, 12, 12], (0..144).map(|_| rng.random()).collect()).unwrap();
        let win = ContextWindow { y0: 3, x0: 1, h: 8, w: 8, scale: ContextScale::Factor(2.0) };
        let got = extract_context(&raster, &win, 4).unwrap();
        // Downscaling 8 → 4 samples source coordinate 2d + 0.5: the mean of a 2×2 block.
        for oy in 0..4 {
            for ox in 0..4 {
                let px = |y: usize, x: usize| raster.data()[(3 + y) * 12 + 1 + x];
                let e = 0.25
                    * (px(2 * oy, 2 * ox)
                        + px(2 * oy, 2 * ox + 1)
                        + px(2 * oy + 1, 2 * ox)
                        + px(2 * oy + 1, 2 * ox + 1));
                assert!((got.data()[oy * 4 + ox] - e).abs() < 1e-6);
            }
        }
    }

    fn random_labels(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
    }

    fn one_hot_patches(labels: &LabelMap, grid: &PatchGrid, c: usize) -> Vec<(usize, Tensor<f64>)> {
        (0..grid.len())
            .map(|k| {
                let (y, x) = grid.origin(k);
                (k, labels.crop(y, x, grid.patch, grid.patch).one_hot(c))
            })
            .collect()
    }

    #[test]
    fn average_of_two_overlapping_patches() {
        let g = plan_grid(4, 6, 4, 2).unwrap();
        assert_eq!(g.len(), 2);
        let mk = |p: f64| {
            let mut d = vec![p; 16];
            d.extend(vec![1.0 - p; 16]);
            Tensor::new(&[2, 4, 4], d).unwrap()
        };
        let m = merge_average(&[(0, mk(0.2)), (1, mk(0.6))], &g).unwrap();
        assert!((m.0.data()[2] - 0.4).abs() < 1e-12);
        assert!((m.0.data()[0] - 0.2).abs() < 1e-12);
        assert!((m.0.data()[5] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn merge_requires_every_patch() {
        let g = plan_grid(8, 8, 4, 0).unwrap();
        let t = Tensor::<f32>::full(&[2, 4, 4], 0.5);
        let partial: Vec<_> = (0..3).map(|k| (k, t.clone())).collect();
        assert!(matches!(merge_average(&partial, &g), Err(Error::Completeness(_))));
        assert!(matches!(montage(&partial, &g), Err(Error::Completeness(_))));
        let dup = vec![(0, t.clone()), (0, t.clone()), (1, t.clone()), (2, t)];
        assert!(merge_average(&dup, &g).is_err());
    }

    #[test]
    fn montage_splits_overlap_at_midpoint() {
        // Patches at x = 0 and x = 4, width 8: the overlap is columns 4..8.
        let g = plan_grid(8, 12, 8, 4).unwrap();
        assert_eq!(g.starts_x, vec![0, 4]);
        let left = Tensor::<f64>::full(&[1, 8, 8], 1.0);
        let right = Tensor::<f64>::full(&[1, 8, 8], 2.0);
        let m = montage(&[(0, left), (1, right)], &g).unwrap();
        let row: Vec<f64> = m.0.data()[..12].to_vec();
        assert_eq!(row, vec![1., 1., 1., 1., 1., 1., 2., 2., 2., 2., 2., 2.]);
    }

    #[test]
    fn montage_equals_average_without_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = plan_grid(12, 8, 4, 0).unwrap();
        let patches: Vec<_> = (0..g.len())
            .map(|k| (k, Tensor::<f64>::new(&[2, 4, 4], (0..32).map(|_| rng.random()).collect()).unwrap()))
            .collect();
        assert_eq!(montage(&patches, &g).unwrap(), merge_average(&patches, &g).unwrap());
    }

    /// Per-pixel accumulation straight from the patch list.
    fn average_oracle(patches: &[(usize, Tensor<f64>)], g: &PatchGrid, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * g.image_h * g.image_w];
        for ch in 0..c {
            for y in 0..g.image_h {
                for x in 0..g.image_w {
                    let (mut s, mut n) = (0.0, 0);
                    for (k, t) in patches {
                        let (py, px) = g.origin(*k);
                        if (py..py + g.patch).contains(&y) && (px..px + g.patch).contains(&x) {
                            s += t.data()[(ch * g.patch + y - py) * g.patch + x - px];
                            n += 1;
                        }
                    }
                    out[(ch * g.image_h + y) * g.image_w + x] = s / n as f64;
                }
            }
        }
        out
    }

    #[test]
    fn average_matches_accumulator_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = plan_grid(23, 17, 8, 3).unwrap();
        let patches: Vec<_> = (0..g.len())
            .map(|k| (k, Tensor::<f64>::new(&[3, 8, 8], (0..192).map(|_| rng.random()).collect()).unwrap()))
            .collect();
        let got = merge_average(&patches, &g).unwrap();
        let expect = average_oracle(&patches, &g, 3);
        for (a, b) in got.0.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn grid_invariants(h in 1usize..300, w in 1usize..300, p in 1usize..120, o in 0usize..119) {
            prop_assume!(p <= h.min(w) && o < p);
            let g = plan_grid(h, w, p, o).unwrap();
            for (starts, dim) in [(&g.starts_y, h), (&g.starts_x, w)] {
                prop_assert_eq!(starts[0], 0);
                prop_assert_eq!(*starts.last().unwrap() + p, dim);
                for pair in starts.windows(2) {
                    prop_assert!(pair[1] > pair[0] && pair[1] - pair[0] <= p - o);
                }
                prop_assert_eq!(starts.len(), brute_force_count(dim, p, p - o));
            }
        }

        #[test]
        fn context_contains_patch(
            h in 16usize..200, w in 16usize..200, p in 4usize..64, o in 0usize..4,
            lambda in 1.0f64..4.0, pick in any::<usize>(),
        ) {
            prop_assume!(p <= h.min(w) && o < p);
            let g = plan_grid(h, w, p, o).unwrap();
            let k = pick % g.len();
            let (py, px) = g.origin(k);
            match context_window(&g, k, ContextScale::Factor(lambda)) {
                Ok(win) => {
                    prop_assert!(win.y0 + win.h <= h && win.x0 + win.w <= w);
                    prop_assert!(win.contains(py, px, p, p));
                }
                Err(e) => prop_assert!(
                    matches!(e, Error::Geometry(_)) && (lambda * p as f64).round() as usize > h.min(w)
                ),
            }
        }

        #[test]
        fn merges_preserve_one_hot_labels(
            h in 8usize..40, w in 8usize..40, p in 4usize..9, o in 0usize..4, seed in any::<u64>(),
        ) {
            prop_assume!(o < p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(h, w, 4, &mut rng);
            let g = plan_grid(h, w, p, o).unwrap();
            let patches = one_hot_patches(&labels, &g, 4);
            let avg = merge_average(&patches, &g).unwrap();
            prop_assert_eq!(avg.argmax(), labels.clone());
            prop_assert!(avg.simplex_error() <= 1e-5);
            prop_assert_eq!(montage(&patches, &g).unwrap().argmax(), labels);
        }
    }
}
