//! Context-dependent synthetic rasters.
//!
//! Two background terrains cover each image in large smooth blobs. They look
//! identical up close; the only thing telling them apart is a sparse lattice
//! of coloured markers (red on terrain 0, blue on terrain 1) spaced wider
//! than a patch. Small shapes — rectangles and thin strips — take a class
//! that depends on their type *and* the terrain under them, so a patch alone
//! often cannot name either the background or the shapes; a 2× context
//! almost always contains a marker. A thin dark seam marks terrain borders,
//! which tells where the terrain changes but not which side is which.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::RgbImage;
use crate::tiling::LabelMap;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Side of the square images.
    pub size: usize,
    pub num_images: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Marker spacing in pixels; terrain blobs are twice as large.
    pub cue_scale: usize,
    /// Patch size the data is meant for (scales shapes and markers).
    pub patch: usize,
    /// Per-channel uniform pixel noise amplitude.
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 256,
            num_images: 4,
            num_classes: 5,
            seed: 0,
            cue_scale: 96,
            patch: 64,
            noise: 12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.num_classes < 3 || self.num_classes > 255 {
            return bad(format!("num_classes {} must be in 3..=255", self.num_classes));
        }
        if self.num_images == 0 {
            return bad("num_images must be positive".into());
        }
        if self.patch < 8 || self.size < self.patch {
            return bad(format!("patch {} must be >= 8 and fit the {} image", self.patch, self.size));
        }
        if self.cue_scale <= self.patch {
            return bad(format!("cue_scale {} must exceed the patch size {}", self.cue_scale, self.patch));
        }
        Ok(())
    }

    pub fn marker_size(&self) -> usize {
        (self.patch / 4).max(4)
    }
}

/// An image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Strip,
}

pub const SHAPE_KINDS: [ShapeKind; 2] = [ShapeKind::Rect, ShapeKind::Strip];

/// The generator's shape table: class of a `kind` shape lying on `terrain`.
pub fn shape_class(kind: ShapeKind, terrain: u8, num_classes: usize) -> u8 {
    let combo = kind as usize * 2 + terrain as usize;
    (2 + combo % (num_classes - 2)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marker {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub terrain: u8,
}

/// Geometry of one image before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Terrain id (0 or 1) per pixel.
    pub terrain: Vec<u8>,
    pub shapes: Vec<Shape>,
    pub markers: Vec<Marker>,
}

const BACKGROUND: [u8; 3] = [112, 124, 96];
const SHAPE: [u8; 3] = [212, 206, 188];
const SEAM: [u8; 3] = [64, 72, 52];
const MARKERS: [[u8; 3]; 2] = [[200, 48, 40], [40, 64, 200]];

/// Rasterises `scene`. Colours depend only on what is drawn (background,
/// shape, marker) and the noise stream only on `noise_seed`, never on class.
pub fn render(scene: &Scene, num_classes: usize, noise_seed: u64, noise: u8) -> (RgbImage, LabelMap) {
    let (h, w) = (scene.height, scene.width);
    let mut colour = vec![BACKGROUND; h * w];
    let mut labels = scene.terrain.clone();
    // A dark seam where the terrain changes shows *where* the border runs,
    // never which side is which.
    let t = &scene.terrain;
    for y in 0..h {
        for x in 0..w {
            let v = t[y * w + x];
            let differs = (y + 1 < h && t[(y + 1) * w + x] != v)
                || (x + 1 < w && t[y * w + x + 1] != v)
                || (y > 0 && t[(y - 1) * w + x] != v)
                || (x > 0 && t[y * w + x - 1] != v);
            if differs {
                colour[y * w + x] = SEAM;
            }
        }
    }
    for s in &scene.shapes {
        let (cy, cx) = ((s.y + s.h / 2).min(h - 1), (s.x + s.w / 2).min(w - 1));
        let class = shape_class(s.kind, scene.terrain[cy * w + cx], num_classes);
        for y in s.y..(s.y + s.h).min(h) {
            for x in s.x..(s.x + s.w).min(w) {
                colour[y * w + x] = SHAPE;
                labels[y * w + x] = class;
            }
        }
    }
    for m in &scene.markers {
        for y in m.y..(m.y + m.size).min(h) {
            for x in m.x..(m.x + m.size).min(w) {
                colour[y * w + x] = MARKERS[m.terrain as usize];
                labels[y * w + x] = scene.terrain[y * w + x];
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let n = noise as i16;
    let mut data = Vec::with_capacity(h * w * 3);
    for c in &colour {
        for &v in c {
            let d: i16 = rng.random_range(-n..=n);
            data.push((v as i16 + d).clamp(0, 255) as u8);
        }
    }
    (
        RgbImage::new(h, w, data).expect("sized"),
        LabelMap::new(h, w, labels).expect("sized"),
    )
}

/// Smooth random field on a lattice of spacing `cell`, thresholded at its
/// median so both terrains always cover half the image.
fn terrain_field(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        let (gy, ty) = (y / cell, smooth((y % cell) as f64 / cell as f64));
        for x in 0..size {
            let (gx, tx) = (x / cell, smooth((x % cell) as f64 / cell as f64));
            let at = |i: usize, j: usize| lattice[i * n + j];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            field.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    field.iter().map(|&v| u8::from(v >= median)).collect()
}

/// Axis-aligned boxes `(y, x, h, w)` closer than `gap` pixels.
fn near(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), gap: usize) -> bool {
    a.0 < b.0 + b.2 + gap && b.0 < a.0 + a.2 + gap && a.1 < b.1 + b.3 + gap && b.1 < a.1 + a.3 + gap
}

fn random_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let size = cfg.size;
    let terrain = terrain_field(size, 2 * cfg.cue_scale, rng);
    let (s, m) = (cfg.cue_scale, cfg.marker_size());
    let jitter = (s / 8) as i64;
    let mut markers = Vec::new();
    for gy in 0..size.div_ceil(s) {
        for gx in 0..size.div_ceil(s) {
            let dy = rng.random_range(-jitter..=jitter);
            let dx = rng.random_range(-jitter..=jitter);
            let place = |g: usize, d: i64| {
                ((g * s + s / 2) as i64 + d - (m / 2) as i64).clamp(0, (size - m) as i64) as usize
            };
            let (y, x) = (place(gy, dy), place(gx, dx));
            let t = terrain[y * size + x];
            let uniform = (y..y + m).all(|yy| (x..x + m).all(|xx| terrain[yy * size + xx] == t));
            if uniform {
                markers.push(Marker { y, x, size: m, terrain: t });
            }
        }
    }
    // Shapes never touch each other or a marker: a merged blob of one colour
    // would have no recoverable per-pixel class.
    let p = cfg.patch;
    let gap = (p / 16).max(2);
    let target = size * size / 2048;
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..target * 8 {
        if shapes.len() == target {
            break;
        }
        let kind = SHAPE_KINDS[rng.random_range(0..2)];
        let (h, w) = match kind {
            ShapeKind::Rect => (rng.random_range(p / 4..=p / 3), rng.random_range(p / 4..=p / 3)),
            ShapeKind::Strip => {
                let long = rng.random_range(p / 3..=2 * p / 3);
                let thin = rng.random_range((p / 16).max(2)..=(p / 10).max(2));
                if rng.random::<bool>() {
                    (thin, long)
                } else {
                    (long, thin)
                }
            }
        };
        let bbox = (rng.random_range(0..=size - h), rng.random_range(0..=size - w), h, w);
        let clear = shapes.iter().all(|o| !near(bbox, (o.y, o.x, o.h, o.w), gap))
            && markers.iter().all(|mk| !near(bbox, (mk.y, mk.x, mk.size, mk.size), gap));
        if clear {
            shapes.push(Shape { kind, y: bbox.0, x: bbox.1, h, w });
        }
    }
    Scene {
        height: size,
        width: size,
        terrain,
        shapes,
        markers,
    }
}

/// Image `index` of the dataset; images are independent given `seed ^ index`.
pub fn synth_image(cfg: &SynthConfig, index: usize) -> Result<LabeledImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let scene = random_scene(cfg, &mut rng);
    let (image, labels) = render(&scene, cfg.num_classes, rng.random(), cfg.noise);
    Ok(LabeledImage { image, labels })
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    (0..cfg.num_images).map(|i| synth_image(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig { num_images: 2, ..SynthConfig::default() };
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_dataset(&cfg).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn every_class_appears() {
        let cfg = SynthConfig::default();
        let mut hist = [0usize; 256];
        for img in synth_dataset(&cfg).unwrap() {
            img.labels.data.iter().for_each(|&l| hist[l as usize] += 1);
        }
        assert!(hist[..5].iter().all(|&n| n > 0), "{:?}", &hist[..5]);
        assert_eq!(hist[5..].iter().sum::<usize>(), 0);
    }

    #[test]
    fn both_terrains_have_markers() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&cfg, &mut rng);
        for t in 0..2 {
            assert!(scene.markers.iter().any(|m| m.terrain == t));
            assert!(scene.terrain.iter().filter(|&&v| v == t).count() >= cfg.size * cfg.size / 2 - 1);
        }
    }

    #[test]
    fn shape_table_is_terrain_dependent() {
        for nc in [4, 5, 6] {
            for kind in SHAPE_KINDS {
                assert_ne!(shape_class(kind, 0, nc), shape_class(kind, 1, nc), "{kind:?} nc={nc}");
            }
        }
    }

    /// Without a marker in view, the same shape on the two terrains renders to
    /// identical pixels while its label differs.
    #[test]
    fn crops_without_markers_do_not_reveal_the_class() {
        let (size, nc) = (64, 5);
        for kind in SHAPE_KINDS {
            let shape = Shape { kind, y: 20, x: 24, h: 6, w: 18 };
            let scene = |t: u8| Scene {
                height: size,
                width: size,
                terrain: vec![t; size * size],
                shapes: vec![shape],
                markers: vec![],
            };
            let (img_a, lab_a) = render(&scene(0), nc, 99, 12);
            let (img_b, lab_b) = render(&scene(1), nc, 99, 12);
            assert_eq!(img_a, img_b);
            assert_ne!(lab_a.get(22, 30), lab_b.get(22, 30));
            assert_eq!(lab_a.get(22, 30), shape_class(kind, 0, nc));
        }
    }

    #[test]
    fn invalid_configs_are_argument_errors() {
        for cfg in [
            SynthConfig { cue_scale: 64, ..SynthConfig::default() },
            SynthConfig { num_images: 0, ..SynthConfig::default() },
            SynthConfig { num_classes: 2, ..SynthConfig::default() },
            SynthConfig { size: 32, ..SynthConfig::default() },
        ] {
            assert!(matches!(synth_dataset(&cfg), Err(Error::Argument(_))), "{cfg:?}");
        }
    }
}
