//! Procedural shapes with per-pixel ground truth. Each image has a class
//! label (the shape covering the most pixels) that only probes may read.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar];

    /// Whether pixel center `(y, x)` lies inside a shape of half-extent `r`
    /// centered at `(cy, cx)`. Bars are horizontal when `horizontal`.
    fn contains(self, y: f64, x: f64, cy: f64, cx: f64, r: f64, horizontal: bool) -> bool {
        let (dy, dx) = (y - cy, x - cx);
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex up at dy = -r, base at dy = +r spanning dx in [-r, r].
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Bar => {
                let thin = (r / 3.0).max(1.0);
                let (along, across) = if horizontal { (dx, dy) } else { (dy, dx) };
                along.abs() <= r && across.abs() <= thin
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticShapesSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Classes in use; label `c` means `classes[c]`.
    pub classes: Vec<ShapeKind>,
    pub shapes_per_image: usize,
    /// Half-extent range in pixels, inclusive.
    pub radius: (usize, usize),
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticShapesSpec {
    /// Three classes at 32×32, one channel, seed 0.
    pub fn benchmark() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            classes: alloc::vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle],
            shapes_per_image: 1,
            radius: (5, 10),
            foreground: (0.5, 1.0),
            background: (0.0, 0.3),
            noise_sigma: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.classes.len() < 2 {
            return bad("need at least two classes");
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return bad("duplicate class");
        }
        if self.channels == 0 || self.shapes_per_image == 0 {
            return bad("channels and shapes_per_image must be positive");
        }
        let (lo, hi) = self.radius;
        if lo == 0 || lo > hi {
            return bad("radius range invalid");
        }
        if 2 * hi + 1 > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "synthetic spec: radius {hi} does not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        for (name, (a, b)) in [("foreground", self.foreground), ("background", self.background)] {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return bad(&format!("{name} range invalid"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    /// `[C×H×W]` each, values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Row-major `H×W`; 0 is background, `c + 1` is class `c`. Later shapes
    /// paint over earlier ones.
    pub masks: Vec<Vec<u8>>,
    pub num_classes: usize,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws one image with a single shape of `kind` and half-extent `r`
/// centered at integer pixel `(cy, cx)`, painted on a constant background.
pub fn render_shape(
    height: usize,
    width: usize,
    kind: ShapeKind,
    (cy, cx): (usize, usize),
    r: usize,
    horizontal: bool,
) -> Vec<bool> {
    let mut out = alloc::vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kind.contains(y as f64, x as f64, cy as f64, cx as f64, r as f64, horizontal);
        }
    }
    out
}

/// `count` images; deterministic in `spec.seed`. Labels are drawn uniformly
/// for the first shape; extra shapes are smaller distractors of any class.
pub fn generate_synthetic(spec: &SyntheticShapesSpec, count: usize) -> Result<SyntheticSet> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut set = SyntheticSet {
        images: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        masks: Vec::with_capacity(count),
        num_classes: spec.classes.len(),
    };
    for _ in 0..count {
        let bg: Vec<f64> = (0..c).map(|_| uniform(&mut rng, spec.background)).collect();
        let mut pixels: Vec<f64> = (0..c).flat_map(|ch| core::iter::repeat_n(bg[ch], h * w)).collect();
        let mut mask = alloc::vec![0u8; h * w];
        for s in 0..spec.shapes_per_image {
            let class = rng.random_range(0..spec.classes.len());
            let (lo, hi) = spec.radius;
            let r = if s == 0 {
                rng.random_range(lo..=hi)
            } else {
                rng.random_range(1..=lo)
            };
            let cy = rng.random_range(r..h - r);
            let cx = rng.random_range(r..w - r);
            let horizontal = rng.random_bool(0.5);
            let fg: Vec<f64> = (0..c).map(|_| uniform(&mut rng, spec.foreground)).collect();
            let cover = render_shape(h, w, spec.classes[class], (cy, cx), r, horizontal);
            for (i, _) in cover.iter().enumerate().filter(|(_, in_shape)| **in_shape) {
                mask[i] = class as u8 + 1;
                for ch in 0..c {
                    pixels[ch * h * w + i] = fg[ch];
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            pixels.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
        }
        // Stored at f32 precision so corpus files round-trip exactly.
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0) as f32 as f64);

        let mut area = alloc::vec![0usize; spec.classes.len()];
        mask.iter().filter(|&&m| m > 0).for_each(|&m| area[m as usize - 1] += 1);
        // Ties go to the smaller class id.
        let label = (0..area.len()).fold(0, |best, k| if area[k] > area[best] { k } else { best });

        set.images.push(Tensor::new(alloc::vec![c, h, w], pixels)?);
        set.labels.push(label);
        set.masks.push(mask);
    }
    Ok(set)
}
