//! Multi-block mask sampling: one large context block and `M` rectangular,
//! possibly overlapping target blocks per image.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::Rng;

/// Draws per sampling round before the target scale floor is relaxed, and
/// again after.
pub const RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MaskSamplerConfig {
    pub num_targets: usize,
    pub target_scale: (f64, f64),
    pub target_aspect: (f64, f64),
    pub context_scale: (f64, f64),
    pub context_aspect: (f64, f64),
}

impl Default for MaskSamplerConfig {
    fn default() -> Self {
        Self {
            num_targets: 4,
            target_scale: (0.15, 0.2),
            target_aspect: (0.75, 1.5),
            context_scale: (0.85, 1.0),
            context_aspect: (1.0, 1.0),
        }
    }
}

impl MaskSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ranged = |name: &str, (lo, hi): (f64, f64), cap: f64| {
            if !(lo > 0.0 && lo <= hi && hi <= cap) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) invalid")));
            }
            Ok(())
        };
        if self.num_targets == 0 {
            return Err(Error::Config("at least one target block is required".into()));
        }
        ranged("target_scale", self.target_scale, 1.0)?;
        ranged("context_scale", self.context_scale, 1.0)?;
        ranged("target_aspect", self.target_aspect, f64::INFINITY)?;
        ranged("context_aspect", self.context_aspect, f64::INFINITY)?;
        if self.target_scale.0 >= 1.0 {
            return Err(Error::Config("full-scale target blocks leave no context".into()));
        }
        Ok(())
    }
}

/// A rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn indices(&self, cols: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.top..self.top + self.height {
            for c in self.left..self.left + self.width {
                out.push(r * cols + c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted context patch indices, disjoint from every target block.
    pub context: Vec<usize>,
    /// Row-major patch indices of each target block.
    pub targets: Vec<Vec<usize>>,
    pub target_rects: Vec<Block>,
}

impl MaskPlan {
    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Sorted union of all target blocks.
    pub fn masked(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.targets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// `(height, width)` of a block for scale `s` and aspect `a` on an
/// `rows × cols` grid: `round(√(s·N·a)) × round(√(s·N/a))`, clamped.
pub fn block_extent(scale: f64, aspect: f64, rows: usize, cols: usize) -> (usize, usize) {
    let area = scale * (rows * cols) as f64;
    let h = libm::round(libm::sqrt(area * aspect)) as usize;
    let w = libm::round(libm::sqrt(area / aspect)) as usize;
    (h.clamp(1, rows), w.clamp(1, cols))
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_block(rng: &mut Rng, scale: (f64, f64), aspect: (f64, f64), rows: usize, cols: usize) -> Block {
    let s = uniform(rng, scale);
    let a = uniform(rng, aspect);
    let (height, width) = block_extent(s, a, rows, cols);
    let top = rng.random_range(0..=rows - height);
    let left = rng.random_range(0..=cols - width);
    Block {
        top,
        left,
        height,
        width,
    }
}

fn draw(rng: &mut Rng, cfg: &MaskSamplerConfig, target_scale: (f64, f64), rows: usize, cols: usize) -> Option<MaskPlan> {
    let target_rects: Vec<Block> = (0..cfg.num_targets)
        .map(|_| sample_block(rng, target_scale, cfg.target_aspect, rows, cols))
        .collect();
    let targets: Vec<Vec<usize>> = target_rects.iter().map(|b| b.indices(cols)).collect();
    let ctx = sample_block(rng, cfg.context_scale, cfg.context_aspect, rows, cols);
    let mut covered = alloc::vec![false; rows * cols];
    targets.iter().flatten().for_each(|&i| covered[i] = true);
    let mut context: Vec<usize> = ctx.indices(cols).into_iter().filter(|&i| !covered[i]).collect();
    context.sort_unstable();
    (!context.is_empty()).then_some(MaskPlan {
        context,
        targets,
        target_rects,
    })
}

/// Samples a context block and `M` target blocks. The whole plan is redrawn
/// when the targets swallow the context; after [`RETRIES`] failures the
/// target scale floor is halved for up to [`RETRIES`] more draws.
pub fn sample_mask_plan(rows: usize, cols: usize, cfg: &MaskSamplerConfig, rng: &mut Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::Config("empty patch grid".into()));
    }
    let relaxed = (cfg.target_scale.0 / 2.0, cfg.target_scale.1);
    for scale in [cfg.target_scale, relaxed] {
        for _ in 0..RETRIES {
            if let Some(plan) = draw(rng, cfg, scale, rows, cols) {
                return Ok(plan);
            }
        }
    }
    Err(Error::Config(format!(
        "no feasible mask plan on a {rows}x{cols} grid after {} draws",
        2 * RETRIES
    )))
}

/// Uniform random masking at `ratio` for the pixel-reconstruction baseline.
/// Returns sorted `(visible, masked)`; both are non-empty.
pub fn sample_random_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("cannot mask ratio {ratio} of {n} patches")));
    }
    let count = (libm::round(n as f64 * ratio) as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut masked = order[..count].to_vec();
    let mut visible = order[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok((visible, masked))
}
