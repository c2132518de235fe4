//! Crop, flip and rotation recipes.
//!
//! An augmentation is planned per source as a list of [`AugmentOp`]s, then
//! applied. Planning only needs the source extents, so recipe sizes can be
//! counted without materializing the crops.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Every grid position at the given stride, plus the last aligned one.
    Grid { stride: usize },
    /// Uniformly random positions per source.
    Random { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub crop: usize,
    pub mode: CropMode,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub vflip: bool,
    /// Adds the 90°, 180° and 270° rotations of every crop.
    #[serde(default)]
    pub rotations: bool,
}

impl AugmentSpec {
    /// 256-pixel crops at half-crop stride, horizontal flips, rotations.
    pub fn bsds() -> Self {
        Self {
            crop: 256,
            mode: CropMode::Grid { stride: 128 },
            hflip: true,
            vflip: false,
            rotations: true,
        }
    }

    /// 20 random 384-pixel crops per source, rotations.
    pub fn biped() -> Self {
        Self {
            crop: 384,
            mode: CropMode::Random { count: 20 },
            hflip: false,
            vflip: false,
            rotations: true,
        }
    }

    fn orientations(&self) -> Vec<(bool, bool, u8)> {
        let mut out = Vec::new();
        for h in [false, true].into_iter().filter(|&h| !h || self.hflip) {
            for v in [false, true].into_iter().filter(|&v| !v || self.vflip) {
                let turns = if self.rotations { 0..4 } else { 0..1 };
                out.extend(turns.map(|r| (h, v, r)));
            }
        }
        out
    }
}

/// One output sample: crop at `(top, left)` of side `size`, optional flips,
/// then `quarter_turns` clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentOp {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

fn grid(n: usize, crop: usize, stride: usize) -> Vec<usize> {
    let last = n - crop;
    let mut out: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Operations for one `h × w` source.
pub fn augment_plan<R: Rng + ?Sized>(h: usize, w: usize, spec: &AugmentSpec, rng: &mut R) -> Result<Vec<AugmentOp>> {
    if spec.crop == 0 || spec.crop > h || spec.crop > w {
        return Err(Error::Geometry(format!(
            "crop {} does not fit a {h}x{w} source",
            spec.crop
        )));
    }
    let positions: Vec<(usize, usize)> = match spec.mode {
        CropMode::Grid { stride } => {
            let rows = grid(h, spec.crop, stride);
            let cols = grid(w, spec.crop, stride);
            rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
        }
        CropMode::Random { count } => (0..count)
            .map(|_| (rng.gen_range(0..=h - spec.crop), rng.gen_range(0..=w - spec.crop)))
            .collect(),
    };
    let orient = spec.orientations();
    Ok(positions
        .into_iter()
        .flat_map(|(top, left)| {
            orient.iter().map(move |&(hflip, vflip, quarter_turns)| AugmentOp {
                top,
                left,
                size: spec.crop,
                hflip,
                vflip,
                quarter_turns,
            })
        })
        .collect())
}

/// Source pixel read by output pixel `(y, x)` of a `size`-square op.
fn source_of(op: &AugmentOp, mut y: usize, mut x: usize) -> (usize, usize) {
    let n = op.size;
    // Undo the clockwise rotations: one clockwise turn maps (r, c) to (c, n-1-r).
    for _ in 0..op.quarter_turns {
        (y, x) = (n - 1 - x, y);
    }
    if op.vflip {
        y = n - 1 - y;
    }
    if op.hflip {
        x = n - 1 - x;
    }
    (op.top + y, op.left + x)
}

fn transform(t: &Tensor, op: &AugmentOp) -> Tensor {
    let (_, w, c) = t.hwc().expect("sample map");
    let n = op.size;
    let mut out = Vec::with_capacity(n * n * c);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = source_of(op, y, x);
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&t.data()[base..base + c]);
        }
    }
    Tensor::new(&[n, n, c], out).expect("square crop")
}

/// Applies `op` identically to image and label.
pub fn apply_op(s: &Sample, op: &AugmentOp, index: usize) -> Sample {
    Sample {
        id: format!("{}_{index:04}", s.id),
        image: transform(&s.image, op),
        label: transform(&s.label, op),
    }
}

/// Number of samples a recipe yields for sources of the given extents.
pub fn plan_count(extents: &[(usize, usize)], spec: &AugmentSpec, seed: u64) -> Result<usize> {
    extents
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| {
            let mut r = rng::substream(seed, rng::AUGMENT, i as u64);
            augment_plan(h, w, spec, &mut r).map(|p| p.len())
        })
        .sum()
}

/// Expands every source by the recipe; source `i` draws from its own stream.
pub fn augment(samples: &[Sample], spec: &AugmentSpec, seed: u64) -> Result<Vec<Sample>> {
    let per_source: Vec<Result<Vec<Sample>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::substream(seed, rng::AUGMENT, i as u64);
            let plan = augment_plan(s.height(), s.width(), spec, &mut r)?;
            Ok(plan.iter().enumerate().map(|(k, op)| apply_op(s, op, k)).collect())
        })
        .collect();
    let mut out = Vec::new();
    for v in per_source {
        out.extend(v?);
    }
    Ok(out)
}
