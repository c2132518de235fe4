//! Synthetic edge images: filled ellipses and convex polygons on a
//! background, brighter with every region painted later.
//!
//! The label marks pixel `p` as an edge iff a 4-neighbour `q` has a lower
//! region id, which places every boundary one pixel wide on the brighter
//! side of the interface.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Sample;
use crate::rng;
use crate::tensor::Tensor;

const MAX_EDGE_FRACTION: f64 = 0.1;
const NOISE: f64 = 0.02;

/// A sample together with the region id of every pixel (0 = background).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub segmentation: Vec<u8>,
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    fn random(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let rmax = h.min(w) as f64 / 5.0;
        let rmin = (rmax / 2.0).max(2.0).min(rmax);
        let cy = rng.gen_range(rmin..=h as f64 - rmin);
        let cx = rng.gen_range(rmin..=w as f64 - rmin);
        if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.gen_range(rmin..=rmax),
                rx: rng.gen_range(rmin..=rmax),
                angle: rng.gen_range(0.0..TAU),
            }
        } else {
            let n = rng.gen_range(3..=6);
            let r = rng.gen_range(rmin..=rmax);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..TAU)).collect();
            angles.sort_by(f64::total_cmp);
            Shape::Polygon {
                vertices: angles.iter().map(|a| (cy + r * a.sin(), cx + r * a.cos())).collect(),
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                // Vertices lie on a circle in angular order, so the polygon is
                // convex and every edge turns the same way.
                let n = vertices.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (ay, ax) = vertices[i];
                    let (by, bx) = vertices[(i + 1) % n];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
        }
    }
}

/// Edge label of a segmentation, as `0.0`/`1.0` per pixel.
pub fn boundary_label(seg: &[u8], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = seg[y * w + x];
            let lower = |yy: usize, xx: usize| seg[yy * w + xx] < p;
            let edge = (y > 0 && lower(y - 1, x))
                || (y + 1 < h && lower(y + 1, x))
                || (x > 0 && lower(y, x - 1))
                || (x + 1 < w && lower(y, x + 1));
            if edge {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

fn rasterize(shapes: &[Shape], h: usize, w: usize) -> Vec<u8> {
    let mut seg = vec![0u8; h * w];
    for (id, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if s.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    seg[y * w + x] = id as u8 + 1;
                }
            }
        }
    }
    seg
}

/// The `index`-th synthetic sample of `seed`; `h, w ≥ 16`.
pub fn synth_one(h: usize, w: usize, seed: u64, index: u64) -> SynthSample {
    assert!(h >= 16 && w >= 16, "synthetic images need at least 16x16 pixels");
    let mut r = rng::substream(seed, rng::SYNTH, index);
    let count = r.gen_range(2..=5);
    let mut shapes: Vec<Shape> = (0..count).map(|_| Shape::random(h, w, &mut r)).collect();
    let (seg, label) = loop {
        let seg = rasterize(&shapes, h, w);
        let label = boundary_label(&seg, h, w);
        let edges = label.iter().filter(|&&v| v > 0.0).count();
        if shapes.len() == 1 || (edges as f64) < MAX_EDGE_FRACTION * (h * w) as f64 {
            break (seg, label);
        }
        shapes.pop();
    };
    let regions = shapes.len();
    let levels: Vec<f64> = (0..=regions)
        .map(|j| 0.1 + 0.8 * j as f64 / regions as f64 + r.gen_range(-0.03..0.03))
        .collect();
    let mut image = Vec::with_capacity(h * w * 3);
    for &id in &seg {
        let v = (levels[id as usize] + r.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0);
        image.extend([v, v, v]);
    }
    let sample = Sample {
        id: format!("synth_{index:05}"),
        image: Tensor::new(&[h, w, 3], image).expect("image extents"),
        label: Tensor::new(&[h, w, 1], label).expect("label extents"),
    };
    SynthSample {
        sample,
        segmentation: seg,
    }
}

pub fn synth_with_segmentation(n: usize, h: usize, w: usize, seed: u64) -> Vec<SynthSample> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| synth_one(h, w, seed, i))
        .collect()
}

pub fn synth_generate(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    synth_with_segmentation(n, h, w, seed)
        .into_iter()
        .map(|s| s.sample)
        .collect()
}
