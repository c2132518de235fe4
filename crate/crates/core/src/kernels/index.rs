//! Index maps for data-movement ops.
//!
//! Each map lists, for every output element, the flat offset of the input
//! element it copies, or [`ZERO`] when the output element is a zero fill.
//! Maps compose, so pad→embed or unembed→crop run as a single gather.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ZERO: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub map: Vec<u32>,
}

impl IndexMap {
    /// `then` applied after `self`.
    pub fn then(&self, then: &IndexMap) -> Result<IndexMap> {
        if then.input_shape != self.output_shape {
            return Err(Error::shape(
                "index map composition",
                &self.output_shape,
                &then.input_shape,
            ));
        }
        let map = then
            .map
            .iter()
            .map(|&i| if i == ZERO { ZERO } else { self.map[i as usize] })
            .collect();
        Ok(IndexMap {
            input_shape: self.input_shape.clone(),
            output_shape: then.output_shape.clone(),
            map,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("gather", &self.input_shape, x.shape()));
        }
        let xd = x.data();
        let data = self
            .map
            .iter()
            .map(|&i| if i == ZERO { 0.0 } else { xd[i as usize] })
            .collect();
        Tensor::new(&self.output_shape, data)
    }

    /// Adjoint of [`apply`](Self::apply): scatter-adds into the input shape.
    pub fn scatter_add(&self, dy: &Tensor) -> Tensor {
        let mut dx = vec![0.0; self.input_shape.iter().product()];
        for (&i, &g) in self.map.iter().zip(dy.data()) {
            if i != ZERO {
                dx[i as usize] += g;
            }
        }
        Tensor::new(&self.input_shape, dx).expect("scatter shape")
    }
}

/// Mirror index without repeating the edge sample (`abcd` → `abcdcba…`),
/// folding as many times as needed.
pub fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn check_hwc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Geometry(format!("expected HxWxC, got {shape:?}"))),
    }
}

/// Reflect-pads the bottom and right edges up to `(ph, pw)`.
pub fn reflect_pad(shape: &[usize], ph: usize, pw: usize) -> Result<IndexMap> {
    let (h, w, c) = check_hwc(shape)?;
    if ph < h || pw < w {
        return Err(Error::Geometry(format!(
            "reflect pad target {ph}x{pw} smaller than {h}x{w}"
        )));
    }
    let mut map = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            let sx = reflect(x, w);
            let base = (sy * w + sx) * c;
            map.extend((0..c).map(|ch| (base + ch) as u32));
        }
    }
    Ok(IndexMap {
        input_shape: shape.to_vec(),
        output_shape: vec![ph, pw, c],
        map,
    })
}

/// Crops or zero-pads (bottom/right) to exactly `(th, tw)`.
pub fn fit(shape: &[usize], th: usize, tw: usize) -> Result<IndexMap> {
    let (h, w, c) = check_hwc(shape)?;
    let mut map = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        for x in 0..tw {
            if y < h && x < w {
                let base = (y * w + x) * c;
                map.extend((0..c).map(|ch| (base + ch) as u32));
            } else {
                map.extend(std::iter::repeat_n(ZERO, c));
            }
        }
    }
    Ok(IndexMap {
        input_shape: shape.to_vec(),
        output_shape: vec![th, tw, c],
        map,
    })
}

/// Nearest-neighbour resize: output pixel `(y, x)` reads input
/// `(⌊y·h/th⌋, ⌊x·w/tw⌋)`.
pub fn nearest(shape: &[usize], th: usize, tw: usize) -> Result<IndexMap> {
    let (h, w, c) = check_hwc(shape)?;
    if th == 0 || tw == 0 {
        return Err(Error::Geometry("resize to an empty map".into()));
    }
    let mut map = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        let sy = y * h / th;
        for x in 0..tw {
            let sx = x * w / tw;
            let base = (sy * w + sx) * c;
            map.extend((0..c).map(|ch| (base + ch) as u32));
        }
    }
    Ok(IndexMap {
        input_shape: shape.to_vec(),
        output_shape: vec![th, tw, c],
        map,
    })
}

/// Splits an `H×W×C` map into non-overlapping `wh×ww` tiles, row-major over
/// tiles: output shape `[num_tiles, wh, ww, C]`.
pub fn patch_embed(shape: &[usize], wh: usize, ww: usize) -> Result<IndexMap> {
    let (h, w, c) = check_hwc(shape)?;
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::Geometry(format!(
            "{h}x{w} map is not tiled by {wh}x{ww} windows"
        )));
    }
    let (nh, nw) = (h / wh, w / ww);
    let mut map = Vec::with_capacity(h * w * c);
    for ty in 0..nh {
        for tx in 0..nw {
            for a in 0..wh {
                for b in 0..ww {
                    let base = ((ty * wh + a) * w + tx * ww + b) * c;
                    map.extend((0..c).map(|ch| (base + ch) as u32));
                }
            }
        }
    }
    Ok(IndexMap {
        input_shape: shape.to_vec(),
        output_shape: vec![nh * nw, wh, ww, c],
        map,
    })
}

/// Reassembles `[nh·nw, wh, ww, C]` tiles onto an `(nh·wh) × (nw·ww)` grid.
pub fn patch_unembed(shape: &[usize], nh: usize, nw: usize) -> Result<IndexMap> {
    let (p, wh, ww, c) = match *shape {
        [p, a, b, c] => (p, a, b, c),
        _ => return Err(Error::Geometry(format!("expected tiles, got {shape:?}"))),
    };
    if p != nh * nw {
        return Err(Error::Geometry(format!(
            "{p} tiles cannot fill a {nh}x{nw} grid"
        )));
    }
    let (h, w) = (nh * wh, nw * ww);
    let mut map = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let (ty, a) = (y / wh, y % wh);
        for x in 0..w {
            let (tx, b) = (x / ww, x % ww);
            let base = (((ty * nw + tx) * wh + a) * ww + b) * c;
            map.extend((0..c).map(|ch| (base + ch) as u32));
        }
    }
    Ok(IndexMap {
        input_shape: shape.to_vec(),
        output_shape: vec![h, w, c],
        map,
    })
}
