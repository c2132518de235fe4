//! Direct 2-D convolution over `[H, W, C]` maps.
//!
//! Kernels use the `[C_out, C_in / groups, k_h, k_w]` layout for both the
//! regular and the transposed (fractionally strided) variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub transposed: bool,
}

impl ConvGeom {
    pub const fn same3x3() -> Self {
        Self {
            stride: 1,
            padding: 1,
            groups: 1,
            transposed: false,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
            transposed: false,
        }
    }

    pub const fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// 2× learnable upsampling (kernel 2, stride 2).
    pub const fn upsample2() -> Self {
        Self {
            stride: 2,
            padding: 0,
            groups: 1,
            transposed: true,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (s, p) = (self.stride, self.padding);
        if s == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let dim = |n: usize, k: usize| -> Result<usize> {
            if self.transposed {
                let full = s * (n - 1) + k;
                if full <= 2 * p {
                    return Err(Error::Geometry(format!(
                        "transposed conv output empty (n={n}, k={k}, s={s}, p={p})"
                    )));
                }
                Ok(full - 2 * p)
            } else {
                if n + 2 * p < k {
                    return Err(Error::Geometry(format!(
                        "kernel {k} larger than padded input {}",
                        n + 2 * p
                    )));
                }
                Ok((n + 2 * p - k) / s + 1)
            }
        };
        Ok((dim(h, kh)?, dim(w, kw)?))
    }
}

/// Validated shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn resolve(x: &[usize], weight: &[usize], geom: &ConvGeom) -> Result<Self> {
        let (h, w, cin) = match *x {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::Geometry(format!("conv input must be HxWxC, got {x:?}"))),
        };
        let (cout, cin_g, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::Geometry(format!(
                    "conv kernel must be rank 4, got {weight:?}"
                )))
            }
        };
        let g = geom.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::Geometry(format!(
                "channels {cin}->{cout} not divisible by groups {g}"
            )));
        }
        if cin / g != cin_g {
            return Err(Error::shape("conv2d", &[cout, cin / g, kh, kw], weight));
        }
        let (ho, wo) = geom.output_hw(h, w, kh, kw)?;
        Ok(Self {
            h,
            w,
            cin,
            ho,
            wo,
            cout,
            kh,
            kw,
            cin_g,
            cout_g: cout / g,
            groups: g,
        })
    }

    /// Multiply-accumulates under the dense counting convention.
    pub fn macs(&self, transposed: bool) -> u64 {
        let pixels = if transposed {
            self.h * self.w
        } else {
            self.ho * self.wo
        };
        (pixels * self.cout * self.cin_g * self.kh * self.kw) as u64
    }

    /// Calls `f(input_pixel, output_pixel, tap)` for every in-bounds pairing.
    fn for_each_tap(&self, geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (geom.stride as isize, geom.padding as isize);
        if geom.transposed {
            for iy in 0..self.h {
                for ix in 0..self.w {
                    for ky in 0..self.kh {
                        let oy = iy as isize * s + ky as isize - p;
                        if oy < 0 || oy >= self.ho as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ox = ix as isize * s + kx as isize - p;
                            if ox < 0 || ox >= self.wo as isize {
                                continue;
                            }
                            f(
                                iy * self.w + ix,
                                oy as usize * self.wo + ox as usize,
                                ky * self.kw + kx,
                            );
                        }
                    }
                }
            }
        } else {
            for oy in 0..self.ho {
                for ky in 0..self.kh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for ox in 0..self.wo {
                        for kx in 0..self.kw {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                iy as usize * self.w + ix as usize,
                                oy * self.wo + ox,
                                ky * self.kw + kx,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Reorders `[C_out, C_in/g, kh, kw]` into `[tap, C_out, C_in/g]`.
fn taps_major(weight: &[f64], s: &ConvShape) -> Vec<f64> {
    let taps = s.kh * s.kw;
    let mut out = vec![0.0; weight.len()];
    for oc in 0..s.cout {
        for ic in 0..s.cin_g {
            for t in 0..taps {
                out[(t * s.cout + oc) * s.cin_g + ic] = weight[(oc * s.cin_g + ic) * taps + t];
            }
        }
    }
    out
}

fn kernel_major(wr: &[f64], s: &ConvShape) -> Vec<f64> {
    let taps = s.kh * s.kw;
    let mut out = vec![0.0; wr.len()];
    for oc in 0..s.cout {
        for ic in 0..s.cin_g {
            for t in 0..taps {
                out[(oc * s.cin_g + ic) * taps + t] = wr[(t * s.cout + oc) * s.cin_g + ic];
            }
        }
    }
    out
}

pub(crate) fn forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeom,
) -> Result<(Tensor, ConvShape)> {
    let s = ConvShape::resolve(x.shape(), weight.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [s.cout] {
            return Err(Error::shape("conv2d bias", &[s.cout], b.shape()));
        }
    }
    let wr = taps_major(weight.data(), &s);
    let mut y = vec![0.0; s.ho * s.wo * s.cout];
    if let Some(b) = bias {
        for px in y.chunks_exact_mut(s.cout) {
            px.copy_from_slice(b.data());
        }
    }
    let xd = x.data();
    s.for_each_tap(geom, |xp, yp, t| {
        let xpix = &xd[xp * s.cin..(xp + 1) * s.cin];
        let ypix = &mut y[yp * s.cout..(yp + 1) * s.cout];
        let wt = &wr[t * s.cout * s.cin_g..(t + 1) * s.cout * s.cin_g];
        for g in 0..s.groups {
            let xg = &xpix[g * s.cin_g..(g + 1) * s.cin_g];
            for ocg in 0..s.cout_g {
                let oc = g * s.cout_g + ocg;
                let wrow = &wt[oc * s.cin_g..(oc + 1) * s.cin_g];
                ypix[oc] += wrow.iter().zip(xg).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    Ok((Tensor::new(&[s.ho, s.wo, s.cout], y)?, s))
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    geom: &ConvGeom,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let s = ConvShape::resolve(x.shape(), weight.shape(), geom).expect("validated in forward");
    let wr = taps_major(weight.data(), &s);
    let mut dwr = vec![0.0; wr.len()];
    let mut dx = if need_input {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let (xd, gd) = (x.data(), dy.data());
    s.for_each_tap(geom, |xp, yp, t| {
        let xpix = &xd[xp * s.cin..(xp + 1) * s.cin];
        let gpix = &gd[yp * s.cout..(yp + 1) * s.cout];
        let base = t * s.cout * s.cin_g;
        for g in 0..s.groups {
            let xg = &xpix[g * s.cin_g..(g + 1) * s.cin_g];
            for ocg in 0..s.cout_g {
                let oc = g * s.cout_g + ocg;
                let go = gpix[oc];
                if go == 0.0 {
                    continue;
                }
                let off = base + oc * s.cin_g;
                for (dw, &xv) in dwr[off..off + s.cin_g].iter_mut().zip(xg) {
                    *dw += go * xv;
                }
                if need_input {
                    let dxg = &mut dx[xp * s.cin + g * s.cin_g..xp * s.cin + (g + 1) * s.cin_g];
                    for (d, &wv) in dxg.iter_mut().zip(&wr[off..off + s.cin_g]) {
                        *d += go * wv;
                    }
                }
            }
        }
    });
    let mut db = vec![0.0; s.cout];
    for px in gd.chunks_exact(s.cout) {
        for (b, g) in db.iter_mut().zip(px) {
            *b += g;
        }
    }
    let dx = need_input.then(|| Tensor::new(x.shape(), dx).expect("dx shape"));
    let dw = Tensor::new(weight.shape(), kernel_major(&dwr, &s)).expect("dw shape");
    (dx, dw, Tensor::new(&[s.cout], db).expect("db shape"))
}

/// 2×2 stride-2 max pooling; returns the pooled map and, per output element,
/// the flat input offset of its maximum.
pub(crate) fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (h, w, c) = x.hwc()?;
    if h < 2 || w < 2 {
        return Err(Error::Geometry(format!("maxpool needs at least 2x2, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * c];
    let mut arg = vec![0u32; ho * wo * c];
    let xd = x.data();
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * wo + ox) * c + ch;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    Ok((Tensor::new(&[ho, wo, c], out)?, arg))
}
