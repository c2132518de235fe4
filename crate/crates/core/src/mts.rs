//! Generalized tensor summation (GTS) and its multi-scale, patch-wise form
//! (MTS).
//!
//! GTS maps a rank-`J` tensor through a sum of `T` multilinear terms,
//! `Σ_t x ×_1 A_1^(t) ×_2 … ×_J A_J^(t)`. MTS tiles an `H×W×C` map into
//! non-overlapping windows at several sizes, applies one shared GTS per
//! window size to every tile, reassembles each scale and sums the scales.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::index::{self, IndexMap};
use crate::params::{join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `T` tuples of factor matrices; `terms[t][j]` acts on mode `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gts<P> {
    pub terms: Vec<Vec<P>>,
}

pub type GtsParams = Gts<Tensor>;

impl<P> ParamTree for Gts<P> {
    type Leaf = P;
    type With<Q> = Gts<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Gts<Q> {
        Gts {
            terms: self
                .terms
                .iter()
                .enumerate()
                .map(|(t, mats)| {
                    mats.iter()
                        .enumerate()
                        .map(|(j, m)| f(join(prefix, &format!("t{t}.mode{j}")), m))
                        .collect()
                })
                .collect(),
        }
    }
}

impl GtsParams {
    pub fn new(terms: Vec<Vec<Tensor>>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Config("GTS needs at least one term".into()))?;
        if first.is_empty() {
            return Err(Error::Config("GTS term has no factors".into()));
        }
        for mats in &terms {
            if mats.len() != first.len() {
                return Err(Error::Config("GTS terms differ in rank".into()));
            }
            for (m, f) in mats.iter().zip(first) {
                if m.rank() != 2 || m.shape() != f.shape() {
                    return Err(Error::shape("GTS factor", f.shape(), m.shape()));
                }
                if !m.all_finite() {
                    return Err(Error::Config("GTS factor is not finite".into()));
                }
            }
        }
        Ok(Self { terms })
    }

    /// One term of identity factors for an input of the given extents.
    pub fn identity(extents: &[usize]) -> Self {
        Self {
            terms: vec![extents.iter().map(|&n| Tensor::eye(n)).collect()],
        }
    }

    /// Factor `(m_j × n_j)` drawn from `U(-s, s)`, `s = √(6/(n_j+m_j)) / √T`.
    pub fn init<R: Rng + ?Sized>(
        in_extents: &[usize],
        out_extents: &[usize],
        terms: usize,
        rng: &mut R,
    ) -> Self {
        let scale = (terms as f64).sqrt();
        Self {
            terms: (0..terms)
                .map(|_| {
                    in_extents
                        .iter()
                        .zip(out_extents)
                        .map(|(&n, &m)| {
                            let s = (6.0 / (n + m) as f64).sqrt() / scale;
                            Tensor::uniform(&[m, n], s, rng)
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn input_extents(&self) -> Vec<usize> {
        self.terms[0].iter().map(|m| m.shape()[1]).collect()
    }

    pub fn output_extents(&self) -> Vec<usize> {
        self.terms[0].iter().map(|m| m.shape()[0]).collect()
    }
}

/// Applies a bound GTS to modes `first_mode..first_mode+J` of `x`.
pub fn gts_on_tape(tape: &mut Tape, x: Var, gts: &Gts<Var>, first_mode: usize) -> Result<Var> {
    let mut total: Option<Var> = None;
    for mats in &gts.terms {
        let mut y = x;
        for (j, &a) in mats.iter().enumerate() {
            y = tape.mode_product(y, a, first_mode + j)?;
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    total.ok_or_else(|| Error::Config("GTS needs at least one term".into()))
}

/// `Σ_t x ×_1 A_1^(t) ⋯ ×_J A_J^(t)`.
pub fn gts_forward(x: &Tensor, p: &GtsParams) -> Result<Tensor> {
    if x.rank() != p.terms[0].len() {
        return Err(Error::Geometry(format!(
            "rank-{} input for a rank-{} GTS",
            x.rank(),
            p.terms[0].len()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = p.bind(&mut tape);
    let y = gts_on_tape(&mut tape, xv, &bound, 0)?;
    Ok(tape.value(y).clone())
}

/// Tiles `x` (`H×W×C`, both extents divisible by `w`) into
/// `[(H/w)(W/w), w, w, C]`, row-major over tiles.
pub fn patch_embed(x: &Tensor, w: usize) -> Result<Tensor> {
    index::patch_embed(x.shape(), w, w)?.apply(x)
}

/// Places `[rows·cols, w', w', C]` tiles back on a `rows × cols` grid,
/// giving a `(rows·w') × (cols·w') × C` map.
pub fn patch_unembed(patches: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    index::patch_unembed(patches.shape(), rows, cols)?.apply(patches)
}

/// Reduced window for a compression ratio: `max(1, round(w·√cr))`.
pub fn reduced_window(w: usize, compress_ratio: f64) -> usize {
    ((w as f64 * compress_ratio.sqrt()).round() as usize).max(1)
}

/// Common output extent of a dimension-reducing layer: `round(n·√cr)`.
pub fn reduced_extent(n: usize, compress_ratio: f64) -> usize {
    ((n as f64 * compress_ratio.sqrt()).round() as usize).max(1)
}

/// One window size of an MTS layer: input tiles of `window` pixels are
/// mapped to output tiles of `out_window` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsScale<P> {
    pub window: usize,
    pub out_window: usize,
    pub gts: Gts<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtsLayer<P> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub scales: Vec<MtsScale<P>>,
    /// Per-output-channel bias.
    pub bias: P,
}

pub type MtsLayerParams = MtsLayer<Tensor>;

impl<P> ParamTree for MtsLayer<P> {
    type Leaf = P;
    type With<Q> = MtsLayer<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> MtsLayer<Q> {
        MtsLayer {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            scales: self
                .scales
                .iter()
                .map(|s| MtsScale {
                    window: s.window,
                    out_window: s.out_window,
                    gts: s.gts.map_with(&join(prefix, &format!("w{}", s.window)), f),
                })
                .collect(),
            bias: f(join(prefix, "bias"), &self.bias),
        }
    }
}

impl MtsLayerParams {
    /// Validates window and channel consistency of every scale.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        scales: Vec<MtsScale<Tensor>>,
        bias: Tensor,
    ) -> Result<Self> {
        let layer = Self {
            in_channels,
            out_channels,
            scales,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("MTS layer needs at least one scale".into()));
        }
        let mut seen = Vec::new();
        for s in &self.scales {
            if s.window == 0 || s.out_window == 0 || seen.contains(&s.window) {
                return Err(Error::Config(format!(
                    "window sizes must be distinct and positive, got {}",
                    s.window
                )));
            }
            seen.push(s.window);
            let want_in = [s.window, s.window, self.in_channels];
            let want_out = [s.out_window, s.out_window, self.out_channels];
            if s.gts.input_extents() != want_in || s.gts.output_extents() != want_out {
                return Err(Error::Config(format!(
                    "scale w={} factors map {:?}->{:?}, expected {:?}->{:?}",
                    s.window,
                    s.gts.input_extents(),
                    s.gts.output_extents(),
                    want_in,
                    want_out
                )));
            }
        }
        if self.bias.shape() != [self.out_channels] {
            return Err(Error::shape("MTS bias", &[self.out_channels], self.bias.shape()));
        }
        Ok(())
    }

    /// Randomly initialized layer; `out_window(w)` picks each scale's output
    /// window. Bias starts at zero.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        windows: &[(usize, usize)],
        terms: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            scales: windows
                .iter()
                .map(|&(w, ow)| MtsScale {
                    window: w,
                    out_window: ow,
                    gts: GtsParams::init(&[w, w, in_channels], &[ow, ow, out_channels], terms, rng),
                })
                .collect(),
            bias: Tensor::zeros(&[out_channels]),
        }
    }
}

/// Gather maps for one scale: reflect-pad + embed, and unembed + fit.
fn scale_maps(
    in_shape: &[usize],
    window: usize,
    out_window: usize,
    out_channels: usize,
    target: (usize, usize),
) -> Result<(IndexMap, IndexMap)> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (nh, nw) = (h.div_ceil(window), w.div_ceil(window));
    let embed = index::reflect_pad(in_shape, nh * window, nw * window)?
        .then(&index::patch_embed(&[nh * window, nw * window, c], window, window)?)?;
    let tiles = [nh * nw, out_window, out_window, out_channels];
    let unembed = index::patch_unembed(&tiles, nh, nw)?
        .then(&index::fit(&[nh * out_window, nw * out_window, out_channels], target.0, target.1)?)?;
    Ok((embed, unembed))
}

/// MTS on a tape. Every scale's reassembled map is cropped or zero-padded to
/// `target` (height, width) before the scales are summed.
pub fn mts_on_tape(
    tape: &mut Tape,
    x: Var,
    layer: &MtsLayer<Var>,
    target: (usize, usize),
) -> Result<Var> {
    let (_, _, c) = tape.value(x).hwc()?;
    if c != layer.in_channels {
        return Err(Error::shape(
            "mts_forward channels",
            &[layer.in_channels],
            &[c],
        ));
    }
    let mut total: Option<Var> = None;
    for s in &layer.scales {
        let (embed, unembed) = scale_maps(
            tape.shape(x),
            s.window,
            s.out_window,
            layer.out_channels,
            target,
        )?;
        let patches = tape.gather(x, Arc::new(embed))?;
        let mapped = gts_on_tape(tape, patches, &s.gts, 1)?;
        let y = tape.gather(mapped, Arc::new(unembed))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let total = total.ok_or_else(|| Error::Config("MTS layer has no scales".into()))?;
    tape.channel_bias(total, layer.bias)
}

/// Multi-scale tensorial summation of an `H×W×C_in` map, producing
/// `target.0 × target.1 × C_out`.
pub fn mts_forward(x: &Tensor, p: &MtsLayerParams, target: (usize, usize)) -> Result<Tensor> {
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = p.bind(&mut tape);
    let y = mts_on_tape(&mut tape, xv, &bound, target)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_tiles_row_major() {
        let x = Tensor::from_fn(&[4, 4, 1], |i| (i[0] * 4 + i[1]) as f64);
        let p = patch_embed(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 2, 2, 1]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn whole_image_window_is_single_patch() {
        let x = Tensor::from_fn(&[3, 3, 2], |i| (i[0] + 2 * i[1] + 5 * i[2]) as f64);
        let p = patch_embed(&x, 3).unwrap();
        assert_eq!(p.shape(), &[1, 3, 3, 2]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn unembed_column_grid() {
        let tiles = Tensor::new(&[2, 1, 1, 1], vec![7.0, -2.0]).unwrap();
        let m = patch_unembed(&tiles, 2, 1).unwrap();
        assert_eq!(m.shape(), &[2, 1, 1]);
        assert_eq!(m.data(), &[7.0, -2.0]);
    }

    #[test]
    fn reduced_tiles_shrink_the_grid() {
        // 64/8 = 8 tiles per side, each reduced to 5 pixels.
        let tiles = Tensor::zeros(&[64, 5, 5, 3]);
        assert_eq!(patch_unembed(&tiles, 8, 8).unwrap().shape(), &[40, 40, 3]);
        assert_eq!(reduced_window(8, 0.4), 5);
        assert!(patch_unembed(&tiles, 8, 7).is_err());
    }

    #[test]
    fn gts_identity_and_zero_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4, 2], 1.0, &mut rng);
        assert_eq!(gts_forward(&x, &GtsParams::identity(&[3, 4, 2])).unwrap(), x);

        let one = GtsParams::init(&[3, 4, 2], &[2, 5, 3], 1, &mut rng);
        let mut two = one.clone();
        two.terms.push(vec![
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[5, 4]),
            Tensor::zeros(&[3, 2]),
        ]);
        let a = gts_forward(&x, &one).unwrap();
        let b = gts_forward(&x, &two).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gts_rejects_ragged_terms() {
        let err = GtsParams::new(vec![
            vec![Tensor::eye(2), Tensor::eye(3)],
            vec![Tensor::eye(2)],
        ]);
        assert!(err.is_err());
        let x = Tensor::ones(&[2, 4]);
        let p = GtsParams::identity(&[2, 3]);
        assert!(matches!(gts_forward(&x, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mts_full_window_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[8, 8, 3], 1.0, &mut rng);
        let layer = MtsLayerParams::new(
            3,
            3,
            vec![MtsScale {
                window: 8,
                out_window: 8,
                gts: GtsParams::identity(&[8, 8, 3]),
            }],
            Tensor::zeros(&[3]),
        )
        .unwrap();
        assert_eq!(mts_forward(&x, &layer, (8, 8)).unwrap(), x);
    }

    #[test]
    fn mts_rejects_inconsistent_scale() {
        let bad = MtsLayerParams::new(
            3,
            4,
            vec![MtsScale {
                window: 4,
                out_window: 3,
                gts: GtsParams::identity(&[4, 4, 3]),
            }],
            Tensor::zeros(&[4]),
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn non_divisible_input_is_reflect_padded_then_cropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[6, 5, 2], 1.0, &mut rng);
        let layer = MtsLayerParams::new(
            2,
            2,
            vec![MtsScale {
                window: 4,
                out_window: 4,
                gts: GtsParams::identity(&[4, 4, 2]),
            }],
            Tensor::zeros(&[2]),
        )
        .unwrap();
        // Identity tiles: padding then cropping must give back the input.
        assert_eq!(mts_forward(&x, &layer, (6, 5)).unwrap(), x);
    }
}
