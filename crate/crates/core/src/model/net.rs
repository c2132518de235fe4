use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{index, ConvGeom};
use crate::mts::{self, MtsLayer, MtsLayerParams};
use crate::nn::{self, CondConv, CondConvParams, Conv, ConvParams, Mhg, MhgParams};
use crate::params::{join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::NetworkConfig;

/// Reducing MTS layer, multi-head gate, restoring MTS layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsDrBlock<P> {
    pub mts1: MtsLayer<P>,
    pub mhg: Mhg<P>,
    pub mts2: MtsLayer<P>,
}

pub type MtsDrBlockParams = MtsDrBlock<Tensor>;

impl<P> ParamTree for MtsDrBlock<P> {
    type Leaf = P;
    type With<Q> = MtsDrBlock<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> MtsDrBlock<Q> {
        MtsDrBlock {
            mts1: self.mts1.map_with(&join(prefix, "mts1"), f),
            mhg: self.mhg.map_with(&join(prefix, "mhg"), f),
            mts2: self.mts2.map_with(&join(prefix, "mts2"), f),
        }
    }
}

impl MtsDrBlockParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &NetworkConfig,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c1 = cfg.reduced_channels();
        let down = cfg.window_pairs();
        let up: Vec<(usize, usize)> = down.iter().map(|&(w, r)| (r, w)).collect();
        if up.iter().enumerate().any(|(i, p)| up[..i].iter().any(|q| q.0 == p.0)) {
            return Err(Error::Config(format!(
                "window scales {:?} collapse to repeated reduced windows at compress_ratio {}",
                cfg.window_scales, cfg.compress_ratio
            )));
        }
        Ok(Self {
            mts1: MtsLayerParams::init(in_channels, c1, &down, cfg.terms, rng),
            mhg: MhgParams::init(c1, cfg.heads, rng)?,
            mts2: MtsLayerParams::init(c1, out_channels, &up, cfg.terms, rng),
        })
    }
}

/// Spatial extents of the reduced map inside a block.
pub fn reduced_extents(h: usize, w: usize, compress_ratio: f64) -> (usize, usize) {
    (
        mts::reduced_extent(h, compress_ratio),
        mts::reduced_extent(w, compress_ratio),
    )
}

pub fn block_on_tape(
    tape: &mut Tape,
    x: Var,
    p: &MtsDrBlock<Var>,
    compress_ratio: f64,
) -> Result<Var> {
    let (h, w, _) = tape.value(x).hwc()?;
    let reduced = mts::mts_on_tape(tape, x, &p.mts1, reduced_extents(h, w, compress_ratio))?;
    let gated = nn::mhg_on_tape(tape, reduced, &p.mhg)?;
    mts::mts_on_tape(tape, gated, &p.mts2, (h, w))
}

pub fn backbone_on_tape(
    tape: &mut Tape,
    x: Var,
    blocks: &[MtsDrBlock<Var>],
    compress_ratio: f64,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Config("backbone needs at least one block".into()));
    }
    blocks
        .iter()
        .try_fold(x, |h, b| block_on_tape(tape, h, b, compress_ratio))
}

/// `x - sigmoid(x̄) ⊙ x̄`.
pub fn residual_gate_on_tape(tape: &mut Tape, x: Var, x_bar: Var) -> Result<Var> {
    let s = tape.sigmoid(x_bar)?;
    let major = tape.mul(s, x_bar)?;
    tape.sub(x, major)
}

/// 1×1 reduce to half width, 3×3, 1×1 expand; ReLU after each.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<P> {
    pub reduce: Conv<P>,
    pub conv: Conv<P>,
    pub expand: Conv<P>,
}

impl<P> ParamTree for Bottleneck<P> {
    type Leaf = P;
    type With<Q> = Bottleneck<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Bottleneck<Q> {
        Bottleneck {
            reduce: self.reduce.map_with(&join(prefix, "reduce"), f),
            conv: self.conv.map_with(&join(prefix, "conv"), f),
            expand: self.expand.map_with(&join(prefix, "expand"), f),
        }
    }
}

impl Bottleneck<Tensor> {
    fn init<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let mid = (cout / 2).max(1);
        Self {
            reduce: ConvParams::init(cin, mid, 1, ConvGeom::pointwise(), true, rng),
            conv: ConvParams::init(mid, mid, 3, ConvGeom::same3x3(), true, rng),
            expand: ConvParams::init(mid, cout, 1, ConvGeom::pointwise(), true, rng),
        }
    }
}

fn conv_relu(tape: &mut Tape, x: Var, p: &Conv<Var>) -> Result<Var> {
    let y = nn::conv_on_tape(tape, x, p)?;
    tape.relu(y)
}

fn bottleneck_on_tape(tape: &mut Tape, x: Var, p: &Bottleneck<Var>) -> Result<Var> {
    let y = conv_relu(tape, x, &p.reduce)?;
    let y = conv_relu(tape, y, &p.conv)?;
    conv_relu(tape, y, &p.expand)
}

/// Side branch: CondConv, ReLU, 1×1 projection to one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Side<P> {
    pub cond: CondConv<P>,
    pub proj: Conv<P>,
}

impl<P> ParamTree for Side<P> {
    type Leaf = P;
    type With<Q> = Side<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Side<Q> {
        Side {
            cond: self.cond.map_with(&join(prefix, "cond"), f),
            proj: self.proj.map_with(&join(prefix, "proj"), f),
        }
    }
}

/// U-shaped refinement over three scales with side outputs and fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement<P> {
    pub stem: Conv<P>,
    /// Encoder bottlenecks at full, half and quarter resolution.
    pub enc: Vec<Bottleneck<P>>,
    /// Learnable 2× upsamplers, quarter→half then half→full.
    pub up: Vec<Conv<P>>,
    /// Decoder bottlenecks at half then full resolution.
    pub dec: Vec<Bottleneck<P>>,
    /// Side branches at full, half and quarter resolution.
    pub sides: Vec<Side<P>>,
    pub fuse1: Conv<P>,
    pub fuse2: Conv<P>,
}

impl<P> ParamTree for Refinement<P> {
    type Leaf = P;
    type With<Q> = Refinement<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Refinement<Q> {
        Refinement {
            stem: self.stem.map_with(&join(prefix, "stem"), f),
            enc: self.enc.map_with(&join(prefix, "enc"), f),
            up: self.up.map_with(&join(prefix, "up"), f),
            dec: self.dec.map_with(&join(prefix, "dec"), f),
            sides: self.sides.map_with(&join(prefix, "side"), f),
            fuse1: self.fuse1.map_with(&join(prefix, "fuse1"), f),
            fuse2: self.fuse2.map_with(&join(prefix, "fuse2"), f),
        }
    }
}

pub type RefinementParams = Refinement<Tensor>;

impl RefinementParams {
    pub fn init<R: Rng + ?Sized>(plan: [usize; 3], rng: &mut R) -> Self {
        let [c1, c2, c3] = plan;
        let fuse_mid = (c1 / 2).max(1);
        Self {
            stem: ConvParams::init(3, c1, 3, ConvGeom::same3x3(), true, rng),
            enc: vec![
                Bottleneck::init(c1 + 3, c1, rng),
                Bottleneck::init(c1 + 3, c2, rng),
                Bottleneck::init(c2 + 3, c3, rng),
            ],
            up: vec![
                ConvParams::init(c3, c2, 2, ConvGeom::upsample2(), true, rng),
                ConvParams::init(c2, c1, 2, ConvGeom::upsample2(), true, rng),
            ],
            dec: vec![Bottleneck::init(2 * c2, c2, rng), Bottleneck::init(2 * c1, c1, rng)],
            sides: [c1, c2, c3]
                .into_iter()
                .map(|c| Side {
                    cond: CondConvParams::init(c, c1, 3, rng),
                    proj: ConvParams::init(c1, 1, 1, ConvGeom::pointwise(), true, rng),
                })
                .collect(),
            fuse1: ConvParams::init(3, fuse_mid, 3, ConvGeom::same3x3(), true, rng),
            fuse2: ConvParams::init(fuse_mid, 1, 1, ConvGeom::pointwise(), true, rng),
        }
    }
}

/// Probability maps on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SideVars {
    pub sides: [Var; 3],
    pub fused: Var,
}

pub fn refinement_on_tape(tape: &mut Tape, x_tilde: Var, p: &Refinement<Var>) -> Result<SideVars> {
    let (h, w, _) = tape.value(x_tilde).hwc()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Geometry(format!(
            "refinement input {h}x{w} is not divisible by 4"
        )));
    }
    let x2 = nn::upsample_on_tape(tape, x_tilde, h / 2, w / 2)?;
    let x4 = nn::upsample_on_tape(tape, x_tilde, h / 4, w / 4)?;

    let stem = conv_relu(tape, x_tilde, &p.stem)?;
    let cat = tape.concat_channels(&[stem, x_tilde])?;
    let e1 = bottleneck_on_tape(tape, cat, &p.enc[0])?;
    let pooled = tape.maxpool2(e1)?;
    let cat = tape.concat_channels(&[pooled, x2])?;
    let e2 = bottleneck_on_tape(tape, cat, &p.enc[1])?;
    let pooled = tape.maxpool2(e2)?;
    let cat = tape.concat_channels(&[pooled, x4])?;
    let e3 = bottleneck_on_tape(tape, cat, &p.enc[2])?;

    let u2 = conv_relu(tape, e3, &p.up[0])?;
    let cat = tape.concat_channels(&[u2, e2])?;
    let d2 = bottleneck_on_tape(tape, cat, &p.dec[0])?;
    let u1 = conv_relu(tape, d2, &p.up[1])?;
    let cat = tape.concat_channels(&[u1, e1])?;
    let d1 = bottleneck_on_tape(tape, cat, &p.dec[1])?;

    let mut sides = [x_tilde; 3];
    for (slot, (feat, side)) in sides.iter_mut().zip([d1, d2, e3].into_iter().zip(&p.sides)) {
        let c = nn::condconv_on_tape(tape, feat, &side.cond)?;
        let c = tape.relu(c)?;
        let z = nn::conv_on_tape(tape, c, &side.proj)?;
        let z = if tape.shape(z)[..2] == [h, w] {
            z
        } else {
            nn::upsample_on_tape(tape, z, h, w)?
        };
        *slot = tape.sigmoid(z)?;
    }
    let cat = tape.concat_channels(&sides)?;
    let f = conv_relu(tape, cat, &p.fuse1)?;
    let f = nn::conv_on_tape(tape, f, &p.fuse2)?;
    let fused = tape.sigmoid(f)?;
    Ok(SideVars { sides, fused })
}

/// Backbone blocks followed by the refinement network.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<P> {
    pub backbone: Vec<MtsDrBlock<P>>,
    pub refinement: Refinement<P>,
}

pub type NetParams = Net<Tensor>;

impl<P> ParamTree for Net<P> {
    type Leaf = P;
    type With<Q> = Net<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Net<Q> {
        Net {
            backbone: self.backbone.map_with(&join(prefix, "backbone"), f),
            refinement: self.refinement.map_with(&join(prefix, "refinement"), f),
        }
    }
}

impl NetParams {
    /// Channel chain `3 → C → … → C → 3` over the blocks.
    pub fn init<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let cin = if i == 0 { 3 } else { cfg.channels };
            let cout = if i + 1 == cfg.blocks { 3 } else { cfg.channels };
            backbone.push(MtsDrBlockParams::init(cfg, cin, cout, rng)?);
        }
        Ok(Self {
            backbone,
            refinement: RefinementParams::init(cfg.refinement_plan(), rng),
        })
    }
}

/// Outputs of one forward pass on a tape, cropped to the input extents.
#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    pub sides: [Var; 3],
    pub fused: Var,
    pub x_tilde: Var,
}

/// Extents after reflect padding to a multiple of `m`.
pub fn padded_extents(h: usize, w: usize, m: usize) -> (usize, usize) {
    (h.div_ceil(m) * m, w.div_ceil(m) * m)
}

pub fn net_on_tape(tape: &mut Tape, image: Var, p: &Net<Var>, cfg: &NetworkConfig) -> Result<NetVars> {
    let (h, w, c) = tape.value(image).hwc()?;
    if c != 3 {
        return Err(Error::Geometry(format!("expected a 3-channel image, got {c} channels")));
    }
    let (ph, pw) = padded_extents(h, w, cfg.pad_multiple());
    let x = if (ph, pw) == (h, w) {
        image
    } else {
        tape.gather(image, Arc::new(index::reflect_pad(&[h, w, c], ph, pw)?))?
    };
    let x_bar = backbone_on_tape(tape, x, &p.backbone, cfg.compress_ratio)?;
    let x_tilde = residual_gate_on_tape(tape, x, x_bar)?;
    let out = refinement_on_tape(tape, x_tilde, &p.refinement)?;
    let crop = |tape: &mut Tape, v: Var| -> Result<Var> {
        if (ph, pw) == (h, w) {
            return Ok(v);
        }
        let shape = tape.shape(v).to_vec();
        tape.gather(v, Arc::new(index::fit(&shape, h, w)?))
    };
    let mut sides = out.sides;
    for s in &mut sides {
        *s = crop(tape, *s)?;
    }
    Ok(NetVars {
        sides,
        fused: crop(tape, out.fused)?,
        x_tilde: crop(tape, x_tilde)?,
    })
}
