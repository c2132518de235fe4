//! Convolutional operators, the multi-head gate (MHG) and conditional
//! convolution (CondConv).
//!
//! Each layer is a generic struct over its leaf type (see [`crate::params`]).
//! The `*_on_tape` functions record differentiable computations; the plain
//! functions evaluate the same graph on constants.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::index;
use crate::kernels::ConvGeom;
use crate::params::{join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Convolution kernel `[C_out, C_in/groups, k, k]` with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: Option<P>,
    pub geom: ConvGeom,
}

pub type ConvParams = Conv<Tensor>;

impl<P> ParamTree for Conv<P> {
    type Leaf = P;
    type With<Q> = Conv<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(join(prefix, "bias"), b)),
            geom: self.geom,
        }
    }
}

/// He-uniform bound for a kernel with `fan_in` inputs per output.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl ConvParams {
    /// He-uniform kernel, zero bias.
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let cin_g = cin / geom.groups;
        Self {
            weight: Tensor::uniform(&[cout, cin_g, k, k], he_bound(cin_g * k * k), rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            geom,
        }
    }

    /// Per-channel identity: `groups = C`, `k×k` delta kernel, zero bias.
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut weight = Tensor::zeros(&[channels, 1, k, k]);
        for c in 0..channels {
            weight.set(&[c, 0, k / 2, k / 2], 1.0);
        }
        Self {
            weight,
            bias: Some(Tensor::zeros(&[channels])),
            geom: ConvGeom {
                stride: 1,
                padding: k / 2,
                groups: channels,
                transposed: false,
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn conv_on_tape(tape: &mut Tape, x: Var, p: &Conv<Var>) -> Result<Var> {
    tape.conv2d(x, p.weight, p.bias, p.geom)
}

/// Runs `build` on a fresh tape whose parameters are constants.
fn evaluate<T: ParamTree<Leaf = Tensor>>(
    inputs: &[&Tensor],
    params: &T,
    build: impl FnOnce(&mut Tape, &[Var], &T::With<Var>) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let bound = params.map_with("", &mut |_, t| tape.constant(t.clone()));
    let y = build(&mut tape, &xs, &bound)?;
    Ok(tape.value(y).clone())
}

/// Cross-correlation (or transposed convolution) plus bias.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    evaluate(&[x], p, |tape, xs, b| conv_on_tape(tape, xs[0], b))
}

/// 2×2 max pooling with stride 2; odd trailing rows and columns are dropped.
pub fn maxpool2d(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.maxpool2(v)?;
    Ok(tape.value(y).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(crate::tape::sigmoid)
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |p, q| p * q)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts.iter().map(|t| tape.constant((*t).clone())).collect();
    let y = tape.concat_channels(&vars)?;
    Ok(tape.value(y).clone())
}

/// Nearest-neighbour resize to `h × w`.
pub fn upsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    index::nearest(x.shape(), h, w)?.apply(x)
}

pub fn upsample_on_tape(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let map = index::nearest(tape.shape(x), h, w)?;
    tape.gather(x, Arc::new(map))
}

/// One head of the gate: `f1(g1(x)) ⊙ f2(g2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhgHead<P> {
    pub g1: Conv<P>,
    pub f1: Conv<P>,
    pub g2: Conv<P>,
    pub f2: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mhg<P> {
    pub heads: Vec<MhgHead<P>>,
}

pub type MhgParams = Mhg<Tensor>;

impl<P> ParamTree for Mhg<P> {
    type Leaf = P;
    type With<Q> = Mhg<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> Mhg<Q> {
        Mhg {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let p = join(prefix, &format!("head{i}"));
                    MhgHead {
                        g1: h.g1.map_with(&join(&p, "g1"), f),
                        f1: h.f1.map_with(&join(&p, "f1"), f),
                        g2: h.g2.map_with(&join(&p, "g2"), f),
                        f2: h.f2.map_with(&join(&p, "f2"), f),
                    }
                })
                .collect(),
        }
    }
}

impl MhgParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(channels, heads)?;
        let g = ConvGeom::pointwise().with_groups(heads);
        let f = ConvGeom::same3x3().with_groups(channels);
        let mut head = || MhgHead {
            g1: ConvParams::init(channels, channels, 1, g, true, rng),
            f1: ConvParams::init(channels, channels, 3, f, true, rng),
            g2: ConvParams::init(channels, channels, 1, g, true, rng),
            f2: ConvParams::init(channels, channels, 3, f, true, rng),
        };
        Ok(Self {
            heads: (0..heads).map(|_| head()).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.heads[0].g1.out_channels()
    }

    /// Validates head count and per-branch kernel shapes.
    pub fn validate(&self) -> Result<()> {
        let heads = self.heads.len();
        if heads == 0 {
            return Err(Error::Config("MHG needs at least one head".into()));
        }
        let c = self.channels();
        check_heads(c, heads)?;
        for h in &self.heads {
            for g in [&h.g1, &h.g2] {
                let want = [c, c / heads, 1, 1];
                if g.weight.shape() != want || g.geom.groups != heads {
                    return Err(Error::shape("MHG 1x1 conv", &want, g.weight.shape()));
                }
            }
            for f in [&h.f1, &h.f2] {
                let want = [c, 1, 3, 3];
                if f.weight.shape() != want || f.geom.groups != c {
                    return Err(Error::shape("MHG depthwise conv", &want, f.weight.shape()));
                }
            }
        }
        Ok(())
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{channels} channels cannot be split across {heads} heads"
        )));
    }
    Ok(())
}

/// `Σ_i f1_i(g1_i(x)) ⊙ f2_i(g2_i(x))`.
pub fn mhg_on_tape(tape: &mut Tape, x: Var, p: &Mhg<Var>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for h in &p.heads {
        let a = conv_on_tape(tape, x, &h.g1)?;
        let a = conv_on_tape(tape, a, &h.f1)?;
        let b = conv_on_tape(tape, x, &h.g2)?;
        let b = conv_on_tape(tape, b, &h.f2)?;
        let y = tape.mul(a, b)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    total.ok_or_else(|| Error::Config("MHG needs at least one head".into()))
}

pub fn mhg_forward(x: &Tensor, p: &MhgParams) -> Result<Tensor> {
    p.validate()?;
    let (_, _, c) = x.hwc()?;
    if c != p.channels() {
        return Err(Error::shape("mhg_forward", &[p.channels()], &[c]));
    }
    evaluate(&[x], p, |tape, xs, b| mhg_on_tape(tape, xs[0], b))
}

pub const EXPERTS: usize = 4;

/// Kernel `Σ_k r_k W_k` with `r = sigmoid(R · avgpool(x) + b_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondConv<P> {
    /// Stacked expert kernels `[E, C_out, C_in/groups, k, k]`.
    pub experts: P,
    /// `[E, C_in]`.
    pub routing: P,
    pub routing_bias: P,
    pub bias: P,
    pub geom: ConvGeom,
}

pub type CondConvParams = CondConv<Tensor>;

impl<P> ParamTree for CondConv<P> {
    type Leaf = P;
    type With<Q> = CondConv<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(String, &P) -> Q) -> CondConv<Q> {
        CondConv {
            experts: f(join(prefix, "experts"), &self.experts),
            routing: f(join(prefix, "routing"), &self.routing),
            routing_bias: f(join(prefix, "routing_bias"), &self.routing_bias),
            bias: f(join(prefix, "bias"), &self.bias),
            geom: self.geom,
        }
    }
}

impl CondConvParams {
    /// He-uniform experts, small routing weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self {
            experts: Tensor::uniform(&[EXPERTS, cout, cin, k, k], he_bound(cin * k * k), rng),
            routing: Tensor::uniform(&[EXPERTS, cin], 0.1, rng),
            routing_bias: Tensor::zeros(&[EXPERTS]),
            bias: Tensor::zeros(&[cout]),
            geom: ConvGeom {
                stride: 1,
                padding: k / 2,
                groups: 1,
                transposed: false,
            },
        }
    }

    pub fn from_experts(experts: Vec<Tensor>, routing: Tensor, routing_bias: Tensor, bias: Tensor, geom: ConvGeom) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("CondConv needs experts".into()))?;
        if experts.iter().any(|e| e.shape() != first.shape()) || first.rank() != 4 {
            return Err(Error::Config("CondConv experts must share one rank-4 shape".into()));
        }
        let mut shape = vec![experts.len()];
        shape.extend_from_slice(first.shape());
        let data = experts.iter().flat_map(|e| e.data().iter().copied()).collect();
        Ok(Self {
            experts: Tensor::new(&shape, data)?,
            routing,
            routing_bias,
            bias,
            geom,
        })
    }

    /// Routing coefficients for `x`.
    pub fn route(&self, x: &Tensor) -> Result<Tensor> {
        evaluate(&[x], self, |tape, xs, b| route_on_tape(tape, xs[0], b))
    }
}

fn route_on_tape(tape: &mut Tape, x: Var, p: &CondConv<Var>) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let logits = tape.mode_product(pooled, p.routing, 0)?;
    let logits = tape.add(logits, p.routing_bias)?;
    tape.sigmoid(logits)
}

pub fn condconv_on_tape(tape: &mut Tape, x: Var, p: &CondConv<Var>) -> Result<Var> {
    let r = route_on_tape(tape, x, p)?;
    let e = tape.shape(p.experts).to_vec();
    let row = tape.reshape(r, &[1, e[0]])?;
    let mixed = tape.mode_product(p.experts, row, 0)?;
    let kernel = tape.reshape(mixed, &e[1..])?;
    tape.conv2d(x, kernel, Some(p.bias), p.geom)
}

pub fn condconv_forward(x: &Tensor, p: &CondConvParams) -> Result<Tensor> {
    evaluate(&[x], p, |tape, xs, b| condconv_on_tape(tape, xs[0], b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    /// Six-loop cross-correlation with zero padding.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], pad: usize) -> Tensor {
        let (h, wd, cin) = x.hwc().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        Tensor::from_fn(&[ho, wo, cout], |i| {
            let mut acc = b[i[2]];
            for ic in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (i[0] + ky) as isize - pad as isize;
                        let xx = (i[1] + kx) as isize - pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += w.get(&[i[2], ic, ky, kx]) * x.get(&[y as usize, xx as usize, ic]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        let x = Tensor::uniform(&[5, 5, 2], 1.0, &mut r);
        let p = ConvParams::init(2, 3, 3, ConvGeom::same3x3(), true, &mut r);
        let mut p = p;
        p.bias = Some(Tensor::uniform(&[3], 1.0, &mut r));
        let got = conv2d(&x, &p).unwrap();
        let want = naive_conv(&x, &p.weight, p.bias.as_ref().unwrap().data(), 1);
        assert!(got.max_rel_diff(&want, 1e-12) < 1e-12);
    }

    #[test]
    fn identity_kernels() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 6, 3], 1.0, &mut r);
        assert_eq!(conv2d(&x, &ConvParams::identity(3, 1)).unwrap(), x);
        assert_eq!(conv2d(&x, &ConvParams::identity(3, 3)).unwrap(), x);
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        let mut r = rng();
        let x = Tensor::uniform(&[3, 4, 2], 1.0, &mut r);
        let p = ConvParams::init(2, 5, 2, ConvGeom::upsample2(), true, &mut r);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[6, 8, 5]);
        // Each output pixel receives exactly one input pixel through one tap.
        let v = (0..2).map(|c| p.weight.get(&[4, c, 1, 0]) * x.get(&[2, 3, c])).sum::<f64>();
        assert!((y.get(&[5, 6, 4]) - v).abs() < 1e-12);
    }

    #[test]
    fn maxpool_takes_window_maximum() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[5, 4, 2], 0.3);
        assert_eq!(maxpool2d(&c).unwrap(), Tensor::full(&[2, 2, 2], 0.3));
    }

    #[test]
    fn pointwise_family() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
        assert_eq!(relu(&Tensor::scalar(-2.0)).data(), &[0.0]);
        let a = Tensor::from_fn(&[2, 2, 1], |i| i[0] as f64);
        let b = Tensor::from_fn(&[2, 2, 2], |i| i[2] as f64 + 5.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.get(&[1, 0, 0]), 1.0);
        assert_eq!(c.get(&[1, 0, 2]), 6.0);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[3, 2, 1])]).is_err());
        let u = upsample_to(&a, 4, 4).unwrap();
        assert_eq!(u.get(&[3, 3, 0]), 1.0);
        assert_eq!(u.get(&[1, 3, 0]), 0.0);
    }

    #[test]
    fn gate_of_ones_is_identity() {
        let mut r = rng();
        let x = Tensor::uniform(&[5, 4, 3], 1.0, &mut r);
        let mut ones = ConvParams::init(3, 3, 1, ConvGeom::pointwise(), true, &mut r);
        ones.weight = Tensor::zeros(&[3, 3, 1, 1]);
        ones.bias = Some(Tensor::ones(&[3]));
        let mut g1 = ones.clone();
        g1.weight = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
        g1.bias = Some(Tensor::zeros(&[3]));
        let p = MhgParams {
            heads: vec![MhgHead {
                g1,
                f1: ConvParams::identity(3, 3),
                g2: ones,
                f2: ConvParams::identity(3, 3),
            }],
        };
        assert_eq!(mhg_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_second_branch_annihilates() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 4, 4], 1.0, &mut r);
        let mut p = MhgParams::init(4, 2, &mut r).unwrap();
        for h in &mut p.heads {
            h.g2.weight = Tensor::zeros(h.g2.weight.shape());
            h.g2.bias = Some(Tensor::zeros(&[4]));
            h.f2.bias = Some(Tensor::zeros(&[4]));
        }
        assert_eq!(mhg_forward(&x, &p).unwrap(), Tensor::zeros(&[4, 4, 4]));
    }

    #[test]
    fn mhg_is_sum_of_heads() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 3, 4], 1.0, &mut r);
        let p = MhgParams::init(4, 2, &mut r).unwrap();
        let mut want = Tensor::zeros(&[4, 3, 4]);
        for h in &p.heads {
            let a = conv2d(&conv2d(&x, &h.g1).unwrap(), &h.f1).unwrap();
            let b = conv2d(&conv2d(&x, &h.g2).unwrap(), &h.f2).unwrap();
            want.add_assign(&elementwise_mul(&a, &b).unwrap());
        }
        assert!(mhg_forward(&x, &p).unwrap().max_rel_diff(&want, 1e-12) < 1e-12);
    }

    #[test]
    fn mhg_rejects_indivisible_heads() {
        let mut r = rng();
        assert!(matches!(MhgParams::init(6, 4, &mut r), Err(Error::Config(_))));
        let p = MhgParams::init(4, 2, &mut r).unwrap();
        assert!(mhg_forward(&Tensor::zeros(&[3, 3, 2]), &p).is_err());
    }

    #[test]
    fn mhg_is_not_linear() {
        let mut r = rng();
        let p = MhgParams::init(2, 1, &mut r).unwrap();
        let x = Tensor::uniform(&[3, 3, 2], 1.0, &mut r);
        let y1 = mhg_forward(&x, &p).unwrap();
        let y2 = mhg_forward(&x.scale(2.0), &p).unwrap();
        assert!(y2.max_rel_diff(&y1.scale(2.0), 1e-9) > 1e-3);
    }

    #[test]
    fn equal_experts_reduce_to_scaled_conv() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 4, 2], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut r);
        let p = CondConvParams::from_experts(
            vec![w.clone(); EXPERTS],
            Tensor::uniform(&[EXPERTS, 2], 1.0, &mut r),
            Tensor::uniform(&[EXPERTS], 1.0, &mut r),
            Tensor::uniform(&[3], 1.0, &mut r),
            ConvGeom::same3x3(),
        )
        .unwrap();
        let rsum = p.route(&x).unwrap().sum();
        let plain = ConvParams {
            weight: w.scale(rsum),
            bias: Some(p.bias.clone()),
            geom: ConvGeom::same3x3(),
        };
        let want = conv2d(&x, &plain).unwrap();
        assert!(condconv_forward(&x, &p).unwrap().max_rel_diff(&want, 1e-12) < 1e-12);
    }

    #[test]
    fn saturated_routing_leaves_bias() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 4, 2], 1.0, &mut r).map(f64::abs);
        let mut p = CondConvParams::init(2, 3, 3, &mut r);
        p.routing = Tensor::full(&[EXPERTS, 2], -1e3);
        p.routing_bias = Tensor::full(&[EXPERTS], -1e3);
        p.bias = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = condconv_forward(&x, &p).unwrap();
        for px in y.data().chunks_exact(3) {
            for (v, b) in px.iter().zip([0.1, -0.2, 0.3]) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expert_permutation_is_symmetric() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 4, 2], 1.0, &mut r);
        let p = CondConvParams::init(2, 3, 3, &mut r);
        let perm = [2, 0, 3, 1];
        let mut q = p.clone();
        let e = p.experts.len() / EXPERTS;
        for (dst, &src) in perm.iter().enumerate() {
            q.experts.data_mut()[dst * e..(dst + 1) * e]
                .copy_from_slice(&p.experts.data()[src * e..(src + 1) * e]);
            q.routing.data_mut()[dst * 2..dst * 2 + 2]
                .copy_from_slice(&p.routing.data()[src * 2..src * 2 + 2]);
            q.routing_bias.data_mut()[dst] = p.routing_bias.data()[src];
        }
        let a = condconv_forward(&x, &p).unwrap();
        let b = condconv_forward(&x, &q).unwrap();
        assert!(a.max_rel_diff(&b, 1e-12) < 1e-12);
    }

    #[test]
    fn routing_lies_in_open_unit_interval() {
        let mut r = rng();
        let p = CondConvParams::init(3, 2, 3, &mut r);
        let x = Tensor::uniform(&[5, 5, 3], 10.0, &mut r);
        assert!(p.route(&x).unwrap().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
