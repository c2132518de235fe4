//! The MTS-DR network: backbone of MTS-DR blocks, residual gate and
//! refinement network, plus cost accounting and checkpoints.

pub mod checkpoint;
mod config;
pub mod cost;
mod net;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamTree};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use config::NetworkConfig;
pub use net::{
    backbone_on_tape, block_on_tape, net_on_tape, padded_extents, reduced_extents,
    refinement_on_tape, residual_gate_on_tape, Bottleneck, MtsDrBlock, MtsDrBlockParams, Net,
    NetParams, NetVars, Refinement, RefinementParams, Side, SideVars,
};

/// Probability maps of one image, each `H×W×1` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputs {
    pub sides: [Tensor; 3],
    pub fused: Tensor,
}

/// Network parameters held in a named store, with the layout mapping every
/// layer tensor to its slot.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    layout: Net<ParamId>,
    store: ParamStore,
}

/// A bound forward pass.
pub struct Forward {
    pub outputs: NetVars,
    /// Tape variable of every stored parameter, in store order.
    pub params: Vec<Var>,
}

impl Network {
    /// Random initialization from the `init` stream of `seed`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::INIT);
        let params = NetParams::init(&config, &mut r)?;
        Ok(Self::from_params(config, &params))
    }

    pub fn from_params(config: NetworkConfig, params: &NetParams) -> Self {
        let mut store = ParamStore::new();
        let layout = store.register(params, "");
        Self {
            config,
            layout,
            store,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Materialized layer parameters.
    pub fn params(&self) -> NetParams {
        self.layout.map_with("", &mut |_, id| self.store.get(*id).clone())
    }

    /// Records a forward pass; parameters become tape leaves when
    /// `trainable`, constants otherwise.
    pub fn forward(&self, tape: &mut Tape, image: Var, trainable: bool) -> Result<Forward> {
        let params: Vec<Var> = self
            .store
            .values()
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let bound = self.layout.map_with("", &mut |_, id| params[id.0]);
        let outputs = net_on_tape(tape, image, &bound, &self.config)?;
        Ok(Forward { outputs, params })
    }

    /// Side and fused maps plus the gated input `X̃`.
    pub fn predict(&self, image: &Tensor) -> Result<(SideOutputs, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, x, false)?.outputs;
        let get = |v: Var| tape.value(v).clone();
        Ok((
            SideOutputs {
                sides: out.sides.map(get),
                fused: get(out.fused),
            },
            get(out.x_tilde),
        ))
    }
}

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

pub fn mts_dr_block_forward(x: &Tensor, p: &MtsDrBlockParams, compress_ratio: f64) -> Result<Tensor> {
    evaluate(&[x], p, |tape, xs, b| block_on_tape(tape, xs[0], b, compress_ratio))
}

pub fn backbone_forward(x: &Tensor, blocks: &[MtsDrBlockParams], compress_ratio: f64) -> Result<Tensor> {
    evaluate(&[x], &blocks.to_vec(), |tape, xs, b| {
        backbone_on_tape(tape, xs[0], b, compress_ratio)
    })
}

/// `X̃ = X - sigmoid(X̄) ⊙ X̄`.
pub fn residual_gate(x: &Tensor, x_bar: &Tensor) -> Result<Tensor> {
    if x.shape() != x_bar.shape() {
        return Err(Error::shape("residual_gate", x.shape(), x_bar.shape()));
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(x_bar.clone()));
    let y = residual_gate_on_tape(&mut tape, a, b)?;
    Ok(tape.value(y).clone())
}

pub fn refinement_forward(x_tilde: &Tensor, p: &RefinementParams) -> Result<SideOutputs> {
    let mut tape = Tape::new();
    let x = tape.constant(x_tilde.clone());
    let bound = p.map_with("", &mut |_, t| tape.constant(t.clone()));
    let out = refinement_on_tape(&mut tape, x, &bound)?;
    Ok(SideOutputs {
        sides: out.sides.map(|v| tape.value(v).clone()),
        fused: tape.value(out.fused).clone(),
    })
}

/// Full forward pass; also returns `X̃`.
pub fn net_forward(image: &Tensor, cfg: &NetworkConfig, p: &NetParams) -> Result<(SideOutputs, Tensor)> {
    Network::from_params(cfg.clone(), p).predict(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ConvGeom;
    use crate::mts::{GtsParams, MtsLayerParams, MtsScale};
    use crate::nn::{ConvParams, MhgHead, MhgParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> NetworkConfig {
        NetworkConfig {
            name: None,
            blocks: 1,
            channels: 4,
            compress_ratio: 0.4,
            window_scales: vec![4],
            terms: 1,
            heads: 2,
            refinement_channels: None,
            lambda: 1.1,
            eta: 0.3,
        }
    }

    #[test]
    fn residual_gate_identity_and_saturation() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 4, 3], 1.0, &mut r);
        assert_eq!(residual_gate(&x, &Tensor::zeros(&[3, 4, 3])).unwrap(), x);
        let big = Tensor::full(&[3, 4, 3], 50.0);
        let y = residual_gate(&x, &big).unwrap();
        assert!(y.zip_map(&x, |a, b| a - (b - 50.0)).unwrap().max_abs() < 1e-12);
        let xb = Tensor::uniform(&[3, 4, 3], 2.0, &mut r);
        let y = residual_gate(&x, &xb).unwrap();
        for ((&yv, &xv), &bv) in y.data().iter().zip(x.data()).zip(xb.data()) {
            let s = 1.0 / (1.0 + (-bv).exp());
            assert!((yv - (xv - s * bv)).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_block_with_full_compress_ratio() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[8, 8, 2], 1.0, &mut r);
        let layer = || {
            MtsLayerParams::new(
                2,
                2,
                vec![MtsScale {
                    window: 4,
                    out_window: 4,
                    gts: GtsParams::identity(&[4, 4, 2]),
                }],
                Tensor::zeros(&[2]),
            )
            .unwrap()
        };
        let mut ones = ConvParams::init(2, 2, 1, ConvGeom::pointwise(), true, &mut r);
        ones.weight = Tensor::zeros(&[2, 2, 1, 1]);
        ones.bias = Some(Tensor::ones(&[2]));
        let mut g1 = ones.clone();
        g1.weight = Tensor::eye(2).reshape(&[2, 2, 1, 1]).unwrap();
        g1.bias = Some(Tensor::zeros(&[2]));
        let block = MtsDrBlockParams {
            mts1: layer(),
            mhg: MhgParams {
                heads: vec![MhgHead {
                    g1,
                    f1: ConvParams::identity(2, 3),
                    g2: ones,
                    f2: ConvParams::identity(2, 3),
                }],
            },
            mts2: layer(),
        };
        assert_eq!(mts_dr_block_forward(&x, &block, 1.0).unwrap(), x);
    }

    #[test]
    fn reduced_extent_at_benchmark_resolution() {
        assert_eq!(reduced_extents(256, 256, 0.4), (162, 162));
        let cfg = NetworkConfig::paper_preset(3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let block = MtsDrBlockParams::init(&cfg, 3, 16, &mut r).unwrap();
        let x = Tensor::uniform(&[64, 64, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let b = block.map_with("", &mut |_, t| tape.constant(t.clone()));
        let (h, w) = reduced_extents(64, 64, 0.4);
        let mid = crate::mts::mts_on_tape(&mut tape, xv, &b.mts1, (h, w)).unwrap();
        assert_eq!(tape.shape(mid), &[40, 40, 8]);
        let y = block_on_tape(&mut tape, xv, &b, 0.4).unwrap();
        assert_eq!(tape.shape(y), &[64, 64, 16]);
    }

    #[test]
    fn backbone_traces_channels() {
        let mut cfg = micro();
        cfg.blocks = 3;
        let net = Network::init(cfg.clone(), 1).unwrap();
        let p = net.params();
        assert_eq!(p.backbone[0].mts1.in_channels, 3);
        assert_eq!(p.backbone[1].mts1.in_channels, 4);
        assert_eq!(p.backbone[2].mts2.out_channels, 3);
        let x = Tensor::full(&[8, 8, 3], 0.5);
        assert_eq!(backbone_forward(&x, &p.backbone, 0.4).unwrap().shape(), &[8, 8, 3]);
    }

    #[test]
    fn zero_parameters_give_half_maps() {
        let net = Network::init(micro(), 3).unwrap();
        let zero = net.params().map_with("", &mut |_, t: &Tensor| Tensor::zeros(t.shape()));
        let x = Tensor::full(&[8, 8, 3], 0.7);
        let out = refinement_forward(&x, &zero.refinement).unwrap();
        for m in out.sides.iter().chain([&out.fused]) {
            assert_eq!(m, &Tensor::full(&[8, 8, 1], 0.5));
        }
    }

    #[test]
    fn net_preserves_odd_extents_and_is_deterministic() {
        let net = Network::init(micro(), 9).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[10, 7, 3], 1.0, &mut r).map(f64::abs);
        let (a, xt) = net.predict(&x).unwrap();
        let (b, _) = net.predict(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(xt.shape(), &[10, 7, 3]);
        for m in a.sides.iter().chain([&a.fused]) {
            assert_eq!(m.shape(), &[10, 7, 1]);
            assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let net = Network::init(micro(), 1).unwrap();
        let names = net.store().names();
        let mut sorted = names.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"backbone.0.mts1.w4.t0.mode0".to_string()));
        assert!(names.contains(&"refinement.side.2.cond.experts".to_string()));
    }
}
