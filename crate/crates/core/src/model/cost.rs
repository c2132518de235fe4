//! Analytic parameter and multiply-accumulate counts.
//!
//! Counts follow the operations the forward pass records: mode products and
//! convolutions (including the CondConv routing and kernel mixing products).
//! Elementwise ops, pooling and resampling are free. FLOPs are `2 × MACs`.

use serde::Serialize;

use super::{padded_extents, reduced_extents, NetworkConfig};
use crate::error::Result;
use crate::nn::EXPERTS;

/// One row of a cost breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

/// Learnable scalars of a `k×k` convolution.
pub fn conv_params(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> u64 {
    (cout * (cin / groups) * k * k + if bias { cout } else { 0 }) as u64
}

/// MACs of a stride-1 or transposed convolution evaluated at `pixels`
/// (output pixels, or input pixels when transposed).
pub fn conv_macs(pixels: usize, cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    (pixels * cout * (cin / groups) * k * k) as u64
}

/// MACs of `x ×_k A` with `A` of `m` rows.
pub fn mode_product_macs(shape: &[usize], m: usize) -> u64 {
    shape.iter().product::<usize>() as u64 * m as u64
}

/// Factor entries of one GTS scale over a `w×w×cin` patch mapped to
/// `w'×w'×cout`, times `terms`.
pub fn gts_scale_params(w: usize, w_out: usize, cin: usize, cout: usize, terms: usize) -> u64 {
    (terms * (w_out * w + w_out * w + cout * cin)) as u64
}

fn mts_layer(
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    windows: &[(usize, usize)],
    terms: usize,
) -> (u64, u64) {
    let mut params = cout as u64;
    let mut macs = 0;
    for &(win, wout) in windows {
        params += gts_scale_params(win, wout, cin, cout, terms);
        let patches = h.div_ceil(win) * w.div_ceil(win);
        let per_term = mode_product_macs(&[patches, win, win, cin], wout)
            + mode_product_macs(&[patches, wout, win, cin], wout)
            + mode_product_macs(&[patches, wout, wout, cin], cout);
        macs += terms as u64 * per_term;
    }
    (params, macs)
}

fn bottleneck(pixels: usize, cin: usize, cout: usize) -> (u64, u64) {
    let mid = (cout / 2).max(1);
    (
        conv_params(cin, mid, 1, 1, true) + conv_params(mid, mid, 3, 1, true) + conv_params(mid, cout, 1, 1, true),
        conv_macs(pixels, cin, mid, 1, 1) + conv_macs(pixels, mid, mid, 3, 1) + conv_macs(pixels, mid, cout, 1, 1),
    )
}

fn condconv(pixels: usize, cin: usize, cout: usize, k: usize) -> (u64, u64) {
    let kernel = cout * cin * k * k;
    (
        (EXPERTS * kernel + EXPERTS * cin + EXPERTS + cout) as u64,
        (EXPERTS * cin + EXPERTS * kernel) as u64 + conv_macs(pixels, cin, cout, k, 1),
    )
}

/// Per-module counts for an `h × w` input (padded as the network pads it).
pub fn cost_report(cfg: &NetworkConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    let (h, w) = padded_extents(h, w, cfg.pad_multiple());
    let mut entries = Vec::new();
    let mut push = |module: String, (params, macs): (u64, u64)| {
        entries.push(CostEntry {
            module,
            params,
            macs,
        })
    };

    let c1 = cfg.reduced_channels();
    let down = cfg.window_pairs();
    let up: Vec<(usize, usize)> = down.iter().map(|&(a, b)| (b, a)).collect();
    let (rh, rw) = reduced_extents(h, w, cfg.compress_ratio);
    for b in 0..cfg.blocks {
        let cin = if b == 0 { 3 } else { cfg.channels };
        let cout = if b + 1 == cfg.blocks { 3 } else { cfg.channels };
        push(format!("backbone.{b}.mts1"), mts_layer(h, w, cin, c1, &down, cfg.terms));
        let heads = cfg.heads;
        let branch = conv_params(c1, c1, 1, heads, true) + conv_params(c1, c1, 3, c1, true);
        let branch_macs = conv_macs(rh * rw, c1, c1, 1, heads) + conv_macs(rh * rw, c1, c1, 3, c1);
        push(
            format!("backbone.{b}.mhg"),
            (2 * heads as u64 * branch, 2 * heads as u64 * branch_macs),
        );
        push(format!("backbone.{b}.mts2"), mts_layer(rh, rw, c1, cout, &up, cfg.terms));
    }

    let [r1, r2, r3] = cfg.refinement_plan();
    let full = h * w;
    let half = (h / 2) * (w / 2);
    let quarter = (h / 4) * (w / 4);
    push(
        "refinement.stem".into(),
        (conv_params(3, r1, 3, 1, true), conv_macs(full, 3, r1, 3, 1)),
    );
    for (i, (px, cin, cout)) in [(full, r1 + 3, r1), (half, r1 + 3, r2), (quarter, r2 + 3, r3)]
        .into_iter()
        .enumerate()
    {
        push(format!("refinement.enc.{i}"), bottleneck(px, cin, cout));
    }
    for (i, (px, cin, cout)) in [(quarter, r3, r2), (half, r2, r1)].into_iter().enumerate() {
        push(
            format!("refinement.up.{i}"),
            (conv_params(cin, cout, 2, 1, true), conv_macs(px, cin, cout, 2, 1)),
        );
    }
    for (i, (px, c)) in [(half, r2), (full, r1)].into_iter().enumerate() {
        push(format!("refinement.dec.{i}"), bottleneck(px, 2 * c, c));
    }
    for (i, (px, c)) in [(full, r1), (half, r2), (quarter, r3)].into_iter().enumerate() {
        let (p, m) = condconv(px, c, r1, 3);
        push(
            format!("refinement.side.{i}"),
            (p + conv_params(r1, 1, 1, 1, true), m + conv_macs(px, r1, 1, 1, 1)),
        );
    }
    let mid = (r1 / 2).max(1);
    push(
        "refinement.fuse".into(),
        (
            conv_params(3, mid, 3, 1, true) + conv_params(mid, 1, 1, 1, true),
            conv_macs(full, 3, mid, 3, 1) + conv_macs(full, mid, 1, 1, 1),
        ),
    );
    Ok(CostReport {
        height: h,
        width: w,
        entries,
    })
}

/// Exact count of learnable scalars.
pub fn count_params(cfg: &NetworkConfig) -> Result<u64> {
    let m = cfg.pad_multiple();
    Ok(cost_report(cfg, m, m)?.params())
}

/// Floating-point operations (`2 × MACs`) of one forward pass at `h × w`.
pub fn count_flops(cfg: &NetworkConfig, h: usize, w: usize) -> Result<u64> {
    Ok(cost_report(cfg, h, w)?.flops())
}

/// Published totals per variant: parameters, GFLOPs on BSDS500 and on
/// BIPEDv2. Reference values only.
pub const PAPER_TABLE: [(&str, &str, f64, f64); 4] = [
    ("MTS-DR-1", "1.599M", 15.112, 33.999),
    ("MTS-DR-2", "1.717M", 19.735, 44.403),
    ("MTS-DR-3", "478.419K", 4.758, 10.706),
    ("MTS-DR-4", "610.579K", 12.027, 27.060),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        assert_eq!(conv_params(3, 8, 1, 1, true), 32);
        assert_eq!(gts_scale_params(8, 5, 3, 8, 3), 312);
        assert_eq!(conv_macs(16, 2, 3, 1, 1), 96);
        assert_eq!(mode_product_macs(&[8, 8, 3], 5), 960);
    }

    #[test]
    fn flops_scale_with_area() {
        let cfg = NetworkConfig::paper_preset(1).unwrap();
        let a = count_flops(&cfg, 64, 64).unwrap();
        let b = count_flops(&cfg, 128, 128).unwrap();
        // Ragged patch grids at the reduced extent make growth slightly superlinear.
        assert!(b > 4 * a && b < 5 * a);
    }
}
