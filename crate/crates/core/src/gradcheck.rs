//! Central finite-difference checks of tape gradients.
//!
//! A check builds a scalar from input leaves on a fresh tape, takes the
//! analytic gradient with [`Tape::backward`], and compares it with central
//! differences of the same builder evaluated on constants. Outputs that are
//! not already scalar are reduced with a fixed random weighting so every
//! output element contributes a distinct coefficient.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kernels::{index, ConvGeom};
use crate::model::{self, NetworkConfig, Network};
use crate::mts::{self, GtsParams, MtsLayerParams};
use crate::nn::{self, CondConvParams, ConvParams, MhgParams};
use crate::params::ParamTree;
use crate::tape::{BceWeights, Tape, Var};
use crate::tensor::Tensor;
use crate::training;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const RTOL: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Worst coordinate of `|a - n| / max(|a|, |n|, 1e-3·max|n|)`.
///
/// The floor keeps coordinates whose true gradient is negligible next to
/// the largest one from dominating through cancellation noise.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    relative_error_of(analytic.data(), numeric.data())
}

fn relative_error_of(analytic: &[f64], numeric: &[f64]) -> f64 {
    let peak = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * peak).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub op: String,
    pub shape: String,
    pub worst: f64,
    pub passed: bool,
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Reduces `y` to `Σ c_i y_i` with fixed pseudo-random `c`.
pub fn probe_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    if tape.value(y).len() == 1 {
        return Ok(y);
    }
    let mut r = ChaCha8Rng::seed_from_u64(0x5eed);
    let c = Tensor::from_fn(tape.shape(y), |_| r.gen_range(0.5..1.5));
    let c = tape.constant(c);
    let m = tape.mul(y, c)?;
    tape.sum(m)
}

fn scalar(inputs: &[Tensor], build: &Builder<'_>, trainable: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let y = build(&mut tape, &vars)?;
    let s = probe_sum(&mut tape, y)?;
    Ok((tape, vars, s))
}

/// Analytic gradients of every input.
pub fn analytic_grads(inputs: &[Tensor], build: &Builder<'_>) -> Result<Vec<Tensor>> {
    let (tape, vars, s) = scalar(inputs, build, true)?;
    let mut g = tape.backward(s)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Flat coordinates probed per input.
pub type Picks = Vec<Vec<usize>>;

fn all_coords(inputs: &[Tensor]) -> Picks {
    inputs.iter().map(|t| (0..t.len()).collect()).collect()
}

/// Up to `per_input` distinct coordinates of each input, fixed by `seed`.
pub fn sample_coords(inputs: &[Tensor], per_input: usize, seed: u64) -> Picks {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    inputs
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut r);
            idx.truncate(per_input);
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Central differences at the picked coordinates of every input.
pub fn numeric_at(inputs: &[Tensor], build: &Builder<'_>, h: f64, picks: &Picks) -> Result<Vec<Vec<f64>>> {
    let mut xs = inputs.to_vec();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let (tape, _, s) = scalar(xs, build, false)?;
        Ok(tape.value(s).data()[0])
    };
    let mut out = Vec::with_capacity(inputs.len());
    for (k, coords) in picks.iter().enumerate() {
        let mut g = Vec::with_capacity(coords.len());
        for &i in coords {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Central-difference gradients of every input.
pub fn numeric_grads(inputs: &[Tensor], build: &Builder<'_>, h: f64) -> Result<Vec<Tensor>> {
    numeric_at(inputs, build, h, &all_coords(inputs))?
        .into_iter()
        .zip(inputs)
        .map(|(g, t)| Tensor::new(t.shape(), g))
        .collect()
}

fn shape_label(inputs: &[Tensor]) -> String {
    inputs
        .iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn compare(op: &str, inputs: &[Tensor], analytic: &[Tensor], numeric: &[Vec<f64>], picks: &Picks) -> CheckReport {
    let worst = analytic
        .iter()
        .zip(numeric)
        .zip(picks)
        .map(|((a, n), coords)| {
            let a: Vec<f64> = coords.iter().map(|&i| a.data()[i]).collect();
            relative_error_of(&a, n)
        })
        .fold(0.0, f64::max);
    CheckReport {
        op: op.to_string(),
        shape: shape_label(inputs),
        worst,
        passed: worst < RTOL,
    }
}

/// Compares analytic and numeric gradients of `build` at `inputs` on every
/// coordinate.
pub fn check(op: &str, inputs: &[Tensor], build: &Builder<'_>) -> Result<CheckReport> {
    check_at(op, inputs, build, &all_coords(inputs))
}

/// Compares analytic and numeric gradients on the picked coordinates.
pub fn check_at(op: &str, inputs: &[Tensor], build: &Builder<'_>, picks: &Picks) -> Result<CheckReport> {
    let a = analytic_grads(inputs, build)?;
    let n = numeric_at(inputs, build, STEP, picks)?;
    Ok(compare(op, inputs, &a, &n, picks))
}

/// Runs a check after perturbing one analytic gradient coordinate by 1%;
/// a working harness reports failure.
pub fn negative_control() -> Result<CheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![Tensor::uniform(&[3, 4], 1.0, &mut r), Tensor::uniform(&[2, 3], 1.0, &mut r)];
    let build = |t: &mut Tape, v: &[Var]| t.mode_product(v[0], v[1], 0);
    let mut a = analytic_grads(&inputs, &build)?;
    let picks = all_coords(&inputs);
    let n = numeric_at(&inputs, &build, STEP, &picks)?;
    a[1].data_mut()[0] *= 1.01;
    Ok(compare("corrupted mode_product", &inputs, &a, &n, &picks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Micro,
    Small,
}

type SharedBuilder = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor>,
    picks: Picks,
    build: Box<SharedBuilder>,
}

fn case(
    op: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case {
        op,
        picks: all_coords(&inputs),
        inputs,
        build: Box::new(build),
    }
}

/// Appends a parameter tree's leaves to `lead`, returning the inputs and
/// a function that rebinds the tree onto the matching tape variables.
fn with_tree<T>(lead: Vec<Tensor>, tree: &T) -> (Vec<Tensor>, impl Fn(&[Var]) -> T::With<Var> + Send + Sync + 'static)
where
    T: ParamTree<Leaf = Tensor> + Clone + Send + Sync + 'static,
{
    let offset = lead.len();
    let mut inputs = lead;
    inputs.extend(tree.leaves());
    let tree = tree.clone();
    let bind = move |vars: &[Var]| {
        let mut i = offset;
        tree.map_with("", &mut |_, _| {
            i += 1;
            vars[i - 1]
        })
    };
    (inputs, bind)
}

fn cases(scale: Scale) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let rng = &mut r;
    let mut out = Vec::new();
    let u = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, rng);
    let big = scale == Scale::Small;

    let mode_shapes: [(&[usize], usize, usize); 3] = [(&[3, 4], 1, 2), (&[2, 3, 4], 0, 5), (&[2, 3, 2, 3], 2, 3)];
    for (shape, k, m) in mode_shapes {
        let a = u(&[m, shape[k]], rng);
        out.push(case("mode_product", vec![u(shape, rng), a], move |t, v| t.mode_product(v[0], v[1], k)));
    }

    for (shape, terms, outs) in [
        (vec![3, 2], 1, vec![2, 3]),
        (vec![2, 3, 2], 2, vec![3, 2, 2]),
        (vec![4, 4, 2], 3, vec![2, 3, 3]),
    ] {
        let p = GtsParams::init(&shape, &outs, terms, rng);
        let (inputs, bind) = with_tree(vec![u(&shape, rng)], &p);
        out.push(case("gts", inputs, move |t, v| mts::gts_on_tape(t, v[0], &bind(v), 0)));
    }

    let hw = if big { 12 } else { 6 };
    for (h, w, cin, cout, windows) in [
        (hw, hw, 2, 2, vec![(3, 2)]),
        (hw, hw + 2, 2, 3, vec![(2, 2), (4, 3)]),
        (hw + 1, hw - 1, 3, 2, vec![(4, 2)]),
    ] {
        let mut p = MtsLayerParams::init(cin, cout, &windows, 2, rng);
        p.bias = u(&[cout], rng);
        let target = (mts::reduced_extent(h, 0.5), mts::reduced_extent(w, 0.5));
        let (inputs, bind) = with_tree(vec![u(&[h, w, cin], rng)], &p);
        out.push(case("mts", inputs, move |t, v| mts::mts_on_tape(t, v[0], &bind(v), target)));
    }

    let convs = [
        ("conv2d", 3, 4, 2, 3, ConvGeom::same3x3()),
        ("conv2d_strided", 5, 5, 2, 2, ConvGeom { stride: 2, padding: 1, groups: 1, transposed: false }),
        ("conv2d_grouped_1x1", 3, 4, 4, 1, ConvGeom::pointwise().with_groups(2)),
        ("conv2d_depthwise", 4, 3, 3, 3, ConvGeom::same3x3().with_groups(3)),
        ("conv2d_transposed", 3, 2, 2, 2, ConvGeom::upsample2()),
    ];
    for (op, h, w, c, k, geom) in convs {
        for extra in 0..3 {
            let cout = if geom.groups > 1 { c } else { 2 + extra };
            let mut p = ConvParams::init(c, cout, k, geom, true, rng);
            p.bias = Some(u(&[cout], rng));
            let (inputs, bind) = with_tree(vec![u(&[h + extra, w + extra, c], rng)], &p);
            out.push(case(op, inputs, move |t, v| nn::conv_on_tape(t, v[0], &bind(v))));
        }
    }

    for shape in [[2, 2, 1], [4, 5, 2], [5, 4, 3]] {
        out.push(case("maxpool2", vec![u(&shape, rng)], |t, v| t.maxpool2(v[0])));
    }

    for (shape, what) in [([3, 2, 2], 0), ([2, 4, 3], 1), ([3, 3, 1], 2)] {
        out.push(case("activations", vec![u(&shape, rng), u(&shape, rng)], move |t, v| {
            let a = match what {
                0 => t.relu(v[0])?,
                1 => t.sigmoid(v[0])?,
                _ => t.scale(v[0], -1.5)?,
            };
            let b = t.concat_channels(&[a, v[1]])?;
            let p = t.global_avg_pool(b)?;
            let g = t.gather(b, Arc::new(index::nearest(t.shape(b), 5, 3)?))?;
            let s = t.sum(g)?;
            let sp = t.sum(p)?;
            t.add(s, sp)
        }));
    }

    for (hw, c, heads) in [(3, 2, 1), (4, 4, 2), (5, 6, 3)] {
        let p = MhgParams::init(c, heads, rng).unwrap();
        let (inputs, bind) = with_tree(vec![u(&[hw, hw + 1, c], rng)], &p);
        out.push(case("mhg", inputs, move |t, v| nn::mhg_on_tape(t, v[0], &bind(v))));
    }

    for (hw, cin, cout) in [(3, 2, 2), (4, 3, 2), (5, 2, 4)] {
        let mut p = CondConvParams::init(cin, cout, 3, rng);
        p.routing = u(p.routing.shape(), rng);
        p.routing_bias = u(&[nn::EXPERTS], rng);
        p.bias = u(&[cout], rng);
        let (inputs, bind) = with_tree(vec![u(&[hw, hw, cin], rng)], &p);
        out.push(case("condconv", inputs, move |t, v| nn::condconv_on_tape(t, v[0], &bind(v))));
    }

    for shape in [[2, 2, 3], [3, 4, 3], [5, 3, 3]] {
        let x_bar = Tensor::uniform(&shape, 3.0, rng);
        out.push(case("residual_gate", vec![u(&shape, rng), x_bar], |t, v| {
            model::residual_gate_on_tape(t, v[0], v[1])
        }));
    }

    for (h, w) in [(2, 3), (4, 4), (3, 5)] {
        let label = Tensor::from_fn(&[h, w, 1], |i| match (i[0] + 2 * i[1]) % 4 {
            0 => 1.0,
            1 => 0.15,
            _ => 0.0,
        });
        let w_ = training::compute_class_weights(&label, 1.1, 0.3).unwrap();
        let pred = Tensor::from_fn(&[h, w, 1], |_| rng.gen_range(0.05..0.95));
        let label = Arc::new(label);
        let weights = BceWeights { alpha: w_.alpha, beta: w_.beta, eta: 0.3 };
        out.push(case("weighted_bce", vec![pred], move |t, v| {
            t.weighted_bce(v[0], Arc::clone(&label), weights)
        }));
    }

    let mut cfg = NetworkConfig {
        name: None,
        blocks: 1,
        channels: 4,
        compress_ratio: 0.4,
        window_scales: vec![4],
        terms: 1,
        heads: 1,
        refinement_channels: None,
        lambda: 1.1,
        eta: 0.3,
    };
    let nets = if big { vec![(8, 1, vec![4]), (8, 2, vec![4, 8]), (16, 1, vec![4, 8])] } else { vec![(4, 1, vec![4]), (8, 1, vec![4]), (4, 2, vec![4])] };
    for (hw, blocks, ws) in nets {
        cfg.blocks = blocks;
        cfg.window_scales = ws;
        // Composite networks hold many ReLU and max-pool kinks; redraw the
        // point until no probe of the central difference crosses one.
        for attempt in 0..MAX_REDRAWS {
            let net = Network::init(cfg.clone(), 3 + attempt).unwrap();
            let params = net.params().map_with("", &mut |name, t| {
                if name.ends_with("bias") {
                    Tensor::uniform(t.shape(), 0.3, rng)
                } else {
                    t.clone()
                }
            });
            let image = Tensor::uniform(&[hw, hw, 3], 1.0, rng).map(f64::abs);
            let label = Tensor::from_fn(&[hw, hw, 1], |i| if (i[0] + i[1]) % 5 == 0 { 1.0 } else { 0.0 });
            let weights = training::compute_class_weights(&label, cfg.lambda, cfg.eta).unwrap();
            let label = Arc::new(label);
            let c = cfg.clone();
            let (inputs, bind) = with_tree(vec![image], &params);
            let mut candidate = case("total_loss", inputs, move |t, v| {
                let outs = model::net_on_tape(t, v[0], &bind(v), &c)?;
                training::total_loss_on_tape(t, Arc::clone(&label), &outs, &weights)
            });
            candidate.picks = sample_coords(&candidate.inputs, NET_PROBES, attempt);
            let smooth = is_smooth(&candidate.inputs, &*candidate.build, &candidate.picks);
            if attempt + 1 == MAX_REDRAWS || smooth.unwrap_or(false) {
                out.push(candidate);
                break;
            }
        }
    }
    out
}

/// Redraws allowed when searching for a point away from kinks.
const MAX_REDRAWS: u64 = 20;
/// Coordinates probed per parameter tensor of a whole network.
const NET_PROBES: usize = 16;

/// Whether central differences at `STEP` and `STEP / 4` agree on the picked
/// coordinates, i.e. no probe straddles a non-differentiable point.
pub fn is_smooth(inputs: &[Tensor], build: &Builder<'_>, picks: &Picks) -> Result<bool> {
    let coarse = numeric_at(inputs, build, STEP, picks)?;
    let fine = numeric_at(inputs, build, STEP / 4.0, picks)?;
    Ok(coarse.iter().zip(&fine).all(|(c, f)| relative_error_of(c, f) < 0.1 * RTOL))
}

/// Runs every op's checks at the given scale.
pub fn suite(scale: Scale) -> Result<Vec<CheckReport>> {
    let started = Instant::now();
    let mut reports = Vec::new();
    for c in cases(scale) {
        reports.push(check_at(c.op, &c.inputs, &*c.build, &c.picks)?);
    }
    log::info!("gradient suite finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(reports)
}

/// Worst error and pass flag per op, in first-seen order.
pub fn summarize(reports: &[CheckReport]) -> Vec<(String, usize, f64, bool)> {
    let mut out: Vec<(String, usize, f64, bool)> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|e| e.0 == r.op) {
            Some(e) => {
                e.1 += 1;
                e.2 = e.2.max(r.worst);
                e.3 &= r.passed;
            }
            None => out.push((r.op.clone(), 1, r.worst, r.passed)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
        let z = finite_diff_grad(|_| 3.0, &x, 1e-5);
        assert_eq!(z, Tensor::zeros(&[2]));
        let c = finite_diff_grad(|t| 3.0 * t.data()[0] - 0.5 * t.data()[1], &x, 1e-3);
        assert!((c.data()[0] - 3.0).abs() < 1e-9 && (c.data()[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        assert!(!negative_control().unwrap().passed);
    }
}
