//! Class-balanced loss, Adam, the learning-rate schedule and the training
//! loop.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, OptimizerMoments};
use crate::model::{Network, NetVars, SideOutputs};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{BceWeights, Tape, Var};
use crate::tensor::Tensor;

/// Per-image pixel weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight on negative pixels, `λ·P/(P+N)`.
    pub alpha: f64,
    /// Weight on positive pixels, `N/(P+N)`.
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl LossWeights {
    fn bce(&self) -> BceWeights {
        BceWeights {
            alpha: self.alpha,
            beta: self.beta,
            eta: self.eta,
        }
    }
}

/// Counts positives (`y ≥ η`) and negatives (`y == 0`); pixels in `(0, η)`
/// belong to neither.
pub fn compute_class_weights(y: &Tensor, lambda: f64, eta: f64) -> Result<LossWeights> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for &v in y.data() {
        if v == 0.0 {
            neg += 1;
        } else if v >= eta {
            pos += 1;
        }
    }
    let total = (pos + neg) as f64;
    if pos + neg == 0 {
        return Err(Error::DegenerateSample);
    }
    Ok(LossWeights {
        alpha: lambda * pos as f64 / total,
        beta: neg as f64 / total,
        lambda,
        eta,
    })
}

/// `-α Σ_{y=0} log(1-ŷ) - β Σ_{y≥η} log ŷ` with `ŷ` clamped to
/// `[1e-6, 1-1e-6]`.
pub fn weighted_bce(y: &Tensor, y_hat: &Tensor, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(y_hat.clone());
    let l = tape.weighted_bce(p, Arc::new(y.clone()), w.bce())?;
    Ok(tape.value(l).data()[0])
}

/// Sum of the three side losses and the fused loss, sharing one set of
/// weights computed from `y`.
pub fn total_loss(y: &Tensor, sides: &SideOutputs, lambda: f64, eta: f64) -> Result<f64> {
    let w = compute_class_weights(y, lambda, eta)?;
    sides
        .sides
        .iter()
        .chain([&sides.fused])
        .map(|m| weighted_bce(y, m, &w))
        .sum()
}

pub fn total_loss_on_tape(
    tape: &mut Tape,
    label: Arc<Tensor>,
    out: &NetVars,
    w: &LossWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &m in out.sides.iter().chain([&out.fused]) {
        let l = tape.weighted_bce(m, Arc::clone(&label), w.bce())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("four loss terms"))
}

/// Constant rate up to `decay_start` (1-based epochs), then multiplied by
/// `gamma` per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_start: u64,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.005,
            decay_start: 15,
            gamma: 0.9,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: u64) -> f64 {
        if epoch <= self.decay_start {
            self.base
        } else {
            self.base * self.gamma.powi((epoch - self.decay_start) as i32)
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_moments(store: &ParamStore, moments: OptimizerMoments) -> Result<Self> {
        let mut adam = Self::new(store);
        if moments.m.len() != store.len() || moments.v.len() != store.len() {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        adam.step = moments.step;
        adam.m = moments.m;
        adam.v = moments.v;
        Ok(adam)
    }

    pub fn moments(&self) -> OptimizerMoments {
        OptimizerMoments {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Applies one update. Any non-finite gradient aborts the step before
    /// anything is modified.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam gradients", &[store.len()], &[grads.len()]));
        }
        for ((name, value), g) in store.iter().zip(grads) {
            if g.shape() != value.shape() {
                return Err(Error::shape("adam gradient", value.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(net: &Network, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let cfg = net.config();
    let weights = compute_class_weights(&sample.label, cfg.lambda, cfg.eta)?;
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let fwd = net.forward(&mut tape, x, true)?;
    let loss = total_loss_on_tape(&mut tape, Arc::new(sample.label.clone()), &fwd.outputs, &weights)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = fwd
        .params
        .iter()
        .zip(net.store().values())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Stops after this many optimizer steps in total, if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

fn default_batch() -> usize {
    4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.schedule.base > 0.0 && self.schedule.gamma > 0.0) {
            return Err(Error::Config("learning rate and gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Where checkpoints and the metrics log go.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn checkpoint(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.mtse"))
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.mtse")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean sample loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// `(epoch, mean loss, lr)` per completed epoch.
    pub epochs: Vec<(u64, f64, f64)>,
    /// Samples skipped because they had no weighted pixels.
    pub skipped: usize,
}

/// Training state that survives across epochs and resumes.
pub struct Trainer {
    pub network: Network,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(network: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(network.store());
        Ok(Self {
            network,
            adam,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ck = checkpoint::load(path)?;
        let adam = match ck.moments {
            Some(m) => Adam::from_moments(ck.network.store(), m)?,
            None => Adam::new(ck.network.store()),
        };
        Ok(Self {
            network: ck.network,
            adam,
            config,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until the configured epoch count (or step cap) is reached.
    pub fn run(&mut self, data: &[Sample], out: Option<&OutputDir>) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(o) = out {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        }
        let mut report = TrainReport::default();
        while !self.done() {
            self.run_epoch(data, out, &mut report)?;
        }
        Ok(report)
    }

    fn run_epoch(&mut self, data: &[Sample], out: Option<&OutputDir>, report: &mut TrainReport) -> Result<()> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let lr = self.config.schedule.lr(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::substream(self.config.seed, rng::SHUFFLE, epoch));
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(&self.network, &data[i]))
                .collect();
            let mut sum: Option<Vec<Tensor>> = None;
            let (mut batch_loss, mut n) = (0.0, 0usize);
            for r in results {
                let (loss, grads) = match r {
                    Err(Error::DegenerateSample) => {
                        report.skipped += 1;
                        continue;
                    }
                    other => other?,
                };
                batch_loss += loss;
                n += 1;
                match &mut sum {
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    None => sum = Some(grads),
                }
            }
            let Some(mut grads) = sum else { continue };
            let inv = 1.0 / n as f64;
            grads.iter_mut().for_each(|g| *g = g.scale(inv));
            self.adam.update(self.network.store_mut(), &grads, lr)?;
            self.step += 1;
            report.step_losses.push(batch_loss * inv);
            loss_sum += batch_loss;
            counted += n;
        }
        if report.skipped > 0 {
            warn!("{} degenerate samples skipped so far", report.skipped);
        }
        self.epoch = epoch;
        let mean = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
        let secs = started.elapsed().as_secs_f64();
        info!("epoch {epoch}: mean loss {mean:.6}, lr {lr:.6}, {secs:.1}s");
        report.epochs.push((epoch, mean, lr));
        if let Some(o) = out {
            let moments = self.adam.moments();
            checkpoint::save(&o.checkpoint(epoch), &self.network, epoch, self.step, Some(&moments))?;
            checkpoint::save(&o.latest(), &self.network, epoch, self.step, Some(&moments))?;
            let path = o.metrics();
            let mut f = File::options()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{epoch}\t{mean:.6}\t{lr:.6}\t{secs:.3}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn worked_weights() {
        let w = compute_class_weights(&t(&[1.0, 0.0, 0.0, 0.0]), 1.1, 0.3).unwrap();
        assert!((w.alpha - 0.275).abs() < 1e-12);
        assert!((w.beta - 0.75).abs() < 1e-12);
        let all = compute_class_weights(&t(&[1.0, 0.5]), 1.1, 0.3).unwrap();
        assert_eq!((all.alpha, all.beta), (1.1, 0.0));
        let ignored = compute_class_weights(&t(&[0.1, 0.0]), 1.1, 0.3).unwrap();
        assert_eq!((ignored.alpha, ignored.beta), (0.0, 1.0));
        assert!(matches!(
            compute_class_weights(&t(&[0.1, 0.2]), 1.1, 0.3),
            Err(Error::DegenerateSample)
        ));
    }

    #[test]
    fn worked_bce() {
        let w = LossWeights {
            alpha: 0.275,
            beta: 0.75,
            lambda: 1.1,
            eta: 0.3,
        };
        let l = weighted_bce(&t(&[1.0, 0.0]), &t(&[0.5, 0.5]), &w).unwrap();
        assert!((l - 0.710476).abs() < 1e-6);
        assert_eq!(weighted_bce(&t(&[0.1, 0.2]), &t(&[0.3, 0.9]), &w).unwrap(), 0.0);
    }

    #[test]
    fn schedule_decays_after_fifteen() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(1), 0.005);
        assert_eq!(s.lr(15), 0.005);
        assert!((s.lr(17) - 0.00405).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.push("w".into(), Tensor::scalar(1.0));
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Tensor::scalar(1.0)], 0.005).unwrap();
        assert!((store.values()[0].data()[0] - (1.0 - 0.005)).abs() < 1e-10);
        adam.update(&mut store, &[Tensor::scalar(0.0)], 0.005).unwrap();
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_and_nan_is_named() {
        let mut store = ParamStore::new();
        store.push("a".into(), Tensor::scalar(2.0));
        store.push("b".into(), Tensor::scalar(3.0));
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Tensor::scalar(0.0), Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(store.values()[0].data(), &[2.0]);
        assert_eq!(adam.step, 1);
        let err = adam
            .update(&mut store, &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(adam.step, 1);
    }
}
