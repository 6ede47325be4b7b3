//! Adam training over whole-subject batches.

use anyhow::{bail, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtnag::model::{LossCounts, Model, Sample, Supervision};
use rtnag::objectives::LossConfig;
use rtnag::tape::Tape;
use rtnag::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor<f64>]) -> Self {
        let zeros = |p: &Tensor<f64>| Tensor::zeros(p.shape());
        Self {
            lr,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f64>], grads: &[Tensor<f64>]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub supervision: Supervision,
}

/// Mean batch loss per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

/// Loss and gradient of one batch. Each subject gets its own tape; the
/// per-subject objectives are already normalized by batch-wide counts, so
/// summing them gives the batch loss.
pub fn batch_gradient(
    model: &Model<f64>,
    batch: &[&Sample<f64>],
    loss: &LossConfig,
    sup: Supervision,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut norm = LossCounts::default();
    for s in batch {
        norm += model.loss_counts(s, sup);
    }
    let mut total = 0.0;
    let mut grads: Vec<Tensor<f64>> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for s in batch {
        let mut tape = Tape::new();
        let pv = model.store.on_tape(&mut tape);
        let obj = model.objective(&mut tape, &pv, s, loss, sup, norm)?;
        total += tape.scalar_value(obj);
        let g = tape.backward(obj)?;
        for (acc, &v) in grads.iter_mut().zip(pv.vars()) {
            if let Some(gv) = g.get(v) {
                acc.add_assign(gv);
            }
        }
    }
    Ok((total, grads))
}

/// Trains `model` in place. Fails on a non-finite loss or gradient,
/// naming the epoch.
pub fn train(model: &mut Model<f64>, samples: &[Sample<f64>], loss: &LossConfig, opts: &TrainOptions) -> Result<LossCurve> {
    if samples.is_empty() {
        bail!("training split is empty");
    }
    loss.validate()?;
    let mut adam = Adam::new(opts.lr, model.store.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<&Sample<f64>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (value, grads) = batch_gradient(model, &batch, loss, opts.supervision)?;
            if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                bail!("training diverged at epoch {epoch}: loss {value}");
            }
            adam.step(model.store.tensors_mut(), &grads);
            sum += value;
            batches += 1;
        }
        if !model.store.all_finite() {
            bail!("training diverged at epoch {epoch}: non-finite parameters");
        }
        let mean = sum / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        curve.epochs.push(mean);
    }
    Ok(curve)
}
