//! Adam with a halving per-epoch learning rate, early stopping on validation
//! MSE, and the evaluation metrics (MSE, MAE, and MSD/CV across repeats).

use crate::data::Windows;
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardCtx, Model};
use crate::nn::mix_seed;
use crate::tensor::{SeqTensor, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed of the ProbSparse key sample used whenever a model is evaluated.
pub const EVAL_SEED: u64 = 0x5EED;
/// Max global gradient norm when clipping is switched on.
pub const DEFAULT_CLIP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_decay: 0.5,
            epochs: 6,
            batch: 32,
            patience: 2,
            repeats: 10,
            seed: 0,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.repeats == 0 {
            return Err(Error::Config("epochs, batch and repeats must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr0 must be >= 0 and lr_decay > 0".into()));
        }
        Ok(())
    }
}

/// `lr0 · lr_decay^epoch` (epochs count from 0).
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi(epoch as i32)
}

/// Bias-corrected Adam: `θ ← θ − lr · m̂ / (√v̂ + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[SeqTensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [SeqTensor], grads: &[SeqTensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Train("parameter/gradient count mismatch".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient in parameter {i} at element {pos}"
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [SeqTensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Number of (time × series) cells averaged.
    pub count: usize,
}

/// Flat MSE and MAE over all cells.
pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Config(format!(
            "metrics need equal non-empty inputs, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let (se, ae) = pred
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(s, a), (p, t)| (s + (t - p) * (t - p), a + (t - p).abs()));
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
        count: pred.len(),
    })
}

/// `sqrt(Σ(y − ŷ)² / n)`.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(metrics(pred, target)?.mse.sqrt())
}

/// Accumulates per-window error sums and totals them in sorted order, so the
/// result does not depend on the order windows were visited in.
#[derive(Debug, Default)]
struct ErrorSums {
    se: Vec<f64>,
    ae: Vec<f64>,
    cells: usize,
}

impl ErrorSums {
    fn push(&mut self, pred: &[f64], target: &[f64]) {
        let (mut se, mut ae) = (0.0, 0.0);
        for (p, t) in pred.iter().zip(target) {
            se += (t - p) * (t - p);
            ae += (t - p).abs();
        }
        self.se.push(se);
        self.ae.push(ae);
        self.cells += pred.len();
    }

    fn finish(mut self) -> Result<Metrics> {
        if self.cells == 0 {
            return Err(Error::Config("no windows to evaluate".into()));
        }
        self.se.sort_by(f64::total_cmp);
        self.ae.sort_by(f64::total_cmp);
        let n = self.cells as f64;
        Ok(Metrics {
            mse: self.se.iter().sum::<f64>() / n,
            mae: self.ae.iter().sum::<f64>() / n,
            count: self.cells,
        })
    }
}

/// Metrics of `model` over the windows listed in `indices`.
pub fn evaluate_indices(
    model: &Model,
    windows: &Windows,
    indices: &[usize],
    batch_size: usize,
) -> Result<Metrics> {
    let mut sums = ErrorSums::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = windows.batch(chunk)?;
        let pred = model.predict(&batch, EVAL_SEED)?;
        let per = batch.target.numel() / chunk.len();
        for (p, t) in pred.data().chunks(per).zip(batch.target.data().chunks(per)) {
            sums.push(p, t);
        }
    }
    sums.finish()
}

pub fn evaluate(model: &Model, windows: &Windows, batch_size: usize) -> Result<Metrics> {
    let all: Vec<usize> = (0..windows.len()).collect();
    evaluate_indices(model, windows, &all, batch_size)
}

/// Repeats each window's last observed row for every predicted step.
pub fn naive_baseline(windows: &Windows) -> Result<Metrics> {
    let mut sums = ErrorSums::default();
    for w in windows.iter() {
        let last = w.input.last().expect("input_len >= 1");
        let pred: Vec<f64> = w.target.iter().flat_map(|_| last.iter().copied()).collect();
        let target: Vec<f64> = w.target.concat();
        sums.push(&pred, &target);
    }
    sums.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were restored at the end.
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Runs `patience`-based early stopping over the validation history;
/// returns true when the last `patience` epochs failed to improve on the
/// best value seen before them.
pub fn should_stop(val_history: &[f64], patience: usize) -> bool {
    if patience == 0 || val_history.len() <= patience {
        return false;
    }
    let split = val_history.len() - patience;
    let best_before = val_history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    val_history[split..].iter().all(|&v| v >= best_before)
}

/// MSE loss, Adam, `lr_at` per epoch, shuffled mini-batches and early
/// stopping; the best-validation weights are left in `model`.
///
/// A non-finite loss aborts with [`Error::Diverged`], which carries the
/// history recorded so far.
pub fn train(
    model: &mut Model,
    train_windows: &Windows,
    val_windows: &Windows,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Config("training needs non-empty train and val windows".into()));
    }
    let mut adam = Adam::new(model.store.values());
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, Vec<SeqTensor>)> = None;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut steps = 0usize;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let batch = train_windows.batch(chunk)?;
            let seed = mix_seed(config.seed ^ 0xA5A5, steps as u64);
            let loss = match train_step(model, &mut adam, &batch, lr, config.clip, seed) {
                Ok(l) => l,
                Err(e) => {
                    return Err(Error::Diverged {
                        reason: format!("epoch {epoch}, step {steps}: {e}"),
                        history,
                    })
                }
            };
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        let val = evaluate(model, val_windows, config.batch)?.mse;
        history.push(EpochRecord {
            epoch,
            lr,
            train_mse: loss_sum / seen as f64,
            val_mse: val,
        });
        log::info!("epoch {epoch}: lr {lr:.3e} train {:.6} val {val:.6}", loss_sum / seen as f64);
        if best.as_ref().is_none_or(|(_, b, _)| val < *b) {
            best = Some((epoch, val, model.store.values().to_vec()));
        }
        let vals: Vec<f64> = history.iter().map(|h| h.val_mse).collect();
        if should_stop(&vals, config.patience) {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    let (best_epoch, best_val, weights) = best.expect("at least one epoch ran");
    model.store.values_mut().clone_from_slice(&weights);
    Ok(TrainOutcome {
        history,
        best_epoch: Some(best_epoch),
        best_val_mse: best_val,
        stopped_early,
        steps,
    })
}

/// One optimisation step on `batch`; returns the batch loss before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    lr: f64,
    clip: Option<f64>,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, true);
    let pred = model.forward(&mut tape, &bound, batch, &mut ForwardCtx::new(seed))?;
    let target = tape.constant(batch.target.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Train(format!("non-finite loss {value}")));
    }
    tape.backward(loss)?;
    let mut grads: Vec<SeqTensor> = bound
        .vars()
        .iter()
        .zip(model.store.values())
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| SeqTensor::zeros(p.shape())))
        .collect();
    if let Some(max_norm) = clip {
        clip_global_norm(&mut grads, max_norm);
    }
    adam.step(model.store.values_mut(), &grads, lr)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    pub mean: f64,
    /// Population standard deviation of the per-run MSEs.
    pub msd: f64,
    /// `100 · msd / mean`; absent when the mean is zero.
    pub cv_percent: Option<f64>,
    pub runs: usize,
}

pub fn repeat_stats(mse_runs: &[f64]) -> Result<RepeatStats> {
    if mse_runs.is_empty() {
        return Err(Error::Config("repeat statistics need at least one run".into()));
    }
    let n = mse_runs.len() as f64;
    // identical runs: report the value itself, not a rounded re-average
    let mean = if mse_runs.iter().all(|&x| x == mse_runs[0]) {
        mse_runs[0]
    } else {
        mse_runs.iter().sum::<f64>() / n
    };
    let msd = (mse_runs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    Ok(RepeatStats {
        mean,
        msd,
        cv_percent: (mean != 0.0).then(|| 100.0 * msd / mean),
        runs: mse_runs.len(),
    })
}
