//! Optimiser, learning-rate schedules, early stopping and training logs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment accumulators for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: params.tensors().iter().map(Tensor::zeros_like).collect(),
            v: params.tensors().iter().map(Tensor::zeros_like).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter in `params` with the matching entry of `grads`.
    ///
    /// A non-finite gradient aborts without touching the parameters.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!(
                    "gradient {i} ({}) has shape {:?}, parameter has {:?}",
                    params.names()[i],
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {} at step {}",
                    params.names()[i],
                    self.step + 1
                )));
            }
        }
        let c = self.config;
        if c.lr <= 0.0 {
            return Err(Error::config(format!("learning rate {} must be positive", c.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gd[k];
                vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gd[k] * gd[k];
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[k]);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant step decay: `initial / factor^floor(epoch / interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Schedule {
    /// 5e-4, divided by 10 every 80 epochs.
    pub fn eqrnn() -> Self {
        Schedule { initial: 5e-4, factor: 10.0, interval: 80 }
    }

    /// 1e-3, halved every 50 epochs.
    pub fn snn() -> Self {
        Schedule { initial: 1e-3, factor: 2.0, interval: 50 }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let k = (epoch / self.interval.max(1)) as i32;
        self.initial / self.factor.powi(k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping on validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { patience, best: None, since_improvement: 0 }
    }

    /// Records one validation loss. Stops once more than `patience`
    /// consecutive evaluations failed to improve on the best.
    pub fn check(&mut self, val_loss: f64) -> StopDecision {
        match self.best {
            Some(best) if val_loss >= best => {
                self.since_improvement += 1;
            }
            _ => {
                self.best = Some(val_loss);
                self.since_improvement = 0;
            }
        }
        if self.since_improvement > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn improved_last(&self) -> bool {
        self.since_improvement == 0
    }
}

/// Zeroes a fraction `rate` of incoming spikes; identity at inference.
///
/// Unlike standard dropout the survivors are not rescaled: a spike is either
/// delivered or lost.
pub fn snn_dropout<R: Rng + ?Sized>(spikes: &Tensor, rate: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("spike dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(spikes.clone());
    }
    let mask = dropout_mask(spikes.len(), rate, rng)?;
    let mut out = spikes.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        if m == 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Same as [`snn_dropout`] but returns the keep mask for use on a tape.
pub fn snn_dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    Ok(dropout_mask(len, rate, rng)?.into_iter().map(|m| if m == 0.0 { 0.0 } else { 1.0 }).collect())
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// CSV log with header `epoch,train_loss,val_loss,lr,seconds`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn last_val_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:.3}", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Epoch budget and optimiser settings for [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam: AdamWConfig,
    pub patience: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn eqrnn(epochs: usize, seed: u64) -> Self {
        FitConfig {
            epochs,
            batch_size: 64,
            schedule: Schedule::eqrnn(),
            adam: AdamWConfig::default(),
            patience: 12,
            seed,
        }
    }

    pub fn snn(epochs: usize, seed: u64) -> Self {
        FitConfig {
            epochs,
            batch_size: 32,
            schedule: Schedule::snn(),
            adam: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            patience: 12,
            seed,
        }
    }
}

/// A trainable loss over an indexed training set.
pub trait Objective {
    /// Number of training examples the batches index into.
    fn train_len(&self) -> usize;

    /// Called before each epoch with the current parameters.
    fn epoch_start(&mut self, _params: &ParamSet, _epoch: usize) -> Result<()> {
        Ok(())
    }

    /// Scalar loss for the examples in `batch`, built on `tape` from `params`
    /// (one var per entry of the parameter set, in order).
    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>>;

    /// Validation loss for the given parameters.
    fn val_loss(&mut self, params: &ParamSet) -> Result<f64>;
}

/// Mini-batch AdamW with per-epoch schedule, validation and early stopping.
///
/// The best-validation parameters are restored on return.
pub fn fit<O: Objective + ?Sized>(params: &mut ParamSet, objective: &mut O, cfg: &FitConfig) -> Result<TrainLog> {
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::data("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(params, cfg.adam);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.schedule.rate(epoch);
        opt.set_lr(lr);
        objective.epoch_start(params, epoch)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let loss = objective.batch_loss(&tape, &vars, chunk, &mut rng)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            let grads = loss.backward()?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
            opt.step(params, &g)?;
            total += value;
            batches += 1;
        }
        let val = objective.val_loss(params)?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let decision = stop.check(val);
        if stop.improved_last() {
            best = params.clone();
        }
        log.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss: val,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if decision == StopDecision::Stop {
            break;
        }
    }
    *params = best;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = single(1.5);
        let mut opt = AdamW::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.get(0).item(), 1.5);
    }

    #[test]
    fn first_step_is_signed_lr() {
        for g in [3.0, -0.02] {
            let mut p = single(1.0);
            let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() };
            let mut opt = AdamW::new(&p, cfg);
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = p.get(0).item() - 1.0;
            assert!((delta + 1e-2 * f64::signum(g)).abs() < 1e-8, "delta {delta}");
        }
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut p = single(2.0);
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((p.get(0).item() - 2.0 * (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.get(0).item(), 2.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(Schedule::eqrnn().rate(0), 5e-4);
        assert!((Schedule::eqrnn().rate(79) - 5e-4).abs() < 1e-18);
        assert!((Schedule::eqrnn().rate(80) - 5e-5).abs() < 1e-18);
        assert!((Schedule::snn().rate(50) - 5e-4).abs() < 1e-18);
        assert!((Schedule::snn().rate(49) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn early_stop_plateau() {
        let mut es = EarlyStop::new(12);
        assert_eq!(es.check(1.0), StopDecision::Continue);
        for k in 1..=12 {
            assert_eq!(es.check(1.0), StopDecision::Continue, "plateau epoch {k}");
        }
        assert_eq!(es.check(1.0), StopDecision::Stop);
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let mut es = EarlyStop::new(12);
        es.check(1.0);
        for _ in 0..11 {
            es.check(1.0);
        }
        assert_eq!(es.check(0.9), StopDecision::Continue);
        assert_eq!(es.since_improvement, 0);
        for _ in 0..12 {
            assert_eq!(es.check(0.95), StopDecision::Continue);
        }
    }

    #[test]
    fn monotone_loss_never_stops() {
        let mut es = EarlyStop::new(2);
        for k in 0..500 {
            assert_eq!(es.check(1.0 / (k as f64 + 1.0)), StopDecision::Continue);
        }
    }

    #[test]
    fn snn_dropout_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::filled(1, 100_000, 1.0);
        assert_eq!(snn_dropout(&s, 0.0, &mut rng, true).unwrap(), s);
        assert_eq!(snn_dropout(&s, 0.1, &mut rng, false).unwrap(), s);
        let d = snn_dropout(&s, 0.1, &mut rng, true).unwrap();
        let zeroed = d.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeroed - 0.1).abs() < 0.01);
        assert!(d.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn log_format() {
        let mut log = TrainLog::default();
        log.push(EpochRecord { epoch: 0, train_loss: 0.5, val_loss: 0.25, lr: 5e-4, seconds: 1.25 });
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,lr,seconds\n0,"));
        assert_eq!(csv.lines().count(), 2);
    }
}
