//! The EQRNN stage: a masked-channel forecaster followed by per-sensor
//! quantile heads and their refinement.
//!
//! For every row one channel is zeroed at the input and the network is
//! scored only on the output slots that regress that channel, so each
//! sensor's forecast is imputed from the others.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Layout};
use super::config::{FeatureMode, Stage};
use super::{round_params, subsample, to_f32, Prepared, RunOptions, Standardizer};
use crate::autodiff::{Tape, Tensor, Var};
use crate::eqrnn::loss::{empirical_quantile, pinball, select_delta};
use crate::eqrnn::net::{output_channel, OUTPUT_WIDTH};
use crate::eqrnn::{
    interpolate_level, refine_stage2, stage1_estimates, train_stage1, EqrnnNet, QuantileLevelSet, QuantileLoss,
    QuantileModel, QuantileTrainConfig, RefinedModel, Stage1Outputs, SupervisedSplit, TrainedModel, STAGE1_DIMS,
    STAGE2_HIDDEN,
};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::snn::clipped_rate;
use crate::training::{fit, FitConfig, Objective, TrainLog};

const CHUNK: usize = 2048;
const DELTA_ROWS: usize = 1024;
const VAL_ROWS: usize = 2000;
const BAND_FLOOR: f64 = 1e-3;

/// Channels the decoder head regresses; any beyond the head width fall
/// back to a persistence forecast.
pub fn forecast_channels(p: &Prepared) -> usize {
    p.channels().min(OUTPUT_WIDTH)
}

/// Input row `t` with channel `masked` zeroed.
pub fn masked_row(p: &Prepared, t: usize, masked: usize) -> Vec<f64> {
    let mut row = p.z_row(t).to_vec();
    row[masked] = 0.0;
    row
}

/// Target slots for input row `t` and the mask selecting channel `masked`.
fn target_row(p: &Prepared, t: usize, masked: usize) -> (Vec<f64>, Vec<f64>) {
    let c = p.channels();
    let ahead = p.z_row(t + p.cfg.horizon);
    let target = (0..OUTPUT_WIDTH).map(|s| ahead[output_channel(s, c)]).collect();
    let mask = (0..OUTPUT_WIDTH).map(|s| if output_channel(s, c) == masked { 1.0 } else { 0.0 }).collect();
    (target, mask)
}

/// Input times whose row and forecast target are both normal: training rows
/// end before the first validation window, validation rows before the first
/// test window.
pub fn forecast_rows(p: &Prepared) -> (Vec<usize>, Vec<usize>) {
    let h = p.cfg.horizon;
    let normal = |t: usize| !p.dataset.labels[t] && !p.dataset.labels[t + h];
    let train: Vec<usize> = (0..p.val_start().saturating_sub(h)).filter(|&t| normal(t)).collect();
    let val: Vec<usize> = (p.val_start()..p.test_start().saturating_sub(h)).filter(|&t| normal(t)).collect();
    (train, val)
}

/// Mean masked-slot loss of `net` over `rows` (input time, masked channel).
#[allow(clippy::too_many_arguments)]
pub fn masked_loss<'t>(
    net: &EqrnnNet,
    vars: &[Var<'t>],
    tape: &'t Tape,
    p: &Prepared,
    rows: &[(usize, usize)],
    loss: QuantileLoss,
    delta: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t>> {
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len() * OUTPUT_WIDTH);
    for &(t, m) in rows {
        x.push(masked_row(p, t, m));
        let (target, mk) = target_row(p, t, m);
        y.push(target);
        mask.extend(mk);
    }
    let selected: f64 = mask.iter().sum();
    let x = tape.constant(Tensor::from_rows(&x));
    let y = tape.constant(Tensor::from_rows(&y));
    let code = net.encode(vars, x, training, rng)?;
    let pred = net.decode(vars, code, training, rng)?;
    let l = match loss {
        QuantileLoss::Pinball => pred.pinball(y, 0.5),
        QuantileLoss::Huber => pred.huber(y, 0.5, delta, false),
        QuantileLoss::AsymmetricHuber => pred.huber(y, 0.5, delta, true),
    };
    Ok(l.mask(mask).sum().scale(1.0 / selected.max(1.0)))
}

/// Masked-slot residuals `y - pred` in inference mode.
fn masked_residuals(net: &EqrnnNet, p: &Prepared, rows: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * 6);
    for chunk in rows.chunks(CHUNK) {
        let x: Vec<Vec<f64>> = chunk.iter().map(|&(t, m)| masked_row(p, t, m)).collect();
        let pred = net.forward(&Tensor::from_rows(&x))?;
        for (k, &(t, m)) in chunk.iter().enumerate() {
            let (target, mask) = target_row(p, t, m);
            for s in 0..OUTPUT_WIDTH {
                if mask[s] == 1.0 {
                    out.push(target[s] - pred.get(k, s));
                }
            }
        }
    }
    Ok(out)
}

/// Rows paired with a channel that cycles through all channels.
pub fn cycled(rows: &[usize], channels: usize) -> Vec<(usize, usize)> {
    rows.iter().enumerate().map(|(k, &t)| (t, k % channels)).collect()
}

/// The forecaster's training objective.
pub struct MaskedForecast<'a> {
    pub net: &'a EqrnnNet,
    pub p: &'a Prepared,
    pub train: Vec<usize>,
    pub val: Vec<(usize, usize)>,
    pub loss: QuantileLoss,
    pub delta: f64,
}

impl<'a> MaskedForecast<'a> {
    pub fn new(net: &'a EqrnnNet, p: &'a Prepared) -> Self {
        let (train, val) = forecast_rows(p);
        let c = forecast_channels(p);
        MaskedForecast {
            net,
            p,
            train: subsample(&train, p.cfg.eqrnn.train_rows),
            val: cycled(&subsample(&val, VAL_ROWS), c),
            loss: p.cfg.eqrnn.loss,
            delta: 1.0,
        }
    }

    /// Refreshes the Huber scale from the current residuals.
    pub fn update_delta(&mut self, params: &ParamSet) -> Result<()> {
        if !self.loss.uses_delta() {
            return Ok(());
        }
        let net = EqrnnNet::from_params(self.net.config.clone(), params.clone())?;
        let rows = cycled(&subsample(&self.train, DELTA_ROWS), forecast_channels(self.p));
        let r = masked_residuals(&net, self.p, &rows)?;
        if r.len() >= 4 {
            self.delta = select_delta(&r)?;
        }
        Ok(())
    }

    /// A batch of training rows, each with a random masked channel.
    pub fn draw(&self, batch: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let c = forecast_channels(self.p);
        batch.iter().map(|&i| (self.train[i], rng.random_range(0..c))).collect()
    }

    /// Mean masked-slot pinball at the median on the validation rows.
    pub fn val_pinball(&self, params: &ParamSet) -> Result<f64> {
        let net = EqrnnNet::from_params(self.net.config.clone(), params.clone())?;
        let r = masked_residuals(&net, self.p, &self.val)?;
        if r.is_empty() {
            return Ok(0.0);
        }
        Ok(r.iter().map(|&e| pinball(e, 0.0, 0.5)).sum::<f64>() / r.len() as f64)
    }
}

impl Objective for MaskedForecast<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn epoch_start(&mut self, params: &ParamSet, _epoch: usize) -> Result<()> {
        self.update_delta(params)
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let rows = self.draw(batch, rng);
        masked_loss(self.net, params, tape, self.p, &rows, self.loss, self.delta, true, rng)
    }

    fn val_loss(&mut self, params: &ParamSet) -> Result<f64> {
        self.val_pinball(params)
    }
}

/// Forecasts `F[i][t]` of each channel at every step `t >= horizon`, made
/// from step `t - horizon` with channel `i` masked. Earlier steps are NaN.
/// Channels outside the head repeat their value at `t - horizon`.
pub fn forecast_all(net: &EqrnnNet, p: &Prepared) -> Result<Vec<Vec<f64>>> {
    let c = p.channels();
    let h = p.cfg.horizon;
    let n = p.length() - h;
    let jobs: Vec<(usize, usize)> =
        (0..forecast_channels(p)).flat_map(|i| (0..n).step_by(CHUNK).map(move |s| (i, s))).collect();
    let slots: Vec<Vec<usize>> =
        (0..c).map(|i| (0..OUTPUT_WIDTH).filter(|&s| output_channel(s, c) == i).collect()).collect();
    let parts: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(i, start)| {
            let end = (start + CHUNK).min(n);
            let x: Vec<Vec<f64>> = (start..end).map(|t| masked_row(p, t, i)).collect();
            let out = net.forward(&Tensor::from_rows(&x))?;
            Ok((0..end - start)
                .map(|k| slots[i].iter().map(|&s| out.get(k, s)).sum::<f64>() / slots[i].len() as f64)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut f = vec![vec![f64::NAN; h]; c];
    for ((i, _), part) in jobs.iter().zip(parts) {
        f[*i].extend(part);
    }
    for (i, fi) in f.iter_mut().enumerate().skip(forecast_channels(p)) {
        fi.extend((0..n).map(|t| p.z[t * c + i]));
    }
    Ok(f)
}

/// Steps usable as head targets: normal at both the target and the
/// forecast origin.
fn head_steps(p: &Prepared) -> (Vec<usize>, Vec<usize>) {
    let (train, val) = forecast_rows(p);
    let h = p.cfg.horizon;
    let cap = p.cfg.eqrnn.head_samples;
    let shift = |v: Vec<usize>| v.into_iter().map(|t| t + h).collect::<Vec<_>>();
    (subsample(&shift(train), cap), subsample(&shift(val), cap))
}

fn head_name(stage: usize, sensor: usize, level: usize) -> String {
    format!("stage{stage}.s{sensor}.l{level}.")
}

/// Everything the quantile path needs at inference.
#[derive(Clone, Debug)]
pub struct QuantilePath {
    pub net: EqrnnNet,
    pub standardizer: Standardizer,
    pub levels: QuantileLevelSet,
    pub refined: QuantileLevelSet,
    /// `stage1[sensor][level]`
    pub stage1: Vec<Vec<QuantileModel>>,
    /// `stage2[sensor][refined level]`
    pub stage2: Vec<Vec<QuantileModel>>,
    /// per-sensor width of the central quantile band
    pub band: Vec<f64>,
}

/// Per-step quantile series of one run.
#[derive(Clone, Debug)]
pub struct QuantileSeries {
    pub forecast: Vec<Vec<f64>>,
    /// `refined[sensor][level][t]`, NaN before the first forecast
    pub refined: Vec<Vec<Vec<f64>>>,
}

impl QuantileSeries {
    /// Fraction of (sensor, time) points whose refined quantiles are not
    /// non-decreasing in the level. Points before the first forecast are
    /// skipped.
    pub fn crossing_rate(&self) -> f64 {
        let (mut crossed, mut total) = (0usize, 0usize);
        for levels in &self.refined {
            let n = levels.first().map_or(0, Vec::len);
            for t in 0..n {
                if levels[0][t].is_nan() {
                    continue;
                }
                total += 1;
                if levels.windows(2).any(|w| w[1][t] < w[0][t]) {
                    crossed += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            crossed as f64 / total as f64
        }
    }
}

impl QuantilePath {
    pub fn load(p: &Prepared, layout: &Layout) -> Result<Self> {
        let ck = Checkpoint::load_expecting(&layout.checkpoint(Stage::Eqrnn), Stage::Eqrnn, &p.digest(Stage::Eqrnn))?;
        QuantilePath::from_checkpoint(p, &ck)
    }

    pub fn from_checkpoint(p: &Prepared, ck: &Checkpoint) -> Result<Self> {
        let net = EqrnnNet::from_params(p.cfg.eqrnn_config(), ck.params("net."))?;
        let levels = p.cfg.eqrnn.levels.clone();
        let refined = p.cfg.eqrnn.refined_levels.clone();
        let c = p.channels();
        let mut stage1 = vec![];
        let mut stage2 = vec![];
        for s in 0..c {
            stage1.push(
                (0..levels.len())
                    .map(|l| {
                        QuantileModel::from_params(s, levels.levels()[l], &STAGE1_DIMS, ck.params(&head_name(1, s, l)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            let dims = [levels.len(), STAGE2_HIDDEN, 1];
            stage2.push(
                (0..refined.len())
                    .map(|l| QuantileModel::from_params(s, refined.levels()[l], &dims, ck.params(&head_name(2, s, l))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let band = ck.tensor("band")?.data().to_vec();
        if band.len() != c {
            return Err(Error::shape("band width count differs from channel count"));
        }
        Ok(QuantilePath {
            net,
            standardizer: Standardizer::from_tensor(ck.tensor("standardizer")?)?,
            levels,
            refined,
            stage1,
            stage2,
            band,
        })
    }

    /// Stage-1 estimates of `sensor` for forecasts `f`.
    pub fn stage1_for(&self, sensor: usize, f: &[f64]) -> Result<Vec<Vec<f64>>> {
        let models: Vec<&QuantileModel> = self.stage1[sensor].iter().collect();
        stage1_estimates(&models, f)
    }

    pub fn series(&self, p: &Prepared) -> Result<QuantileSeries> {
        let forecast = forecast_all(&self.net, p)?;
        let h = p.cfg.horizon;
        let refined = (0..p.channels())
            .into_par_iter()
            .map(|s| {
                let est = self.stage1_for(s, &forecast[s][h..])?;
                let x = Tensor::from_rows(&est);
                self.stage2[s]
                    .iter()
                    .map(|m| {
                        let mut q = vec![f64::NAN; h];
                        q.extend(m.predict(&x)?);
                        Ok(q)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantileSeries { forecast, refined })
    }

    /// Window-averaged input rates for the spiking stage, `C x |refined|`
    /// per window, sensor-major.
    pub fn window_rates(&self, p: &Prepared, series: &QuantileSeries) -> Vec<Vec<f64>> {
        let c = p.channels();
        let snn = &p.cfg.snn;
        let levels = self.refined.levels();
        let step_rate = |s: usize, j: usize, t: usize| -> f64 {
            let q = series.refined[s][j][t];
            if q.is_nan() {
                return 0.0;
            }
            match snn.features {
                FeatureMode::Quantiles => clipped_rate(q, snn.tau, snn.r_max),
                FeatureMode::Exceedance => {
                    let z = p.z[t * c + s];
                    let a = levels[j];
                    let over = if a < 0.5 {
                        (q - z).max(0.0)
                    } else if a > 0.5 {
                        (z - q).max(0.0)
                    } else {
                        (z - q).abs()
                    };
                    clipped_rate(over / (snn.feature_scale * self.band[s]), snn.tau, snn.r_max)
                }
            }
        };
        p.windows
            .windows
            .par_iter()
            .map(|w| {
                let mut out = Vec::with_capacity(c * levels.len());
                for s in 0..c {
                    for j in 0..levels.len() {
                        let rates: Vec<f64> =
                            (w.start..w.start + p.windows.window_len).map(|t| step_rate(s, j, t)).collect();
                        out.push(top_mean(rates, snn.pool_fraction));
                    }
                }
                out
            })
            .collect()
    }
}

/// Mean of the largest `ceil(fraction * n)` values.
pub fn top_mean(mut values: Vec<f64>, fraction: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values.sort_by(|a, b| b.total_cmp(a));
    values[..k].iter().sum::<f64>() / k as f64
}

/// Trains the forecaster, fits the quantile heads on its forecasts and
/// writes the stage checkpoint, log and population manifest.
pub fn train_eqrnn_stage(p: &Prepared, layout: &Layout, opts: &RunOptions) -> Result<TrainLog> {
    let cfg = &p.cfg;
    let mut net = EqrnnNet::new(cfg.eqrnn_config(), cfg.seed)?;
    let frozen = net.clone();
    let mut objective = MaskedForecast::new(&frozen, p);
    if objective.train.is_empty() {
        return Err(Error::data("no normal training rows before the validation split"));
    }
    let fit_cfg = FitConfig {
        batch_size: cfg.eqrnn.batch,
        patience: cfg.eqrnn.patience,
        ..FitConfig::eqrnn(opts.cap(cfg.eqrnn.epochs), cfg.seed)
    };
    let log = fit(&mut net.params, &mut objective, &fit_cfg)?;
    round_params(&mut net.params);

    let forecast = forecast_all(&net, p)?;
    let (train_t, val_t) = head_steps(p);
    let c = p.channels();
    let splits: Vec<SupervisedSplit> = (0..c)
        .map(|s| {
            let pick =
                |ts: &[usize]| -> (Vec<f64>, Vec<f64>) { ts.iter().map(|&t| (forecast[s][t], p.z[t * c + s])).unzip() };
            let (tx, ty) = pick(&train_t);
            let (vx, vy) = pick(&val_t);
            SupervisedSplit::scalar(&tx, &ty, &vx, &vy)
        })
        .collect();
    let head_cfg = QuantileTrainConfig {
        loss: cfg.eqrnn.loss,
        fit: FitConfig {
            batch_size: cfg.eqrnn.batch,
            patience: cfg.eqrnn.patience,
            ..FitConfig::eqrnn(opts.cap(cfg.eqrnn.head_epochs), cfg.seed ^ 0x51)
        },
    };
    let levels = &cfg.eqrnn.levels;
    let mut stage1 = train_stage1(&splits, levels, &head_cfg)?;
    for t in &mut stage1 {
        round_params(&mut t.model.params);
    }
    let nl = levels.len();
    let outputs: Vec<Stage1Outputs> = (0..c)
        .map(|s| {
            let models: Vec<&QuantileModel> = stage1[s * nl..(s + 1) * nl].iter().map(|t| &t.model).collect();
            let sp = &splits[s];
            let col = |x: &[Vec<f64>]| x.iter().map(|r| r[0]).collect::<Vec<_>>();
            Ok(Stage1Outputs {
                train_estimates: stage1_estimates(&models, &col(&sp.train_x))?,
                train_y: sp.train_y.clone(),
                val_estimates: stage1_estimates(&models, &col(&sp.val_x))?,
                val_y: sp.val_y.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut stage2 = refine_stage2(levels, &outputs, &cfg.eqrnn.refined_levels, &head_cfg)?;
    for r in &mut stage2 {
        round_params(&mut r.trained.model.params);
    }
    let band: Vec<f64> = outputs
        .iter()
        .map(|o| {
            let mut w: Vec<f64> = o
                .train_estimates
                .iter()
                .map(|e| interpolate_level(levels, e, 0.75) - interpolate_level(levels, e, 0.25))
                .collect();
            w.sort_by(f64::total_cmp);
            to_f32(empirical_quantile(&w, 0.5).max(BAND_FLOOR))
        })
        .collect();

    let mut ck = Checkpoint::new(Stage::Eqrnn, p.digest(Stage::Eqrnn), cfg.seed)
        .with_meta("channels", c)
        .with_meta("horizon", cfg.horizon)
        .with_meta("loss", cfg.eqrnn.loss.name())
        .with_meta("levels", levels.to_config_string())
        .with_meta("refined_levels", cfg.eqrnn.refined_levels.to_config_string());
    ck.push_params("net.", &net.params);
    ck.push("standardizer", &p.standardizer.to_tensor());
    ck.push("band", &Tensor::row(band));
    let nr = cfg.eqrnn.refined_levels.len();
    for (k, t) in stage1.iter().enumerate() {
        ck.push_params(&head_name(1, k / nl, k % nl), &t.model.params);
    }
    for (k, r) in stage2.iter().enumerate() {
        ck.push_params(&head_name(2, k / nr, k % nr), &r.trained.model.params);
    }
    ck.save(&layout.checkpoint(Stage::Eqrnn))?;
    log.write(&layout.log(Stage::Eqrnn))?;
    write_manifest(&layout.manifest(), &stage1, &stage2)?;
    Ok(log)
}

/// One line per trained head.
pub fn write_manifest(path: &std::path::Path, stage1: &[TrainedModel], stage2: &[RefinedModel]) -> Result<()> {
    let mut s = String::from("stage,sensor,level,epochs,train_loss,val_loss,stage1_val_loss,not_improved\n");
    for t in stage1 {
        s.push_str(&format!(
            "1,{},{},{},{},{},,\n",
            t.model.sensor, t.model.level, t.epochs, t.final_train_loss, t.final_val_loss
        ));
    }
    for r in stage2 {
        let t = &r.trained;
        s.push_str(&format!(
            "2,{},{},{},{},{},{},{}\n",
            t.model.sensor,
            t.model.level,
            t.epochs,
            t.final_train_loss,
            t.final_val_loss,
            r.stage1_val_loss,
            r.not_improved
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Fresh random stream for deterministic per-call sampling.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ tag)
}
