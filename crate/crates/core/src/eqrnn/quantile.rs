//! Per-sensor quantile predictors (stage 1) and the refinement networks
//! that map a sensor's stage-1 estimates to new levels (stage 2).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::levels::QuantileLevelSet;
use super::loss::{huber_value, pinball, select_delta, QuantileLoss};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dense_tensor, prelu_tensor, push_dense, ParamSet};
use crate::training::{fit, FitConfig, Objective, TrainLog};

/// Stage-1 architecture: scalar in, scalar out.
pub const STAGE1_DIMS: [usize; 4] = [1, 32, 16, 1];
/// Stage-2 hidden width; the input width is the number of stage-1 levels.
pub const STAGE2_HIDDEN: usize = 16;

/// A feed-forward quantile head: affine layers with a PReLU between each pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub sensor: usize,
    pub level: f64,
    pub dims: Vec<usize>,
    pub params: ParamSet,
}

impl QuantileModel {
    pub fn new(sensor: usize, level: f64, dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let n = dims.len() - 1;
        for i in 0..n {
            push_dense(&mut params, &format!("layer.{i}"), dims[i], dims[i + 1], &mut rng);
            if i + 1 < n {
                params.push(format!("layer.{i}.prelu"), Tensor::scalar(0.25));
            }
        }
        QuantileModel { sensor, level, dims: dims.to_vec(), params }
    }

    /// Same layout as [`QuantileModel::new`], parameters replaced.
    pub fn from_params(sensor: usize, level: f64, dims: &[usize], params: ParamSet) -> Result<Self> {
        let mut m = QuantileModel::new(sensor, level, dims, 0);
        m.params.load_from(&params)?;
        Ok(m)
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    /// Parameter indices of layer `i`: weight, bias, optional slope.
    fn layer_indices(&self, i: usize) -> (usize, usize, Option<usize>) {
        // every layer but the last carries three tensors
        let base = 3 * i;
        let slope = (i + 1 < self.layer_count()).then_some(base + 2);
        (base, base + 1, slope)
    }

    pub fn forward_tape<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for i in 0..self.layer_count() {
            let (w, b, slope) = self.layer_indices(i);
            h = h.matmul(vars[w]).add_row(vars[b]);
            if let Some(s) = slope {
                h = h.prelu(vars[s]);
            }
        }
        h
    }

    /// Predictions for a batch of input rows.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.input_width() {
            return Err(Error::shape(format!(
                "quantile model expects {} inputs, got {}",
                self.input_width(),
                x.cols()
            )));
        }
        let mut h = x.clone();
        for i in 0..self.layer_count() {
            let (w, b, slope) = self.layer_indices(i);
            h = dense_tensor(&h, self.params.get(w), self.params.get(b));
            if let Some(s) = slope {
                h = prelu_tensor(&h, self.params.get(s).item());
            }
        }
        Ok(h.into_data())
    }

    /// A refinement network that returns input column `column` unchanged:
    /// the first hidden unit copies it, PReLU slopes are 1, and the output
    /// reads that unit.
    pub fn identity_refiner(sensor: usize, level: f64, inputs: usize, column: usize) -> Self {
        let mut m = QuantileModel::new(sensor, level, &[inputs, STAGE2_HIDDEN, 1], 0);
        let mut w0 = Tensor::zeros(inputs, STAGE2_HIDDEN);
        w0.set(column, 0, 1.0);
        let mut w1 = Tensor::zeros(STAGE2_HIDDEN, 1);
        w1.set(0, 0, 1.0);
        *m.params.get_mut(0) = w0;
        *m.params.get_mut(1) = Tensor::zeros(1, STAGE2_HIDDEN);
        *m.params.get_mut(2) = Tensor::scalar(1.0);
        *m.params.get_mut(3) = w1;
        *m.params.get_mut(4) = Tensor::zeros(1, 1);
        m
    }
}

/// Training and validation pairs for one regression problem.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSplit {
    /// `[n x d]` inputs
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    pub val_x: Vec<Vec<f64>>,
    pub val_y: Vec<f64>,
}

impl SupervisedSplit {
    /// Scalar-input pairs.
    pub fn scalar(train_x: &[f64], train_y: &[f64], val_x: &[f64], val_y: &[f64]) -> Self {
        SupervisedSplit {
            train_x: train_x.iter().map(|&v| vec![v]).collect(),
            train_y: train_y.to_vec(),
            val_x: val_x.iter().map(|&v| vec![v]).collect(),
            val_y: val_y.to_vec(),
        }
    }

    fn validate(&self) -> Result<usize> {
        if self.train_x.is_empty() {
            return Err(Error::data("empty training split"));
        }
        if self.train_x.len() != self.train_y.len() || self.val_x.len() != self.val_y.len() {
            return Err(Error::data("inputs and targets differ in length"));
        }
        let d = self.train_x[0].len();
        if self.train_x.iter().chain(&self.val_x).any(|r| r.len() != d) {
            return Err(Error::shape("ragged input rows"));
        }
        Ok(d)
    }

    fn val_matrix(&self) -> Tensor {
        if self.val_x.is_empty() {
            Tensor::zeros(1, self.train_x[0].len())
        } else {
            Tensor::from_rows(&self.val_x)
        }
    }
}

/// Settings for training quantile heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTrainConfig {
    pub loss: QuantileLoss,
    pub fit: FitConfig,
}

struct QuantileObjective<'a> {
    model: &'a QuantileModel,
    data: &'a SupervisedSplit,
    x: Tensor,
    y: Vec<f64>,
    val_x: Tensor,
    loss: QuantileLoss,
    delta: f64,
}

impl QuantileObjective<'_> {
    fn residuals(&self, params: &ParamSet) -> Result<Vec<f64>> {
        let mut m = self.model.clone();
        m.params = params.clone();
        let pred = m.predict(&self.x)?;
        Ok(self.y.iter().zip(pred).map(|(y, q)| y - q).collect())
    }
}

impl Objective for QuantileObjective<'_> {
    fn train_len(&self) -> usize {
        self.y.len()
    }

    fn epoch_start(&mut self, params: &ParamSet, _epoch: usize) -> Result<()> {
        if self.loss.uses_delta() {
            let r = self.residuals(params)?;
            if r.len() >= 4 {
                self.delta = select_delta(&r)?;
            }
        }
        Ok(())
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let x = tape.constant(self.x.select_rows(batch));
        let y = tape.constant(Tensor::column(batch.iter().map(|&i| self.y[i]).collect()));
        let q = self.model.forward_tape(params, x);
        let alpha = self.model.level;
        let l = match self.loss {
            QuantileLoss::Pinball => q.pinball(y, alpha),
            QuantileLoss::Huber => q.huber(y, alpha, self.delta, false),
            QuantileLoss::AsymmetricHuber => q.huber(y, alpha, self.delta, true),
        };
        Ok(l.mean())
    }

    fn val_loss(&mut self, params: &ParamSet) -> Result<f64> {
        if self.data.val_y.is_empty() {
            return Ok(0.0);
        }
        let mut m = self.model.clone();
        m.params = params.clone();
        let pred = m.predict(&self.val_x)?;
        let alpha = self.model.level;
        let y = &self.data.val_y;
        Ok(match self.loss {
            QuantileLoss::Pinball => mean_pinball(y, &pred, alpha),
            QuantileLoss::Huber | QuantileLoss::AsymmetricHuber => {
                let asym = self.loss == QuantileLoss::AsymmetricHuber;
                y.iter().zip(&pred).map(|(y, q)| huber_value(y - q, alpha, self.delta, asym)).sum::<f64>()
                    / y.len() as f64
            }
        })
    }
}

/// Mean pinball loss of `pred` against `y` at `alpha`.
pub fn mean_pinball(y: &[f64], pred: &[f64], alpha: f64) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    y.iter().zip(pred).map(|(&y, &q)| pinball(y, q, alpha)).sum::<f64>() / y.len() as f64
}

/// Fits one head in place and returns its log.
pub fn train_quantile_model(
    model: &mut QuantileModel,
    data: &SupervisedSplit,
    cfg: &QuantileTrainConfig,
) -> Result<TrainLog> {
    let d = data.validate()?;
    if d != model.input_width() {
        return Err(Error::shape(format!("model expects {} inputs, data has {d}", model.input_width())));
    }
    let frozen = model.clone();
    let mut obj = QuantileObjective {
        model: &frozen,
        data,
        x: Tensor::from_rows(&data.train_x),
        y: data.train_y.clone(),
        val_x: data.val_matrix(),
        loss: cfg.loss,
        delta: 1.0,
    };
    fit(&mut model.params, &mut obj, &cfg.fit)
}

/// One trained head plus its final losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: QuantileModel,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub epochs: usize,
}

fn model_seed(base: u64, stage: u64, sensor: usize, level_index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stage << 56) ^ ((sensor as u64) << 20) ^ level_index as u64
}

/// One model per `(sensor, level)`, ordered sensor-major. Models train in
/// parallel; each is deterministic for the given seed.
pub fn train_stage1(
    sensors: &[SupervisedSplit],
    levels: &QuantileLevelSet,
    cfg: &QuantileTrainConfig,
) -> Result<Vec<TrainedModel>> {
    if sensors.is_empty() {
        return Err(Error::data("no sensors to train"));
    }
    if let Some(i) = sensors.iter().position(|s| s.train_x.is_empty()) {
        return Err(Error::data(format!("sensor {i} has an empty training split")));
    }
    let jobs: Vec<(usize, usize)> = (0..sensors.len()).flat_map(|s| (0..levels.len()).map(move |l| (s, l))).collect();
    jobs.par_iter()
        .map(|&(s, l)| {
            let seed = model_seed(cfg.fit.seed, 1, s, l);
            let mut model = QuantileModel::new(s, levels.levels()[l], &STAGE1_DIMS, seed);
            let fit_cfg = QuantileTrainConfig { fit: FitConfig { seed, ..cfg.fit.clone() }, ..cfg.clone() };
            let log = train_quantile_model(&mut model, &sensors[s], &fit_cfg)?;
            Ok(trained(model, &log))
        })
        .collect()
}

fn trained(model: QuantileModel, log: &TrainLog) -> TrainedModel {
    let best = log.records.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).cloned();
    TrainedModel {
        model,
        final_train_loss: best.as_ref().map_or(f64::NAN, |r| r.train_loss),
        final_val_loss: best.as_ref().map_or(f64::NAN, |r| r.val_loss),
        epochs: log.records.len(),
    }
}

/// Stage-1 estimates for one sensor: `estimates[k]` holds the 10 level
/// predictions for sample `k`.
pub fn stage1_estimates(models: &[&QuantileModel], inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let x = Tensor::column(inputs.to_vec());
    let per_level: Vec<Vec<f64>> = models.iter().map(|m| m.predict(&x)).collect::<Result<_>>()?;
    Ok((0..inputs.len()).map(|k| per_level.iter().map(|p| p[k]).collect()).collect())
}

/// Linear interpolation of stage-1 estimates to `alpha` (exact when `alpha`
/// is itself a stage-1 level).
pub fn interpolate_level(levels: &QuantileLevelSet, estimates: &[f64], alpha: f64) -> f64 {
    let l = levels.levels();
    if let Some(i) = levels.position(alpha) {
        return estimates[i];
    }
    let hi = l.iter().position(|&a| a > alpha).unwrap_or(l.len() - 1).max(1);
    let lo = hi - 1;
    let t = (alpha - l[lo]) / (l[hi] - l[lo]);
    estimates[lo] + t * (estimates[hi] - estimates[lo])
}

/// A refined level for one sensor plus how it compares with stage 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedModel {
    pub trained: TrainedModel,
    /// validation pinball of the stage-1 estimate at the same level
    /// (interpolated when the level is not a stage-1 level)
    pub stage1_val_loss: f64,
    /// set when refinement failed to improve on stage 1
    pub not_improved: bool,
}

/// Stage-1 estimates and targets for one sensor, as inputs to refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Outputs {
    pub train_estimates: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
    pub val_estimates: Vec<Vec<f64>>,
    pub val_y: Vec<f64>,
}

/// Trains one refinement network per `(sensor, refined level)`.
///
/// Every refined level must fall inside the stage-1 level range.
pub fn refine_stage2(
    stage1_levels: &QuantileLevelSet,
    outputs: &[Stage1Outputs],
    subset: &QuantileLevelSet,
    cfg: &QuantileTrainConfig,
) -> Result<Vec<RefinedModel>> {
    if subset.min() < stage1_levels.min() || subset.max() > stage1_levels.max() {
        return Err(Error::config(format!(
            "refined levels {:?} leave the stage-1 range [{}, {}]",
            subset.levels(),
            stage1_levels.min(),
            stage1_levels.max()
        )));
    }
    let width = stage1_levels.len();
    for (s, o) in outputs.iter().enumerate() {
        if o.train_estimates.iter().chain(&o.val_estimates).any(|e| e.len() != width) {
            return Err(Error::shape(format!("sensor {s}: stage-1 estimates must have {width} levels")));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..outputs.len()).flat_map(|s| (0..subset.len()).map(move |l| (s, l))).collect();
    jobs.par_iter()
        .map(|&(s, l)| {
            let alpha = subset.levels()[l];
            let o = &outputs[s];
            let data = SupervisedSplit {
                train_x: o.train_estimates.clone(),
                train_y: o.train_y.clone(),
                val_x: o.val_estimates.clone(),
                val_y: o.val_y.clone(),
            };
            let seed = model_seed(cfg.fit.seed, 2, s, l);
            let mut model = QuantileModel::new(s, alpha, &[width, STAGE2_HIDDEN, 1], seed);
            // start from the interpolated stage-1 answer
            warm_start_refiner(&mut model, stage1_levels, alpha);
            let fit_cfg = QuantileTrainConfig { fit: FitConfig { seed, ..cfg.fit.clone() }, ..cfg.clone() };
            let log = train_quantile_model(&mut model, &data, &fit_cfg)?;
            let baseline: Vec<f64> =
                o.val_estimates.iter().map(|e| interpolate_level(stage1_levels, e, alpha)).collect();
            let stage1_val_loss = mean_pinball(&o.val_y, &baseline, alpha);
            let refined_pred = if o.val_estimates.is_empty() {
                vec![]
            } else {
                model.predict(&Tensor::from_rows(&o.val_estimates))?
            };
            let refined_val = mean_pinball(&o.val_y, &refined_pred, alpha);
            let trained = trained(model, &log);
            Ok(RefinedModel { not_improved: refined_val > stage1_val_loss, stage1_val_loss, trained })
        })
        .collect()
}

/// Sets a refiner so that its initial output is the stage-1 interpolation
/// at `alpha`, with the remaining hidden units left at their random init.
fn warm_start_refiner(model: &mut QuantileModel, stage1_levels: &QuantileLevelSet, alpha: f64) {
    let l = stage1_levels.levels();
    let mut coeff = vec![0.0; l.len()];
    if let Some(i) = stage1_levels.position(alpha) {
        coeff[i] = 1.0;
    } else {
        let hi = l.iter().position(|&a| a > alpha).unwrap_or(l.len() - 1).max(1);
        let lo = hi - 1;
        let t = (alpha - l[lo]) / (l[hi] - l[lo]);
        coeff[lo] = 1.0 - t;
        coeff[hi] = t;
    }
    let w0 = model.params.get_mut(0);
    for (r, c) in coeff.iter().enumerate() {
        w0.set(r, 0, *c);
    }
    *model.params.get_mut(2) = Tensor::scalar(1.0);
    let w1 = model.params.get_mut(3);
    for r in 0..w1.rows() {
        w1.set(r, 0, if r == 0 { 1.0 } else { w1.get(r, 0) * 0.1 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_refiner_passes_through() {
        let m = QuantileModel::identity_refiner(0, 0.5, 10, 4);
        let rows: Vec<Vec<f64>> = (0..5).map(|k| (0..10).map(|j| (k * 10 + j) as f64 * 0.3 - 7.0).collect()).collect();
        let out = m.predict(&Tensor::from_rows(&rows)).unwrap();
        for (k, row) in rows.iter().enumerate() {
            assert_eq!(out[k], row[4]);
        }
    }

    #[test]
    fn interpolation_hits_levels_and_midpoints() {
        let levels = QuantileLevelSet::stage1();
        let est: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(interpolate_level(&levels, &est, 0.25), 3.0);
        // 0.4 sits 60% of the way from 0.25 (index 3) to 0.5 (index 4)
        assert!((interpolate_level(&levels, &est, 0.4) - 3.6).abs() < 1e-12);
    }

    #[test]
    fn population_size() {
        let split = SupervisedSplit::scalar(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0], &[1.5], &[1.5]);
        let cfg = QuantileTrainConfig { loss: QuantileLoss::Pinball, fit: FitConfig::eqrnn(1, 0) };
        let sensors = vec![split.clone(); 8];
        assert_eq!(train_stage1(&sensors, &QuantileLevelSet::stage1(), &cfg).unwrap().len(), 80);
        let one = QuantileLevelSet::new(vec![0.5]).unwrap();
        assert_eq!(train_stage1(&sensors[..1], &one, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn empty_split_is_data_error() {
        let cfg = QuantileTrainConfig { loss: QuantileLoss::Pinball, fit: FitConfig::eqrnn(1, 0) };
        let empty = SupervisedSplit::default();
        assert!(matches!(train_stage1(&[empty], &QuantileLevelSet::stage1(), &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn refinement_outside_range_is_config_error() {
        let cfg = QuantileTrainConfig { loss: QuantileLoss::Pinball, fit: FitConfig::eqrnn(1, 0) };
        let narrow = QuantileLevelSet::new(vec![0.25, 0.5, 0.75]).unwrap();
        let subset = QuantileLevelSet::new(vec![0.1]).unwrap();
        assert!(matches!(refine_stage2(&narrow, &[], &subset, &cfg), Err(Error::Config(_))));
    }
}
