//! Stage orchestration: EQRNN forecasting and quantile heads, gated
//! attention over bottleneck codes, the spiking classifier, and evaluation.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod inspect;
pub mod metrics;
pub mod quantiles;
pub mod spiking;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Layout, MAGIC, VERSION};
pub use config::{
    ConfigMap, EqrnnSettings, EvalSettings, FeatureMode, GtaSettings, PipelineConfig, Schedule, SnnSettings, Stage,
};
pub use evaluate::{evaluate, Evaluation};
pub use inspect::inspect_checkpoint;
pub use metrics::{
    average_ranks, calibrate_threshold, classify, classify_votes, mann_whitney_p, metrics, roc_auc,
    ClassificationReport,
};

use crate::autodiff::Tensor;
use crate::data::{window, Split, TimeSeriesDataset, WindowSet};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::training::TrainLog;

/// Chronological train/val/test fractions over windows.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Knobs that are not part of the config and do not enter any digest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Upper bound on logged epochs per stage.
    pub max_epochs: Option<usize>,
    pub dump_attention: bool,
    pub dump_spikes: bool,
    /// Replace every attention gate by a constant bias (large negative closes them).
    pub force_gates: Option<f64>,
}

impl RunOptions {
    pub(crate) fn cap(&self, epochs: usize) -> usize {
        self.max_epochs.map_or(epochs, |m| epochs.min(m))
    }
}

/// Per-channel affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the rows `t < end` whose label is normal.
    pub fn fit(ds: &TimeSeriesDataset, end: usize) -> Result<Self> {
        let c = ds.channel_count();
        let rows: Vec<usize> = (0..end.min(ds.length)).filter(|&t| !ds.labels[t]).collect();
        if rows.len() < 2 {
            return Err(Error::data("too few normal rows to standardize"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for &t in &rows {
            for (m, v) in mean.iter_mut().zip(ds.row(t)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; c];
        for &t in &rows {
            for ((s, v), m) in var.iter_mut().zip(ds.row(t)).zip(&mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        Ok(Standardizer {
            mean: mean.into_iter().map(to_f32).collect(),
            std: var.into_iter().map(|v| to_f32(v.sqrt().max(1e-6))).collect(),
        })
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> Vec<f64> {
        let c = self.mean.len();
        ds.samples.iter().enumerate().map(|(k, v)| (v - self.mean[k % c]) / self.std[k % c]).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&[self.mean.clone(), self.std.clone()])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rows() != 2 {
            return Err(Error::shape("standardizer tensor must have two rows"));
        }
        Ok(Standardizer { mean: t.row_slice(0).to_vec(), std: t.row_slice(1).to_vec() })
    }
}

pub(crate) fn to_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Rounds every parameter to 32-bit precision, the precision checkpoints keep.
pub fn round_params(params: &mut ParamSet) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = to_f32(*v);
        }
    }
}

/// A dataset with its windows, split and standardized samples.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cfg: PipelineConfig,
    pub map: ConfigMap,
    pub dataset: TimeSeriesDataset,
    pub windows: WindowSet,
    pub standardizer: Standardizer,
    /// standardized samples, row-major `length x channels`
    pub z: Vec<f64>,
}

impl Prepared {
    pub fn new(cfg: PipelineConfig, map: ConfigMap, dataset: TimeSeriesDataset) -> Result<Self> {
        if dataset.channel_count() != cfg.channels() {
            return Err(Error::config(format!(
                "config describes {} channels, data has {}",
                cfg.channels(),
                dataset.channel_count()
            )));
        }
        let mut windows = window(&dataset, cfg.window_len, cfg.stride, &[cfg.horizon])?;
        windows.assign_split(SPLIT_FRACTIONS)?;
        let mut p = Prepared {
            standardizer: Standardizer { mean: vec![], std: vec![] },
            z: vec![],
            cfg,
            map,
            dataset,
            windows,
        };
        p.standardizer = Standardizer::fit(&p.dataset, p.val_start())?;
        p.z = p.standardizer.apply(&p.dataset);
        Ok(p)
    }

    /// Generates the configured dataset.
    pub fn generate(cfg: PipelineConfig, map: ConfigMap) -> Result<Self> {
        let ds = cfg.data.build()?;
        Prepared::new(cfg, map, ds)
    }

    /// Reads `data` when given, otherwise generates.
    pub fn load(cfg: PipelineConfig, map: ConfigMap, data: Option<&Path>) -> Result<Self> {
        match data {
            Some(path) => {
                let ds = crate::data::read_csv(path)?;
                Prepared::new(cfg, map, ds)
            }
            None => Prepared::generate(cfg, map),
        }
    }

    pub fn channels(&self) -> usize {
        self.dataset.channel_count()
    }

    pub fn length(&self) -> usize {
        self.dataset.length
    }

    pub fn z_row(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.z[t * c..(t + 1) * c]
    }

    /// First step of the first validation window; training data lies before it.
    pub fn val_start(&self) -> usize {
        self.windows.windows[self.windows.split.train].start
    }

    /// First step of the first test window.
    pub fn test_start(&self) -> usize {
        self.windows.windows[self.windows.split.train + self.windows.split.val].start
    }

    pub fn window_indices(&self, split: Split) -> Vec<usize> {
        self.windows.indices(split).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<bool> {
        idx.iter().map(|&i| self.windows.windows[i].abnormal).collect()
    }

    /// Permutes the window labels.
    pub fn shuffle_labels(&mut self, seed: u64) {
        let mut labels: Vec<bool> = self.windows.windows.iter().map(|w| w.abnormal).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (w, l) in self.windows.windows.iter_mut().zip(labels) {
            w.abnormal = l;
        }
    }

    pub fn digest(&self, stage: Stage) -> [u8; 32] {
        self.map.digest(stage)
    }
}

/// Trains `stage` and writes its checkpoint and log under `layout`.
pub fn train_stage(p: &Prepared, stage: Stage, layout: &Layout, opts: &RunOptions) -> Result<TrainLog> {
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    match stage {
        Stage::Eqrnn => quantiles::train_eqrnn_stage(p, layout, opts),
        Stage::Gta => attention::train_gta_stage(p, layout, opts),
        Stage::Snn => spiking::train_snn_stage(p, layout, opts),
    }
}

/// Trains all three stages in order, then evaluates.
pub fn run_pipeline(p: &Prepared, layout: &Layout, opts: &RunOptions) -> Result<Evaluation> {
    for stage in Stage::ALL {
        train_stage(p, stage, layout, opts)?;
    }
    evaluate(p, layout, opts)
}

/// Strided subsample of at most `cap` entries.
pub(crate) fn subsample<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|k| items[k * items.len() / cap].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Prepared {
        let (cfg, map) = PipelineConfig::parse("data.length = 6000\ndata.fault_duration = 200").unwrap();
        Prepared::generate(cfg, map).unwrap()
    }

    #[test]
    fn standardized_train_rows() {
        let p = small();
        let c = p.channels();
        let rows: Vec<usize> = (0..p.val_start()).filter(|&t| !p.dataset.labels[t]).collect();
        for ch in 0..c {
            let m: f64 = rows.iter().map(|&t| p.z[t * c + ch]).sum::<f64>() / rows.len() as f64;
            assert!(m.abs() < 1e-5, "channel {ch} mean {m}");
        }
        assert!(p.val_start() < p.test_start());
    }

    #[test]
    fn shuffled_labels_keep_counts() {
        let mut p = small();
        let before = p.windows.windows.iter().filter(|w| w.abnormal).count();
        p.shuffle_labels(3);
        let after = p.windows.windows.iter().filter(|w| w.abnormal).count();
        assert_eq!(before, after);
    }

    #[test]
    fn subsample_caps() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(subsample(&v, 20), v);
        assert_eq!(subsample(&v, 5), vec![0, 2, 4, 6, 8]);
    }
}
