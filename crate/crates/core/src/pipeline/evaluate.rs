//! Scoring of validation and test windows, threshold calibration and the
//! report files.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::attention::{attention_report, codes, window_attention};
use super::checkpoint::Layout;
use super::metrics::{calibrate_threshold, classify, classify_votes, metrics, roc_auc, ClassificationReport};
use super::quantiles::QuantilePath;
use super::spiking::SpikingStage;
use super::{Prepared, RunOptions};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::snn::write_raster;

/// Windows included in the attention and spike dumps.
pub const DUMP_WINDOWS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct WindowScore {
    pub window: usize,
    pub start: usize,
    pub split: Split,
    pub label: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<WindowScore>,
    /// test metrics at the configured threshold
    pub default: ClassificationReport,
    /// test metrics at the validation-calibrated threshold
    pub calibrated: Option<ClassificationReport>,
    /// test metrics of the k-of-m voting rule
    pub voted: Option<ClassificationReport>,
    pub val_auc: Option<f64>,
    /// share of forecast points with crossed refined quantiles
    pub crossing_rate: f64,
}

impl Evaluation {
    pub fn split_scores(&self, split: Split) -> (Vec<bool>, Vec<f64>) {
        self.scores.iter().filter(|s| s.split == split).map(|s| (s.label, s.score)).unzip()
    }

    pub fn test_auc(&self) -> Option<f64> {
        self.default.auc
    }
}

/// Scores validation and test windows with the trained stages and writes
/// the report and score files (plus dumps when requested).
pub fn evaluate(p: &Prepared, layout: &Layout, opts: &RunOptions) -> Result<Evaluation> {
    let quantiles = QuantilePath::load(p, layout)?;
    let mut stage = SpikingStage::load(p, layout)?;
    if let Some(bias) = opts.force_gates {
        stage.gta.force_gates(bias);
    }
    let series = quantiles.series(p)?;
    let features = quantiles.window_rates(p, &series);
    let codes = codes(&stage.net, p)?;
    let mut idx = p.window_indices(Split::Val);
    let test_idx = p.window_indices(Split::Test);
    idx.extend(&test_idx);
    let attention = window_attention(p, &stage.gta, &codes, &idx)?;
    let raw: Vec<f64> =
        idx.par_iter().zip(&attention).map(|(&i, a)| stage.model.score(&features[i], a)).collect::<Result<_>>()?;
    let scores: Vec<WindowScore> = idx
        .iter()
        .zip(raw)
        .map(|(&i, score)| WindowScore {
            window: i,
            start: p.windows.windows[i].start,
            split: p.windows.split.of(i),
            label: p.windows.windows[i].abnormal,
            score,
        })
        .collect();

    let (val_y, val_s): (Vec<bool>, Vec<f64>) =
        scores.iter().filter(|s| s.split == Split::Val).map(|s| (s.label, s.score)).unzip();
    let (test_y, test_s): (Vec<bool>, Vec<f64>) =
        scores.iter().filter(|s| s.split == Split::Test).map(|s| (s.label, s.score)).unzip();
    let at = |theta: f64| -> Result<ClassificationReport> {
        let pred: Vec<bool> = test_s.iter().map(|&s| classify(s, theta)).collect();
        metrics(&test_y, &pred, &test_s, theta)
    };
    let ev = &p.cfg.eval;
    let default = at(ev.threshold)?;
    let calibrated = if ev.calibrate { Some(at(calibrate_threshold(&val_y, &val_s))?) } else { None };
    let voted = if ev.vote_k > 0 {
        let theta = calibrated.as_ref().map_or(ev.threshold, |r| r.threshold);
        let pred = classify_votes(&test_s, theta, ev.vote_k, ev.vote_m);
        Some(metrics(&test_y, &pred, &test_s, theta)?)
    } else {
        None
    };
    let eval = Evaluation {
        val_auc: roc_auc(&val_y, &val_s),
        crossing_rate: series.crossing_rate(),
        scores,
        default,
        calibrated,
        voted,
    };

    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    write_report(&layout.report(), p, &eval)?;
    write_scores(&layout.scores(), &eval)?;
    let dump: Vec<usize> = test_idx.iter().copied().take(DUMP_WINDOWS).collect();
    if opts.dump_attention {
        attention_report(p, &stage.gta, &codes, &dump)?.write_csv(&layout.attention())?;
    }
    if opts.dump_spikes {
        let att = window_attention(p, &stage.gta, &codes, &dump)?;
        let rasters = dump
            .iter()
            .zip(&att)
            .enumerate()
            .map(|(k, (&i, a))| {
                let rates = stage.model.rates(&features[i], a)?;
                Ok((k, stage.model.snn.simulate(&rates, None)?.raster))
            })
            .collect::<Result<Vec<_>>>()?;
        write_raster(&layout.raster(), &rasters, stage.model.snn.config.t_w)?;
    }
    Ok(eval)
}

fn report_block(out: &mut String, prefix: &str, r: &ClassificationReport) {
    let _ = writeln!(out, "{prefix}.threshold = {}", r.threshold);
    let _ = writeln!(out, "{prefix}.tp = {}", r.tp);
    let _ = writeln!(out, "{prefix}.fp = {}", r.fp);
    let _ = writeln!(out, "{prefix}.tn = {}", r.tn);
    let _ = writeln!(out, "{prefix}.fn = {}", r.fn_);
    let _ = writeln!(out, "{prefix}.accuracy = {}", r.accuracy);
    let _ = writeln!(out, "{prefix}.precision = {}", r.precision);
    let _ = writeln!(out, "{prefix}.recall = {}", r.recall);
    let _ = writeln!(out, "{prefix}.f1 = {}", r.f1);
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| x.to_string())
}

/// Key-value report.
pub fn write_report(path: &Path, p: &Prepared, e: &Evaluation) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "channels = {}", p.channels());
    let _ = writeln!(s, "length = {}", p.length());
    let _ = writeln!(s, "windows.train = {}", p.windows.split.train);
    let _ = writeln!(s, "windows.val = {}", p.windows.split.val);
    let _ = writeln!(s, "windows.test = {}", p.windows.split.test);
    let _ = writeln!(s, "val.auc = {}", opt(e.val_auc));
    let _ = writeln!(s, "test.auc = {}", opt(e.default.auc));
    let _ = writeln!(s, "quantile.crossing_rate = {}", e.crossing_rate);
    report_block(&mut s, "default", &e.default);
    if let Some(r) = &e.calibrated {
        report_block(&mut s, "calibrated", r);
    }
    if let Some(r) = &e.voted {
        report_block(&mut s, "voted", r);
    }
    std::fs::write(path, s).map_err(|err| Error::io(path, err))
}

pub fn write_scores(path: &Path, e: &Evaluation) -> Result<()> {
    let mut s = String::from("window,start,split,label,score\n");
    for w in &e.scores {
        let split = match w.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let _ = writeln!(s, "{},{},{},{},{}", w.window, w.start, split, u8::from(w.label), w.score);
    }
    std::fs::write(path, s).map_err(|err| Error::io(path, err))
}
