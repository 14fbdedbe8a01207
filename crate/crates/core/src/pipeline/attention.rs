//! The attention stage: gated temporal attention over EQRNN bottleneck
//! codes, trained to predict the next code.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Layout};
use super::config::Stage;
use super::{round_params, subsample, Prepared, RunOptions};
use crate::autodiff::{Tape, Tensor, Var};
use crate::eqrnn::EqrnnNet;
use crate::error::{Error, Result};
use crate::gta::{AttentionReport, GtaNet};
use crate::nn::ParamSet;
use crate::training::{fit, FitConfig, Objective, TrainLog};

const CHUNK: usize = 2048;
const VAL_SAMPLES: usize = 500;

/// The forecaster stored in the EQRNN checkpoint.
pub fn load_eqrnn_net(p: &Prepared, layout: &Layout) -> Result<EqrnnNet> {
    let ck = Checkpoint::load_expecting(&layout.checkpoint(Stage::Eqrnn), Stage::Eqrnn, &p.digest(Stage::Eqrnn))?;
    EqrnnNet::from_params(p.cfg.eqrnn_config(), ck.params("net."))
}

/// Bottleneck code of every standardized row, inference mode.
pub fn codes(net: &EqrnnNet, p: &Prepared) -> Result<Vec<Vec<f64>>> {
    let n = p.length();
    let c = p.channels();
    let parts: Vec<Vec<Vec<f64>>> = (0..n)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let x = Tensor::matrix(end - start, c, p.z[start * c..end * c].to_vec());
            let h = net.encoder_forward(&x)?;
            Ok((0..end - start).map(|k| h.row_slice(k).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Codes before step `t` that the attention may look at, oldest first.
pub fn history(codes: &[Vec<f64>], t: usize, capacity: usize) -> &[Vec<f64>] {
    &codes[t.saturating_sub(capacity)..t]
}

/// Attention output for the state at `t` and its per-head weights.
pub fn attend_at(gta: &GtaNet, codes: &[Vec<f64>], t: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let out = gta.step(&codes[t], history(codes, t, gta.config.capacity()))?;
    Ok((out.output, out.weights))
}

/// Attention outputs at the last step of each window in `idx`.
pub fn window_attention(p: &Prepared, gta: &GtaNet, codes: &[Vec<f64>], idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    idx.par_iter().map(|&i| Ok(attend_at(gta, codes, p.windows.end(i) - 1)?.0)).collect()
}

/// Attention weights at the last step of each window in `idx`.
pub fn attention_report(p: &Prepared, gta: &GtaNet, codes: &[Vec<f64>], idx: &[usize]) -> Result<AttentionReport> {
    let mut report = AttentionReport::default();
    for &i in idx {
        let t = p.windows.end(i) - 1;
        let (_, w) = attend_at(gta, codes, t)?;
        report.push(t, &w);
    }
    Ok(report)
}

/// Next-code regression: the attention output at `t` should match the code at `t + 1`.
pub struct NextCode<'a> {
    pub gta: &'a GtaNet,
    pub codes: &'a [Vec<f64>],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl<'a> NextCode<'a> {
    pub fn new(gta: &'a GtaNet, codes: &'a [Vec<f64>], p: &Prepared) -> Self {
        let labels = &p.dataset.labels;
        let normal = |t: usize| !labels[t] && !labels[t + 1];
        let train: Vec<usize> = (1..p.val_start().saturating_sub(1)).filter(|&t| normal(t)).collect();
        let val: Vec<usize> = (p.val_start()..p.test_start().saturating_sub(1)).filter(|&t| normal(t)).collect();
        NextCode { gta, codes, train: subsample(&train, p.cfg.gta.samples), val: subsample(&val, VAL_SAMPLES) }
    }

    fn loss<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], steps: &[usize]) -> Result<Var<'t>> {
        let cap = self.gta.config.capacity();
        let mut outs = Vec::with_capacity(steps.len());
        let mut targets = Vec::with_capacity(steps.len());
        for &t in steps {
            let h = tape.constant(Tensor::row(self.codes[t].clone()));
            let hist: Vec<Var<'t>> =
                history(self.codes, t, cap).iter().map(|s| tape.constant(Tensor::row(s.clone()))).collect();
            outs.push(self.gta.step_tape(vars, h, &hist)?.output);
            targets.push(self.codes[t + 1].clone());
        }
        let d = Var::concat_rows(&outs).sub(tape.constant(Tensor::from_rows(&targets)));
        Ok(d.mul(d).mean())
    }
}

impl Objective for NextCode<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let steps: Vec<usize> = batch.iter().map(|&i| self.train[i]).collect();
        self.loss(tape, params, &steps)
    }

    fn val_loss(&mut self, params: &ParamSet) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(0.0);
        }
        let tape = Tape::new();
        let vars = params.bind_frozen(&tape);
        Ok(self.loss(&tape, &vars, &self.val)?.item())
    }
}

pub fn train_gta_stage(p: &Prepared, layout: &Layout, opts: &RunOptions) -> Result<TrainLog> {
    let net = load_eqrnn_net(p, layout)?;
    let codes = codes(&net, p)?;
    let cfg = &p.cfg;
    let mut gta = GtaNet::new(cfg.gta.config.clone(), cfg.seed ^ 0x67)?;
    let frozen = gta.clone();
    let mut objective = NextCode::new(&frozen, &codes, p);
    if objective.train.is_empty() {
        return Err(Error::data("no attention training steps before the validation split"));
    }
    let fit_cfg =
        FitConfig { batch_size: cfg.gta.batch, ..FitConfig::eqrnn(opts.cap(cfg.gta.epochs), cfg.seed ^ 0x67) };
    let log = fit(&mut gta.params, &mut objective, &fit_cfg)?;
    round_params(&mut gta.params);
    let mut ck = Checkpoint::new(Stage::Gta, p.digest(Stage::Gta), cfg.seed)
        .with_meta("combine", cfg.gta.config.combine.name())
        .with_meta("ranges", cfg.gta.config.ranges.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","));
    ck.push_params("gta.", &gta.params);
    ck.save(&layout.checkpoint(Stage::Gta))?;
    log.write(&layout.log(Stage::Gta))?;
    Ok(log)
}

/// The attention block stored in the attention checkpoint.
pub fn load_gta(p: &Prepared, layout: &Layout) -> Result<GtaNet> {
    let ck = Checkpoint::load_expecting(&layout.checkpoint(Stage::Gta), Stage::Gta, &p.digest(Stage::Gta))?;
    GtaNet::from_params(p.cfg.gta.config.clone(), ck.params("gta."))
}
