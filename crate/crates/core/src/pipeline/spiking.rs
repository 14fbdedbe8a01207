//! The spiking stage: pretraining on frozen upstream features, then joint
//! fine-tuning of the forecaster, attention, projection and spiking network
//! under `L_EQRNN + λ L_SNN`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{codes, load_gta, window_attention};
use super::checkpoint::{Checkpoint, Layout};
use super::config::Stage;
use super::quantiles::{cycled, forecast_channels, masked_loss, MaskedForecast, QuantilePath};
use super::{round_params, Prepared, RunOptions};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Split;
use crate::eqrnn::net::BOTTLENECK;
use crate::eqrnn::EqrnnNet;
use crate::error::Result;
use crate::gta::GtaNet;
use crate::nn::ParamSet;
use crate::snn::{InputMode, SnnNet, SpikeTrain};
use crate::training::{fit, snn_dropout_mask, FitConfig, Objective, TrainLog};

/// Copies `params` with every name prefixed.
pub fn prefixed(prefix: &str, params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    append(&mut out, prefix, params);
    out
}

fn append(out: &mut ParamSet, prefix: &str, params: &ParamSet) {
    for (n, t) in params.names().iter().zip(params.tensors()) {
        out.push(format!("{prefix}{n}"), t.clone());
    }
}

/// Entries under `prefix`, prefix removed.
pub fn strip(params: &ParamSet, prefix: &str) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in params.names().iter().zip(params.tensors()) {
        if let Some(rest) = n.strip_prefix(prefix) {
            out.push(rest, t.clone());
        }
    }
    out
}

/// The attention projection and the spiking network.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingModel {
    /// `weight` (`20 x A`) then `bias` (`1 x A`)
    pub proj: ParamSet,
    pub snn: SnnNet,
}

impl SpikingModel {
    pub fn new(p: &Prepared, seed: u64) -> Result<Self> {
        let snn = SnnNet::new(p.cfg.snn_config(), seed)?;
        let a = p.cfg.snn.attention_rates;
        let mut rng = super::quantiles::stream(seed, 0x70);
        let mut proj = ParamSet::new();
        proj.push("weight", Tensor::glorot(BOTTLENECK, a, &mut rng));
        proj.push("bias", Tensor::filled(1, a, 0.5 * p.cfg.snn.r_max));
        Ok(SpikingModel { proj, snn })
    }

    /// Joined as `proj.*` then `snn.*`.
    pub fn params(&self) -> ParamSet {
        let mut out = prefixed("proj.", &self.proj);
        append(&mut out, "snn.", &self.snn.params);
        out
    }

    pub fn set_params(&mut self, all: &ParamSet) -> Result<()> {
        self.proj.load_from(&strip(all, "proj."))?;
        self.snn.params.load_from(&strip(all, "snn."))
    }

    /// Spiking-network input rates: quantile features then projected attention.
    pub fn rates(&self, features: &[f64], attention: &[f64]) -> Result<Vec<f64>> {
        let a = Tensor::row(attention.to_vec()).matmul(self.proj.get(0))?;
        let mut out = features.to_vec();
        out.extend(a.data().iter().zip(self.proj.get(1).data()).map(|(x, b)| x + b));
        Ok(out)
    }

    pub fn score(&self, features: &[f64], attention: &[f64]) -> Result<f64> {
        self.snn.score(&self.rates(features, attention)?)
    }

    /// Logits on the tape. `vars` holds the projection then the spiking
    /// parameters; `attention` is `B x 20`.
    #[allow(clippy::too_many_arguments)]
    pub fn logits_tape<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        features: &[Vec<f64>],
        attention: Var<'t>,
        dropout: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let projected = attention.matmul(vars[0]).add_row(vars[1]);
        let mut rates = Var::concat_cols(&[tape.constant(Tensor::from_rows(features)), projected]);
        let (b, n) = rates.dims();
        if training && dropout > 0.0 {
            rates = rates.mask(snn_dropout_mask(b * n, dropout, rng)?);
        }
        let snn_vars = &vars[2..];
        if training && self.snn.config.input_mode == InputMode::Poisson {
            // spikes are sampled from the current rates; the projection
            // receives no gradient through the sampled trains
            let values = rates.value();
            let r_max = self.snn.config.r_max;
            let trains: Vec<SpikeTrain> = (0..b)
                .map(|k| {
                    let r: Vec<f64> = values.row_slice(k).iter().map(|x| x.clamp(0.0, r_max)).collect();
                    SpikeTrain::poisson(&r, self.snn.config.t_w, self.snn.config.lif.dt, rng)
                })
                .collect();
            let steps: Vec<Tensor> = (0..self.snn.config.t_w)
                .map(|t| Tensor::from_rows(&trains.iter().map(|s| s.steps[t].clone()).collect::<Vec<_>>()))
                .collect();
            return self.snn.logits_tape(snn_vars, rates, Some(&steps));
        }
        self.snn.logits_tape(snn_vars, rates, None)
    }
}

fn bce<'t>(tape: &'t Tape, logits: Var<'t>, labels: &[bool]) -> Var<'t> {
    let y = Tensor::column(labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect());
    logits.bce_with_logits(tape.constant(y)).mean()
}

/// BCE of the spiking model over windows with fixed attention inputs.
pub fn frozen_bce(
    model: &SpikingModel,
    params: &ParamSet,
    features: &[Vec<f64>],
    attention: &[Vec<f64>],
    labels: &[bool],
) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut m = model.clone();
    m.set_params(params)?;
    let mut total = 0.0;
    let mut rng = super::quantiles::stream(0, 0);
    for ((f, a), l) in features.chunks(256).zip(attention.chunks(256)).zip(labels.chunks(256)) {
        let tape = Tape::new();
        let vars = params.bind_frozen(&tape);
        let att = tape.constant(Tensor::from_rows(a));
        let logits = m.logits_tape(&tape, &vars, f, att, 0.0, false, &mut rng)?;
        total += bce(&tape, logits, l).item() * l.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Window inputs gathered for a set of window indices.
#[derive(Clone, Debug, Default)]
pub struct WindowBatch {
    pub index: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl WindowBatch {
    pub fn gather(p: &Prepared, features: &[Vec<f64>], idx: &[usize]) -> Self {
        WindowBatch {
            index: idx.to_vec(),
            features: idx.iter().map(|&i| features[i].clone()).collect(),
            labels: p.labels(idx),
        }
    }

    /// Features of `batch`; with `sensors > 0` each row has its sensor
    /// blocks shuffled.
    pub fn draw(&self, batch: &[usize], sensors: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        batch
            .iter()
            .map(|&i| {
                let f = &self.features[i];
                if sensors == 0 {
                    f.clone()
                } else {
                    permute_blocks(f, sensors, rng)
                }
            })
            .collect()
    }
}

/// Reorders the `blocks` equal-length blocks of `f` at random.
pub fn permute_blocks(f: &[f64], blocks: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let width = f.len() / blocks;
    let mut order: Vec<usize> = (0..blocks).collect();
    order.shuffle(rng);
    order.iter().flat_map(|&b| &f[b * width..(b + 1) * width]).copied().collect()
}

/// Pretraining with the forecaster and attention frozen.
pub struct Pretrain<'a> {
    pub model: &'a SpikingModel,
    pub train: WindowBatch,
    pub train_attention: Vec<Vec<f64>>,
    pub val: WindowBatch,
    pub val_attention: Vec<Vec<f64>>,
    pub dropout: f64,
    /// sensor count for block permutation, 0 disables it
    pub permute: usize,
}

impl Objective for Pretrain<'_> {
    fn train_len(&self) -> usize {
        self.train.index.len()
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let f = self.train.draw(batch, self.permute, rng);
        let a: Vec<Vec<f64>> = batch.iter().map(|&i| self.train_attention[i].clone()).collect();
        let labels: Vec<bool> = batch.iter().map(|&i| self.train.labels[i]).collect();
        let att = tape.constant(Tensor::from_rows(&a));
        let logits = self.model.logits_tape(tape, params, &f, att, self.dropout, true, rng)?;
        Ok(bce(tape, logits, &labels))
    }

    fn val_loss(&mut self, params: &ParamSet) -> Result<f64> {
        frozen_bce(self.model, params, &self.val.features, &self.val_attention, &self.val.labels)
    }
}

/// Joint fine-tuning objective over `eqrnn.*`, `gta.*`, `proj.*`, `snn.*`.
pub struct Joint<'a> {
    pub p: &'a Prepared,
    pub net: &'a EqrnnNet,
    pub gta: &'a GtaNet,
    pub model: &'a SpikingModel,
    pub forecast: MaskedForecast<'a>,
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub lambda: f64,
    pub dropout: f64,
    pub permute: usize,
    pub eqrnn_rows: usize,
}

/// Offsets of each block inside the joint parameter list.
#[derive(Clone, Copy, Debug)]
pub struct JointLayout {
    pub eqrnn: usize,
    pub gta: usize,
    pub spiking: usize,
}

/// The pieces of one joint loss evaluation.
pub struct JointLoss<'t> {
    pub eqrnn: Var<'t>,
    pub snn: Var<'t>,
    pub total: Var<'t>,
}

impl<'a> Joint<'a> {
    pub fn params(net: &EqrnnNet, gta: &GtaNet, model: &SpikingModel) -> (ParamSet, JointLayout) {
        let mut all = prefixed("eqrnn.", &net.params);
        let g = all.len();
        append(&mut all, "gta.", &gta.params);
        let s = all.len();
        let m = model.params();
        append(&mut all, "", &m);
        (all, JointLayout { eqrnn: 0, gta: g, spiking: s })
    }

    fn layout(&self) -> JointLayout {
        let e = self.net.params.len();
        JointLayout { eqrnn: 0, gta: e, spiking: e + self.gta.params.len() }
    }

    /// Attention outputs (`B x 20`) at the last step of each window, with
    /// codes from the encoder on the tape.
    pub fn attention_tape<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], windows: &[usize]) -> Result<Var<'t>> {
        let l = self.layout();
        let cap = self.gta.config.capacity();
        let c = self.p.channels();
        let mut rows = vec![];
        let mut spans = vec![];
        for &i in windows {
            let t = self.p.windows.end(i) - 1;
            let lo = t.saturating_sub(cap);
            spans.push((rows.len() / c, t - lo));
            rows.extend_from_slice(&self.p.z[lo * c..(t + 1) * c]);
        }
        let x = tape.constant(Tensor::matrix(rows.len() / c, c, rows));
        let mut rng = super::quantiles::stream(0, 0);
        let code = self.net.encode(&vars[l.eqrnn..l.gta], x, false, &mut rng)?;
        let gvars = &vars[l.gta..l.spiking];
        let mut outs = Vec::with_capacity(windows.len());
        for (base, past) in spans {
            let hist: Vec<Var<'t>> = (0..past).map(|k| code.slice_rows(base + k, base + k + 1)).collect();
            let h = code.slice_rows(base + past, base + past + 1);
            outs.push(self.gta.step_tape(gvars, h, &hist)?.output);
        }
        Ok(Var::concat_rows(&outs))
    }

    /// `L_EQRNN` on `rows`, `L_SNN` on window positions `batch` of the
    /// training set, and their combination.
    pub fn losses<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        batch: &[usize],
        rows: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<JointLoss<'t>> {
        let l = self.layout();
        let le = masked_loss(
            self.net,
            &vars[l.eqrnn..l.gta],
            tape,
            self.p,
            rows,
            self.forecast.loss,
            self.forecast.delta,
            true,
            rng,
        )?;
        let windows: Vec<usize> = batch.iter().map(|&i| self.train.index[i]).collect();
        let f = self.train.draw(batch, self.permute, rng);
        let labels: Vec<bool> = batch.iter().map(|&i| self.train.labels[i]).collect();
        let att = self.attention_tape(tape, vars, &windows)?;
        let logits = self.model.logits_tape(tape, &vars[l.spiking..], &f, att, self.dropout, true, rng)?;
        let ls = bce(tape, logits, &labels);
        Ok(JointLoss { eqrnn: le, snn: ls, total: le.add(ls.scale(self.lambda)) })
    }

    /// Training rows for `L_EQRNN`, each with a random masked channel.
    pub fn draw_rows(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let n = self.forecast.train.len();
        let idx: Vec<usize> = (0..self.eqrnn_rows).map(|_| rng.random_range(0..n)).collect();
        self.forecast.draw(&idx, rng)
    }
}

impl Objective for Joint<'_> {
    fn train_len(&self) -> usize {
        self.train.index.len()
    }

    fn epoch_start(&mut self, params: &ParamSet, _epoch: usize) -> Result<()> {
        self.forecast.update_delta(&strip(params, "eqrnn."))
    }

    fn batch_loss<'t>(
        &mut self,
        tape: &'t Tape,
        params: &[Var<'t>],
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let rows = self.draw_rows(rng);
        Ok(self.losses(tape, params, batch, &rows, rng)?.total)
    }

    fn val_loss(&mut self, params: &ParamSet) -> Result<f64> {
        let le = self.forecast.val_pinball(&strip(params, "eqrnn."))?;
        if self.lambda == 0.0 {
            return Ok(le);
        }
        let net = EqrnnNet::from_params(self.net.config.clone(), strip(params, "eqrnn."))?;
        let gta = GtaNet::from_params(self.gta.config.clone(), strip(params, "gta."))?;
        let codes = codes(&net, self.p)?;
        let attention = window_attention(self.p, &gta, &codes, &self.val.index)?;
        let spiking = strip_spiking(params);
        let ls = frozen_bce(self.model, &spiking, &self.val.features, &attention, &self.val.labels)?;
        Ok(le + self.lambda * ls)
    }
}

fn strip_spiking(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in params.names().iter().zip(params.tensors()) {
        if n.starts_with("proj.") || n.starts_with("snn.") {
            out.push(n.clone(), t.clone());
        }
    }
    out
}

/// Everything the spiking checkpoint holds.
#[derive(Clone, Debug)]
pub struct SpikingStage {
    pub net: EqrnnNet,
    pub gta: GtaNet,
    pub model: SpikingModel,
}

impl SpikingStage {
    pub fn load(p: &Prepared, layout: &Layout) -> Result<Self> {
        let ck = Checkpoint::load_expecting(&layout.checkpoint(Stage::Snn), Stage::Snn, &p.digest(Stage::Snn))?;
        let mut model = SpikingModel::new(p, 0)?;
        model.proj.load_from(&ck.params("proj."))?;
        model.snn.params.load_from(&ck.params("snn."))?;
        Ok(SpikingStage {
            net: EqrnnNet::from_params(p.cfg.eqrnn_config(), ck.params("eqrnn."))?,
            gta: GtaNet::from_params(p.cfg.gta.config.clone(), ck.params("gta."))?,
            model,
        })
    }
}

/// Upstream inputs of the spiking stage: quantile features for every window
/// and the frozen forecaster and attention block.
pub struct Upstream {
    pub quantiles: QuantilePath,
    pub features: Vec<Vec<f64>>,
    pub gta: GtaNet,
}

impl Upstream {
    pub fn load(p: &Prepared, layout: &Layout, opts: &RunOptions) -> Result<Self> {
        let quantiles = QuantilePath::load(p, layout)?;
        let mut gta = load_gta(p, layout)?;
        if let Some(bias) = opts.force_gates {
            gta.force_gates(bias);
        }
        let series = quantiles.series(p)?;
        let features = quantiles.window_rates(p, &series);
        Ok(Upstream { quantiles, features, gta })
    }
}

pub fn train_snn_stage(p: &Prepared, layout: &Layout, opts: &RunOptions) -> Result<TrainLog> {
    let up = Upstream::load(p, layout, opts)?;
    let cfg = &p.cfg;
    let net = up.quantiles.net.clone();
    let codes = codes(&net, p)?;
    let train_idx = p.window_indices(Split::Train);
    let val_idx = p.window_indices(Split::Val);
    let mut model = SpikingModel::new(p, cfg.seed ^ 0x5A)?;
    let frozen = model.clone();
    let sensors = if cfg.snn.permute_sensors { p.channels() } else { 0 };
    let mut pre = Pretrain {
        model: &frozen,
        train: WindowBatch::gather(p, &up.features, &train_idx),
        train_attention: window_attention(p, &up.gta, &codes, &train_idx)?,
        val: WindowBatch::gather(p, &up.features, &val_idx),
        val_attention: window_attention(p, &up.gta, &codes, &val_idx)?,
        dropout: cfg.snn.dropout,
        permute: sensors,
    };
    let pre_epochs = opts.cap(cfg.snn.pretrain_epochs);
    let fit_cfg = FitConfig {
        batch_size: cfg.snn.batch,
        patience: cfg.snn.patience,
        ..FitConfig::snn(pre_epochs, cfg.seed ^ 0x5A)
    };
    let mut params = model.params();
    let mut log = fit(&mut params, &mut pre, &fit_cfg)?;
    model.set_params(&params)?;

    let joint_epochs = match opts.max_epochs {
        Some(m) => cfg.snn.joint_epochs.min(m.saturating_sub(log.records.len())),
        None => cfg.snn.joint_epochs,
    };
    let mut net = net;
    let mut gta = up.gta.clone();
    if joint_epochs > 0 {
        let (mut all, _) = Joint::params(&net, &gta, &model);
        let (net0, gta0, model0) = (net.clone(), gta.clone(), model.clone());
        let mut joint = Joint {
            p,
            net: &net0,
            gta: &gta0,
            model: &model0,
            forecast: MaskedForecast::new(&net0, p),
            train: pre.train.clone(),
            val: pre.val.clone(),
            lambda: cfg.snn.lambda,
            dropout: cfg.snn.dropout,
            permute: sensors,
            eqrnn_rows: cfg.eqrnn.batch,
        };
        let fit_cfg = FitConfig {
            batch_size: cfg.snn.batch,
            patience: cfg.snn.patience,
            ..FitConfig::snn(joint_epochs, cfg.seed ^ 0x10)
        };
        let jlog = fit(&mut all, &mut joint, &fit_cfg)?;
        let offset = log.records.len();
        for mut r in jlog.records {
            r.epoch += offset;
            log.push(r);
        }
        net.params.load_from(&strip(&all, "eqrnn."))?;
        gta.params.load_from(&strip(&all, "gta."))?;
        model.set_params(&strip_spiking(&all))?;
        if let Some(bias) = opts.force_gates {
            gta.force_gates(bias);
        }
    }
    round_params(&mut net.params);
    round_params(&mut gta.params);
    round_params(&mut model.proj);
    round_params(&mut model.snn.params);

    let mut ck = Checkpoint::new(Stage::Snn, p.digest(Stage::Snn), cfg.seed)
        .with_meta("layers", format!("{:?}", model.snn.config.layers))
        .with_meta("lambda", cfg.snn.lambda)
        .with_meta("pretrain_epochs", log.records.len().min(pre_epochs))
        .with_meta("joint_epochs", joint_epochs);
    ck.push_params("eqrnn.", &net.params);
    ck.push_params("gta.", &gta.params);
    ck.push_params("proj.", &model.proj);
    ck.push_params("snn.", &model.snn.params);
    ck.save(&layout.checkpoint(Stage::Snn))?;
    log.write(&layout.log(Stage::Snn))?;
    Ok(log)
}

/// Rows cycling through channels, for deterministic `L_EQRNN` evaluation.
pub fn fixed_rows(p: &Prepared, rows: &[usize]) -> Vec<(usize, usize)> {
    cycled(rows, forecast_channels(p))
}
