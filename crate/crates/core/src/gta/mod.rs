//! Gated temporal attention over past hidden states, with parallel heads
//! looking back over different ranges.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// How per-head outputs are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combine {
    /// Each head blends its attended vector with `H_t` through its gate;
    /// the blends are averaged.
    BlendMean,
    /// `Σ_k G_k ⊙ Attn_k`, with no residual term.
    PaperSum,
}

impl Combine {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "blend-mean" => Ok(Combine::BlendMean),
            "paper-sum" => Ok(Combine::PaperSum),
            other => Err(Error::config(format!("unknown combine {other:?} (blend-mean | paper-sum)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Combine::BlendMean => "blend-mean",
            Combine::PaperSum => "paper-sum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtaConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ranges: Vec<usize>,
    pub combine: Combine,
}

impl Default for GtaConfig {
    fn default() -> Self {
        GtaConfig { d_model: 20, d_k: 16, d_v: 16, ranges: vec![2, 24, 48], combine: Combine::BlendMean }
    }
}

impl GtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        if self.ranges.is_empty() || self.ranges.contains(&0) {
            return Err(Error::config("every attention head needs a look-back range of at least 1"));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.ranges.iter().copied().max().unwrap_or(0)
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for one query row; also returns the weights.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (w, dk) = k.dims();
    if w == 0 {
        return Err(Error::shape("attention over an empty history"));
    }
    if q.dims() != (1, dk) || v.rows() != w {
        return Err(Error::shape(format!("attend: Q {:?}, K {:?}, V {:?}", q.dims(), k.dims(), v.dims())));
    }
    let logits = q.matmul(&k.transpose())?.map(|x| x / (dk as f64).sqrt());
    let weights = softmax_rows(&logits);
    let out = weights.matmul(v)?;
    Ok((out, weights.into_data()))
}

/// `σ(W_g [H_t; H̄] + b_g)` with `W_g` of shape `d x 2d`.
pub fn gate(h: &[f64], h_bar: &[f64], w_g: &Tensor, b_g: &[f64]) -> Result<Vec<f64>> {
    let d = h.len();
    if h_bar.len() != d || w_g.dims() != (d, 2 * d) || b_g.len() != d {
        return Err(Error::shape(format!("gate: d = {d}, W_g {:?}", w_g.dims())));
    }
    Ok((0..d)
        .map(|i| {
            let row = w_g.row_slice(i);
            let z: f64 = row[..d].iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
                + row[d..].iter().zip(h_bar).map(|(w, x)| w * x).sum::<f64>()
                + b_g[i];
            sigmoid(z)
        })
        .collect())
}

/// `G ⊙ attended + (1 - G) ⊙ H_t`.
pub fn gated_blend(g: &[f64], attended: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if g.len() != attended.len() || g.len() != h.len() {
        return Err(Error::shape("gated_blend operands differ in length"));
    }
    Ok(g.iter().zip(attended).zip(h).map(|((g, a), h)| g * a + (1.0 - g) * h).collect())
}

/// Elementwise sum of per-head gated outputs.
pub fn multi_head_combine(heads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = heads.first() else {
        return Err(Error::shape("no heads to combine"));
    };
    if heads.iter().any(|h| h.len() != first.len()) {
        return Err(Error::shape("head outputs differ in length"));
    }
    Ok((0..first.len()).map(|i| heads.iter().map(|h| h[i]).sum()).collect())
}

/// Parameter indices of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct HeadParams {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    wg: usize,
    bg: usize,
}

/// The trainable attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtaNet {
    pub config: GtaConfig,
    pub params: ParamSet,
    heads: Vec<HeadParams>,
}

/// Output of one attention step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<V> {
    pub output: V,
    /// per head: weights over the history, most recent state first; empty
    /// when there was no history
    pub weights: Vec<Vec<f64>>,
    pub gates: Vec<Option<V>>,
}

impl GtaNet {
    pub fn new(config: GtaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dk, dv) = (config.d_model, config.d_k, config.d_v);
        let mut params = ParamSet::new();
        let mut heads = vec![];
        for k in 0..config.ranges.len() {
            let p = format!("head.{k}");
            heads.push(HeadParams {
                wq: params.push(format!("{p}.wq"), Tensor::glorot(d, dk, &mut rng)),
                wk: params.push(format!("{p}.wk"), Tensor::glorot(d, dk, &mut rng)),
                wv: params.push(format!("{p}.wv"), Tensor::glorot(d, dv, &mut rng)),
                wo: params.push(format!("{p}.wo"), Tensor::glorot(dv, d, &mut rng)),
                wg: params.push(format!("{p}.wg"), Tensor::glorot(2 * d, d, &mut rng).transpose()),
                bg: params.push(format!("{p}.bg"), Tensor::zeros(1, d)),
            });
        }
        Ok(GtaNet { config, params, heads })
    }

    pub fn from_params(config: GtaConfig, params: ParamSet) -> Result<Self> {
        let mut net = GtaNet::new(config, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Sets every gate bias to `bias` and zeroes the gate weights; a large
    /// negative bias closes the gates.
    pub fn force_gates(&mut self, bias: f64) {
        let d = self.config.d_model;
        for h in self.heads.clone() {
            *self.params.get_mut(h.wg) = Tensor::zeros(d, 2 * d);
            *self.params.get_mut(h.bg) = Tensor::filled(1, d, bias);
        }
    }

    /// One step on the tape. `history` holds past states oldest first
    /// (`w x d`, possibly with `w = 0`), `h` is the current `1 x d` state.
    pub fn step_tape<'t>(&self, vars: &[Var<'t>], h: Var<'t>, history: &[Var<'t>]) -> Result<StepOutput<Var<'t>>> {
        let d = self.config.d_model;
        if h.dims() != (1, d) || history.iter().any(|s| s.dims() != (1, d)) {
            return Err(Error::shape(format!("attention states must be 1 x {d}")));
        }
        if history.is_empty() {
            // no history: every gate is closed and H_t passes through
            let output = match self.config.combine {
                Combine::BlendMean => h,
                Combine::PaperSum => h.scale(0.0),
            };
            return Ok(StepOutput {
                output,
                weights: vec![vec![]; self.heads.len()],
                gates: vec![None; self.heads.len()],
            });
        }
        let mut outs = vec![];
        let mut weights = vec![];
        let mut gates = vec![];
        for (k, hp) in self.heads.iter().enumerate() {
            let w = self.config.ranges[k].min(history.len());
            let past = Var::concat_rows(&history[history.len() - w..]);
            let q = h.matmul(vars[hp.wq]);
            let keys = past.matmul(vars[hp.wk]);
            let values = past.matmul(vars[hp.wv]);
            let logits = q.matmul(keys.transpose()).scale(1.0 / (self.config.d_k as f64).sqrt());
            let a = logits.softmax_rows();
            let attended = a.matmul(values).matmul(vars[hp.wo]);
            let h_bar = past.mean_rows();
            let g = Var::concat_cols(&[h, h_bar]).matmul(vars[hp.wg].transpose()).add_row(vars[hp.bg]).sigmoid();
            let gated = g.mul(attended);
            outs.push(match self.config.combine {
                Combine::BlendMean => gated.add(g.one_minus().mul(h)),
                Combine::PaperSum => gated,
            });
            let mut wv = a.value().into_data();
            wv.reverse();
            weights.push(wv);
            gates.push(Some(g));
        }
        let output = match self.config.combine {
            Combine::BlendMean => {
                let n = outs.len() as f64;
                let mut acc = outs[0];
                for o in &outs[1..] {
                    acc = acc.add(*o);
                }
                acc.scale(1.0 / n)
            }
            Combine::PaperSum => {
                let mut acc = h.scale(0.0);
                for o in &outs {
                    acc = acc.add(*o);
                }
                acc
            }
        };
        Ok(StepOutput { output, weights, gates })
    }

    /// One step on plain tensors.
    pub fn step(&self, h: &[f64], history: &[Vec<f64>]) -> Result<StepOutput<Vec<f64>>> {
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let hv = tape.constant(Tensor::row(h.to_vec()));
        let hist: Vec<Var<'_>> = history.iter().map(|s| tape.constant(Tensor::row(s.clone()))).collect();
        let out = self.step_tape(&vars, hv, &hist)?;
        Ok(StepOutput {
            output: out.output.value().into_data(),
            weights: out.weights,
            gates: out.gates.iter().map(|g| g.map(|g| g.value().into_data())).collect(),
        })
    }

    /// Runs over a sequence of states, returning the combined output per step
    /// and the attention record.
    pub fn run(&self, states: &[Vec<f64>], start_t: usize) -> Result<(Vec<Vec<f64>>, AttentionReport)> {
        let mut state = AttentionState::new(self.config.capacity());
        let mut outputs = Vec::with_capacity(states.len());
        let mut report = AttentionReport::default();
        for (i, h) in states.iter().enumerate() {
            let hist: Vec<Vec<f64>> = state.history().cloned().collect();
            let out = self.step(h, &hist)?;
            report.push(start_t + i, &out.weights);
            outputs.push(out.output);
            state.push(h.clone());
        }
        Ok((outputs, report))
    }
}

/// Bounded buffer of past hidden states, oldest evicted first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionState {
    capacity: usize,
    buffer: VecDeque<Vec<f64>>,
}

impl AttentionState {
    pub fn new(capacity: usize) -> Self {
        AttentionState { capacity, buffer: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, h: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(h);
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Oldest first.
    pub fn history(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.buffer.iter()
    }

    /// Mean of the last `range` states.
    pub fn aggregate(&self, range: usize) -> Option<Vec<f64>> {
        let w = range.min(self.buffer.len());
        if w == 0 {
            return None;
        }
        let d = self.buffer[0].len();
        let mut mean = vec![0.0; d];
        for s in self.buffer.iter().skip(self.buffer.len() - w) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / w as f64;
            }
        }
        Some(mean)
    }
}

/// One row of the attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub t: usize,
    pub head: usize,
    /// 1 = the previous step
    pub lag: usize,
    pub weight: f64,
}

/// Attention weights per head per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub records: Vec<AttentionRecord>,
}

impl AttentionReport {
    pub fn push(&mut self, t: usize, weights: &[Vec<f64>]) {
        for (head, w) in weights.iter().enumerate() {
            for (i, &weight) in w.iter().enumerate() {
                self.records.push(AttentionRecord { t, head, lag: i + 1, weight });
            }
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("t,head,lag,weight\n");
        for r in &self.records {
            body.push_str(&format!("{},{},{},{}\n", r.t, r.head, r.lag, r.weight));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Convenience for the report: the weights from one call to [`attend`].
pub fn attention_weights_report(t: usize, weights: &[Vec<f64>]) -> AttentionReport {
    let mut r = AttentionReport::default();
    r.push(t, weights);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attend_examples() {
        let q = Tensor::row(vec![0.3, -1.0]);
        let k = Tensor::row(vec![1.0, 2.0]);
        let v = Tensor::row(vec![5.0, 6.0, 7.0]);
        let (out, w) = attend(&q, &k, &v).unwrap();
        assert_eq!(out.data(), v.data());
        assert_eq!(w, vec![1.0]);

        let k2 = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let v2 = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        let (_, w) = attend(&q, &k2, &v2).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);

        // Q orthogonal to every key
        let q = Tensor::row(vec![1.0, 0.0]);
        let k3 = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 1.0]]);
        let v3 = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let (_, w) = attend(&q, &k3, &v3).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        assert!(attend(&q, &Tensor::zeros(0, 2), &Tensor::zeros(0, 1)).is_err());
    }

    #[test]
    fn gate_examples() {
        let d = 3;
        let h = [0.4, -2.0, 1.0];
        let hb = [1.0, 1.0, 1.0];
        let zero = Tensor::zeros(d, 2 * d);
        assert_eq!(gate(&h, &hb, &zero, &[0.0; 3]).unwrap(), vec![0.5; 3]);
        let g = gate(&h, &hb, &zero, &[3f64.ln(); 3]).unwrap();
        assert!(g.iter().all(|x| (x - 0.75).abs() < 1e-15));
        let g = gate(&h, &hb, &zero, &[40.0; 3]).unwrap();
        assert!(g.iter().all(|&x| x > 1.0 - 1e-15));
    }

    #[test]
    fn blend_examples() {
        assert_eq!(gated_blend(&[1.0], &[2.0], &[4.0]).unwrap(), vec![2.0]);
        assert_eq!(gated_blend(&[0.0], &[2.0], &[4.0]).unwrap(), vec![4.0]);
        assert_eq!(gated_blend(&[0.5], &[2.0], &[4.0]).unwrap(), vec![3.0]);
        assert!(gated_blend(&[0.5, 0.5], &[2.0], &[4.0]).is_err());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(multi_head_combine(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(multi_head_combine(&[vec![0.0; 2], vec![0.0; 2]]).unwrap(), vec![0.0; 2]);
        assert_eq!(multi_head_combine(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_history_passes_state_through() {
        let net = GtaNet::new(GtaConfig::default(), 1).unwrap();
        let h: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let out = net.step(&h, &[]).unwrap();
        assert_eq!(out.output, h);
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut s = AttentionState::new(2);
        for i in 0..5 {
            s.push(vec![i as f64]);
        }
        assert_eq!(s.history().cloned().collect::<Vec<_>>(), vec![vec![3.0], vec![4.0]]);
        assert_eq!(s.aggregate(48), Some(vec![3.5]));
        assert_eq!(s.aggregate(1), Some(vec![4.0]));
    }

    #[test]
    fn weights_sum_to_one() {
        let net = GtaNet::new(GtaConfig::default(), 2).unwrap();
        let states: Vec<Vec<f64>> = (0..60).map(|t| (0..20).map(|i| ((t * 7 + i) as f64).sin()).collect()).collect();
        let (_, report) = net.run(&states, 0).unwrap();
        let mut sums = std::collections::BTreeMap::new();
        for r in &report.records {
            *sums.entry((r.t, r.head)).or_insert(0.0) += r.weight;
        }
        assert!(sums.values().all(|s| (s - 1.0f64).abs() < 1e-9));
    }
}
