//! Rate-coded leaky integrate-and-fire network producing an anomaly score.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{layer_param_count, ParamSet};

pub use crate::autodiff::surrogate as surrogate_grad;

/// Membrane constants. Times are in ms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau_m: f64,
    pub r_m: f64,
    pub v_rest: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub dt: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams { tau_m: 10.0, r_m: 1.0, v_rest: 0.0, v_th: 1.0, v_reset: 0.0, dt: 1.0 }
    }
}

impl LifParams {
    /// `C_m = τ_m / R_m`.
    pub fn c_m(&self) -> f64 {
        self.tau_m / self.r_m
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0) || !(self.dt > 0.0) {
            return Err(Error::config("tau_m and dt must be positive"));
        }
        if self.dt > self.tau_m / 2.0 {
            return Err(Error::config(format!(
                "dt = {} exceeds tau_m / 2 = {}; explicit integration is unstable",
                self.dt,
                self.tau_m / 2.0
            )));
        }
        if !(self.v_reset < self.v_th) {
            return Err(Error::config("v_reset must lie below v_th"));
        }
        if !(self.r_m > 0.0) {
            return Err(Error::config("r_m must be positive"));
        }
        Ok(())
    }
}

/// `max(0, q - tau)`.
pub fn encode_rate(q: f64, tau: f64) -> f64 {
    (q - tau).max(0.0)
}

/// Rate clipped to `[0, r_max]`.
pub fn clipped_rate(q: f64, tau: f64, r_max: f64) -> f64 {
    encode_rate(q, tau).min(r_max)
}

/// Expected spike count over a window of `t_w` steps.
pub fn expected_spikes(rate: f64, t_w: usize, dt: f64) -> f64 {
    rate * t_w as f64 * dt
}

/// One explicit-Euler step of the membrane equation followed by the
/// threshold test; a spiking neuron is reset to `v_reset`.
pub fn lif_step(v: f64, input_current: f64, p: &LifParams) -> Result<(f64, bool)> {
    let k = p.dt / p.tau_m;
    let next = v + k * (p.r_m * input_current - (v - p.v_rest));
    if !next.is_finite() {
        return Err(Error::Numeric(format!("membrane potential became {next}")));
    }
    if next >= p.v_th {
        Ok((p.v_reset, true))
    } else {
        Ok((next, false))
    }
}

/// Per-step activity of a population: `steps[t][i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub steps: Vec<Vec<f64>>,
}

impl SpikeTrain {
    /// The same rates at every step (current injection).
    pub fn constant(rates: &[f64], t_w: usize) -> Self {
        SpikeTrain { steps: vec![rates.to_vec(); t_w] }
    }

    /// Bernoulli spikes with per-step probability `rate · dt`.
    pub fn poisson<R: Rng + ?Sized>(rates: &[f64], t_w: usize, dt: f64, rng: &mut R) -> Self {
        SpikeTrain {
            steps: (0..t_w)
                .map(|_| {
                    rates.iter().map(|&r| if rng.random_bool((r * dt).clamp(0.0, 1.0)) { 1.0 } else { 0.0 }).collect()
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.width()];
        for s in &self.steps {
            for (c, v) in c.iter_mut().zip(s) {
                *c += v;
            }
        }
        c
    }
}

/// Drives a LIF population with `Σ_i w_ji S_i(t) + b_j` from rest and
/// returns its spike train. `weights` is `n_in x n_out`.
pub fn layer_forward(input: &SpikeTrain, weights: &Tensor, bias: &[f64], p: &LifParams) -> Result<SpikeTrain> {
    let (n_in, n_out) = weights.dims();
    if input.width() != n_in && !input.is_empty() || bias.len() != n_out {
        return Err(Error::shape(format!(
            "layer_forward: input width {}, weights {:?}, bias {}",
            input.width(),
            weights.dims(),
            bias.len()
        )));
    }
    let mut v = vec![p.v_rest; n_out];
    let mut out = Vec::with_capacity(input.len());
    let mut current = vec![0.0; n_out];
    for s in &input.steps {
        current.iter_mut().for_each(|c| *c = 0.0);
        for (i, &si) in s.iter().enumerate() {
            if si == 0.0 {
                continue;
            }
            for (c, w) in current.iter_mut().zip(weights.row_slice(i)) {
                *c += si * w;
            }
        }
        let mut spikes = vec![0.0; n_out];
        for j in 0..n_out {
            let (nv, fired) = lif_step(v[j], current[j] + bias[j], p)?;
            v[j] = nv;
            if fired {
                spikes[j] = 1.0;
            }
        }
        out.push(spikes);
    }
    Ok(SpikeTrain { steps: out })
}

/// Readout link function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Psi {
    Sigmoid,
    Identity,
}

/// `ψ(Σ_j w_j c_j + b)`.
pub fn readout(counts: &[f64], weights: &[f64], bias: f64, psi: Psi) -> Result<f64> {
    if counts.len() != weights.len() {
        return Err(Error::shape("readout: counts and weights differ in length"));
    }
    let z = counts.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>() + bias;
    Ok(match psi {
        Psi::Sigmoid => sigmoid(z),
        Psi::Identity => z,
    })
}

/// `L_eqrnn + λ L_snn`.
pub fn joint_loss(l_eqrnn: f64, l_snn: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda {lambda} must be nonnegative")));
    }
    Ok(l_eqrnn + lambda * l_snn)
}

/// `Σ_l (N_{l-1} N_l + N_l)`.
pub fn snn_param_count(layers: &[usize]) -> Result<usize> {
    if layers.len() < 2 {
        return Err(Error::config("need at least two layer sizes"));
    }
    Ok(layers.windows(2).map(|w| layer_param_count(w[0], w[1])).sum())
}

/// How input rates become input activity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// The rate itself is injected as current at every step.
    Current,
    /// Bernoulli spikes at the rate.
    Poisson,
}

impl InputMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "current" => Ok(InputMode::Current),
            "poisson" => Ok(InputMode::Poisson),
            other => Err(Error::config(format!("unknown spike input mode {other:?} (current | poisson)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputMode::Current => "current",
            InputMode::Poisson => "poisson",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnConfig {
    /// `[input, hidden, hidden, 1]`
    pub layers: Vec<usize>,
    pub lif: LifParams,
    pub t_w: usize,
    pub beta: f64,
    pub tau: f64,
    pub r_max: f64,
    pub input_mode: InputMode,
}

impl SnnConfig {
    pub fn new(inputs: usize, hidden: usize) -> Self {
        SnnConfig {
            layers: vec![inputs, hidden, hidden, 1],
            lif: LifParams::default(),
            t_w: 50,
            beta: 10.0,
            tau: 0.0,
            r_max: 1.0,
            input_mode: InputMode::Current,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.layers.len() != 4 || self.layers[3] != 1 || self.layers.contains(&0) {
            return Err(Error::config(format!(
                "spiking layers must be [input, hidden, hidden, 1], got {:?}",
                self.layers
            )));
        }
        if self.t_w == 0 || !(self.beta > 0.0) || !(self.r_max > 0.0) {
            return Err(Error::config("t_w, beta and r_max must be positive"));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layers[0]
    }
}

/// One spike in the raster dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterEvent {
    pub t: usize,
    pub layer: usize,
    pub neuron: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub score: f64,
    pub counts: [Vec<f64>; 2],
    pub raster: Vec<RasterEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnNet {
    pub config: SnnConfig,
    pub params: ParamSet,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 4;
const B3: usize = 5;

impl SnnNet {
    pub fn new(config: SnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = &config.layers;
        let mut params = ParamSet::new();
        // hidden layers start with enough gain that typical inputs spike
        let gain = 2.0;
        params.push("lif.0.weight", Tensor::glorot(l[0], l[1], &mut rng).map(|w| gain * w.abs()));
        params.push("lif.0.bias", Tensor::zeros(1, l[1]));
        params.push("lif.1.weight", Tensor::glorot(l[1], l[2], &mut rng).map(|w| gain * w));
        params.push("lif.1.bias", Tensor::filled(1, l[2], 0.5));
        let t_w = config.t_w as f64;
        params.push("readout.weight", Tensor::glorot(l[2], l[3], &mut rng).map(|w| w / t_w));
        params.push("readout.bias", Tensor::zeros(1, l[3]));
        Ok(SnnNet { config, params })
    }

    pub fn from_params(config: SnnConfig, params: ParamSet) -> Result<Self> {
        let mut net = SnnNet::new(config, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        snn_param_count(&self.config.layers).expect("validated layers")
    }

    /// Readout logits (`B x 1`) for a batch of input rates (`B x inputs`).
    /// `input_mask` (length `inputs`) zeroes dropped input channels;
    /// `poisson` supplies the per-step input spikes in Poisson mode.
    pub fn logits_tape<'t>(&self, vars: &[Var<'t>], rates: Var<'t>, poisson: Option<&[Tensor]>) -> Result<Var<'t>> {
        let (b, n_in) = rates.dims();
        if n_in != self.config.inputs() {
            return Err(Error::shape(format!("spiking network expects {} inputs, got {n_in}", self.config.inputs())));
        }
        let tape = rates.tape();
        let p = self.config.lif;
        let k = p.dt / p.tau_m;
        let beta = self.config.beta;
        let clipped = rates.clip(0.0, self.config.r_max);
        let constant_drive = clipped.matmul(vars[W1]).add_row(vars[B1]);
        let h1 = self.config.layers[1];
        let h2 = self.config.layers[2];
        let mut v1 = tape.constant(Tensor::filled(b, h1, p.v_rest));
        let mut v2 = tape.constant(Tensor::filled(b, h2, p.v_rest));
        let mut counts: Option<Var<'t>> = None;
        for t in 0..self.config.t_w {
            let i1 = match poisson {
                Some(steps) => tape.constant(steps[t].clone()).matmul(vars[W1]).add_row(vars[B1]),
                None => constant_drive,
            };
            let (nv1, s1) = membrane(v1, i1, &p, k, beta);
            v1 = nv1;
            let i2 = s1.matmul(vars[W2]).add_row(vars[B2]);
            let (nv2, s2) = membrane(v2, i2, &p, k, beta);
            v2 = nv2;
            counts = Some(match counts {
                None => s2,
                Some(c) => c.add(s2),
            });
        }
        let counts = counts.expect("t_w > 0");
        Ok(counts.matmul(vars[W3]).add_row(vars[B3]))
    }

    /// Simulates one sample on plain numbers, recording every spike.
    pub fn simulate(&self, rates: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<Simulation> {
        if rates.len() != self.config.inputs() {
            return Err(Error::shape(format!(
                "spiking network expects {} inputs, got {}",
                self.config.inputs(),
                rates.len()
            )));
        }
        let r: Vec<f64> = rates.iter().map(|&x| x.clamp(0.0, self.config.r_max)).collect();
        let input = match (self.config.input_mode, rng) {
            (InputMode::Poisson, Some(rng)) => SpikeTrain::poisson(&r, self.config.t_w, self.config.lif.dt, rng),
            _ => SpikeTrain::constant(&r, self.config.t_w),
        };
        let p = &self.config.lif;
        let s1 = layer_forward(&input, self.params.get(W1), self.params.get(B1).data(), p)?;
        let s2 = layer_forward(&s1, self.params.get(W2), self.params.get(B2).data(), p)?;
        let counts = s2.counts();
        let score = readout(&counts, self.params.get(W3).data(), self.params.get(B3).item(), Psi::Sigmoid)?;
        let mut raster = vec![];
        for (layer, train) in [&s1, &s2].into_iter().enumerate() {
            for (t, s) in train.steps.iter().enumerate() {
                for (neuron, &v) in s.iter().enumerate() {
                    if v != 0.0 {
                        raster.push(RasterEvent { t, layer, neuron });
                    }
                }
            }
        }
        Ok(Simulation { score, counts: [s1.counts(), counts], raster })
    }

    pub fn score(&self, rates: &[f64]) -> Result<f64> {
        Ok(self.simulate(rates, None)?.score)
    }
}

fn membrane<'t>(v: Var<'t>, current: Var<'t>, p: &LifParams, k: f64, beta: f64) -> (Var<'t>, Var<'t>) {
    let next = v.add(current.scale(p.r_m).sub(v.affine(1.0, -p.v_rest)).scale(k));
    let s = next.spike(p.v_th, beta);
    let reset = next.mul(s.one_minus()).add(s.scale(p.v_reset));
    (reset, s)
}

/// Writes `t,layer,neuron,spike` rows, one per spike, with `sample` added to
/// `t` offsets as `sample * t_w`.
pub fn write_raster(path: &Path, rasters: &[(usize, Vec<RasterEvent>)], t_w: usize) -> Result<()> {
    let mut body = String::from("t,layer,neuron,spike\n");
    for (sample, events) in rasters {
        for e in events {
            body.push_str(&format!("{},{},{},1\n", sample * t_w + e.t, e.layer, e.neuron));
        }
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_rate(0.2, 0.5), 0.0);
        assert_eq!(encode_rate(0.5, 0.5), 0.0);
        assert_eq!(encode_rate(1.5, 0.5), 1.0);
        assert_eq!(clipped_rate(9.0, 0.0, 1.0), 1.0);
        assert_eq!(expected_spikes(0.5, 50, 1.0), 25.0);
    }

    #[test]
    fn lif_examples() {
        let p = LifParams::default();
        assert_eq!(lif_step(0.0, 0.0, &p).unwrap(), (0.0, false));
        let (v, s) = lif_step(0.0, 1.0, &p).unwrap();
        assert!((v - 0.1).abs() < 1e-15 && !s);
        assert!(lif_step(f64::NAN, 0.0, &p).is_err());
        let (v, s) = lif_step(0.95, 2.0, &p).unwrap();
        assert!(s && v == p.v_reset);
    }

    #[test]
    fn lif_params_validation() {
        assert!(LifParams::default().validate().is_ok());
        assert!(LifParams { dt: 6.0, ..LifParams::default() }.validate().is_err());
        assert!(LifParams { v_reset: 1.0, ..LifParams::default() }.validate().is_err());
        assert_eq!(LifParams::default().c_m(), 10.0);
    }

    #[test]
    fn layer_examples() {
        let p = LifParams::default();
        let input = SpikeTrain::constant(&[1.0, 1.0], 20);
        let zero = layer_forward(&input, &Tensor::zeros(2, 3), &[0.0; 3], &p).unwrap();
        assert!(zero.counts().iter().all(|&c| c == 0.0));

        // a single input spike at t = 0 with weight 10 lifts v to exactly 1
        let mut steps = vec![vec![0.0]; 5];
        steps[0][0] = 1.0;
        let one = layer_forward(&SpikeTrain { steps }, &Tensor::matrix(1, 1, vec![10.0]), &[0.0], &p).unwrap();
        assert_eq!(one.counts(), vec![1.0]);
        assert_eq!(one.steps[0], vec![1.0]);

        assert!(layer_forward(&input, &Tensor::zeros(3, 1), &[0.0], &p).is_err());
    }

    #[test]
    fn readout_examples() {
        assert_eq!(readout(&[0.0, 0.0], &[0.3, 0.7], 0.0, Psi::Sigmoid).unwrap(), 0.5);
        assert_eq!(readout(&[2.0, 3.0], &[1.0, -1.0], 0.0, Psi::Identity).unwrap(), -1.0);
        let a = readout(&[5.0, 1.0], &[0.0, 0.0], 0.2, Psi::Sigmoid).unwrap();
        let b = readout(&[0.0, 9.0], &[0.0, 0.0], 0.2, Psi::Sigmoid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_grad(0.0, 10.0), 1.0);
        assert!((surrogate_grad(0.1, 10.0) - 0.25).abs() < 1e-15);
        assert!((surrogate_grad(-0.1, 10.0) - 0.25).abs() < 1e-15);
        assert!(surrogate_grad(1e9, 10.0) < 1e-15);
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(joint_loss(2.0, 4.0, 1.0).unwrap(), 6.0);
        assert_eq!(joint_loss(2.0, 4.0, 0.5).unwrap(), 4.0);
        assert!(joint_loss(2.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(snn_param_count(&[10, 256]).unwrap(), 2816);
        assert_eq!(snn_param_count(&[256, 256]).unwrap(), 65_792);
        assert_eq!(snn_param_count(&[1, 1]).unwrap(), 2);
        assert_eq!(snn_param_count(&[70, 64, 64, 1]).unwrap(), 8769);
        assert!(snn_param_count(&[3]).is_err());
        let net = SnnNet::new(SnnConfig::new(70, 64), 0).unwrap();
        assert_eq!(net.params.scalar_count(), 8769);
    }

    #[test]
    fn tape_matches_simulation() {
        let net = SnnNet::new(SnnConfig::new(6, 8), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let tape = Tape::new();
        let vars = net.params.bind_frozen(&tape);
        let logits = net.logits_tape(&vars, tape.constant(Tensor::from_rows(&rows)), None).unwrap().value();
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(sigmoid(logits.get(i, 0)), net.score(r).unwrap());
        }
    }
}
