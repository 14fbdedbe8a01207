use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Analog,
    Digital,
}

/// One channel: a sum of sinusoids plus Gaussian noise. Digital channels
/// emit the sign of that carrier as 0/1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: usize,
    pub kind: ChannelKind,
    pub amplitudes: Vec<f64>,
    pub periods: Vec<f64>,
    pub phases: Vec<f64>,
    pub offset: f64,
    pub noise_sigma: f64,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.amplitudes.len();
        if self.periods.len() != k || self.phases.len() != k {
            return Err(Error::config(format!("channel {}: amplitudes, periods and phases differ in length", self.id)));
        }
        if self.periods.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::config(format!("channel {}: periods must be positive", self.id)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!("channel {}: negative noise sigma", self.id)));
        }
        Ok(())
    }

    /// Noise-free carrier at step `t`.
    pub fn carrier(&self, t: usize) -> f64 {
        let t = t as f64;
        self.offset
            + self
                .amplitudes
                .iter()
                .zip(&self.periods)
                .zip(&self.phases)
                .map(|((a, p), ph)| a * (TAU * t / p + ph).sin())
                .sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// Offset that ramps to full magnitude over the first tenth of the
    /// interval, then holds.
    Drift,
    /// Random-sign spikes of full magnitude on a quarter of the steps.
    SpikeBurst,
    /// The channel freezes at its value at onset.
    StuckAt,
    /// Noise standard deviation multiplied by the magnitude.
    VarianceInflation,
}

impl FaultKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "drift" => Ok(FaultKind::Drift),
            "spike-burst" | "spike" => Ok(FaultKind::SpikeBurst),
            "stuck-at" | "stuck" => Ok(FaultKind::StuckAt),
            "variance-inflation" | "variance" => Ok(FaultKind::VarianceInflation),
            other => Err(Error::config(format!(
                "unknown fault kind {other:?} (drift | spike-burst | stuck-at | variance-inflation)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::Drift => "drift",
            FaultKind::SpikeBurst => "spike-burst",
            FaultKind::StuckAt => "stuck-at",
            FaultKind::VarianceInflation => "variance-inflation",
        }
    }
}

/// A fault on one channel over `[onset, onset + duration)`. `magnitude` is in
/// units of the channel's noise sigma.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub channel: usize,
    pub onset: usize,
    pub duration: usize,
    pub magnitude: f64,
}

impl FaultSpec {
    pub fn end(&self) -> usize {
        self.onset + self.duration
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.onset && t < self.end()
    }
}

/// Generated samples, per-step labels and everything needed to regenerate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub channels: Vec<SensorSpec>,
    pub faults: Vec<FaultSpec>,
    pub seed: u64,
    pub length: usize,
    /// row-major `[length x channels]`
    pub samples: Vec<f64>,
    /// true = Abnormal
    pub labels: Vec<bool>,
}

impl TimeSeriesDataset {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channel_count();
        &self.samples[t * c..(t + 1) * c]
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.samples[t * self.channel_count() + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.length).map(|t| self.value(t, channel)).collect()
    }

    pub fn abnormal_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l).count() as f64 / self.length as f64
    }
}

/// Generator settings; the defaults are the desk-scale dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub analog: usize,
    pub digital: usize,
    pub length: usize,
    pub noise_sigma: f64,
    pub periods: Vec<f64>,
    pub fault_kinds: Vec<FaultKind>,
    pub fault_duration: usize,
    pub drift_magnitude: f64,
    pub spike_magnitude: f64,
    pub stuck_magnitude: f64,
    pub variance_magnitude: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            analog: 6,
            digital: 2,
            length: 20_000,
            noise_sigma: 0.1,
            periods: vec![211.0, 67.0],
            fault_kinds: vec![FaultKind::Drift, FaultKind::SpikeBurst, FaultKind::StuckAt],
            fault_duration: 400,
            drift_magnitude: 8.0,
            spike_magnitude: 10.0,
            stuck_magnitude: 0.0,
            variance_magnitude: 4.0,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn channels(&self) -> usize {
        self.analog + self.digital
    }

    pub fn magnitude(&self, kind: FaultKind) -> f64 {
        match kind {
            FaultKind::Drift => self.drift_magnitude,
            FaultKind::SpikeBurst => self.spike_magnitude,
            FaultKind::StuckAt => self.stuck_magnitude,
            FaultKind::VarianceInflation => self.variance_magnitude,
        }
    }

    pub fn build(&self) -> Result<TimeSeriesDataset> {
        let specs = default_channels(self)?;
        let faults = default_faults(self)?;
        generate(&specs, &faults, self.length, self.seed)
    }
}

/// Channels sharing the configured periods with per-channel amplitudes and
/// phases, so all channels are mixtures of one low-dimensional carrier.
pub fn default_channels(cfg: &GeneratorConfig) -> Result<Vec<SensorSpec>> {
    if cfg.channels() == 0 {
        return Err(Error::config("generator needs at least one channel"));
    }
    if cfg.periods.is_empty() {
        return Err(Error::config("generator needs at least one period"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C4A7);
    let specs = (0..cfg.channels())
        .map(|id| {
            let kind = if id < cfg.analog { ChannelKind::Analog } else { ChannelKind::Digital };
            let amplitudes = cfg.periods.iter().map(|_| rng.random_range(0.5..1.5)).collect();
            let phases = cfg.periods.iter().map(|_| rng.random_range(0.0..TAU)).collect();
            SensorSpec {
                id,
                kind,
                amplitudes,
                periods: cfg.periods.clone(),
                phases,
                offset: 0.0,
                noise_sigma: cfg.noise_sigma,
            }
        })
        .collect();
    Ok(specs)
}

/// Spreads `fault_kinds` evenly through each of the three chronological
/// regions (first 60%, next 20%, last 20%). Each kind gets one randomly
/// chosen analog channel and recurs on it in every region.
pub fn default_faults(cfg: &GeneratorConfig) -> Result<Vec<FaultSpec>> {
    if cfg.fault_kinds.is_empty() {
        return Ok(vec![]);
    }
    if cfg.analog == 0 {
        return Err(Error::config("faults need at least one analog channel"));
    }
    let bounds = [0, cfg.length * 6 / 10, cfg.length * 8 / 10, cfg.length];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xFA17);
    let channels: Vec<usize> = cfg.fault_kinds.iter().map(|_| rng.random_range(0..cfg.analog)).collect();
    let mut faults = vec![];
    for region in bounds.windows(2) {
        let (a, b) = (region[0], region[1]);
        let slot = (b - a) / cfg.fault_kinds.len();
        if cfg.fault_duration == 0 || cfg.fault_duration > slot {
            return Err(Error::config(format!(
                "fault duration {} does not fit {} faults into a region of {} steps",
                cfg.fault_duration,
                cfg.fault_kinds.len(),
                b - a
            )));
        }
        for (k, &kind) in cfg.fault_kinds.iter().enumerate() {
            faults.push(FaultSpec {
                kind,
                channel: channels[k],
                onset: a + k * slot + (slot - cfg.fault_duration) / 2,
                duration: cfg.fault_duration,
                magnitude: cfg.magnitude(kind),
            });
        }
    }
    Ok(faults)
}

fn check_faults(specs: &[SensorSpec], faults: &[FaultSpec], length: usize) -> Result<()> {
    for f in faults {
        if f.channel >= specs.len() {
            return Err(Error::config(format!("fault on unknown channel {}", f.channel)));
        }
        if f.duration == 0 || f.end() > length {
            return Err(Error::config(format!(
                "fault [{}, {}) lies outside the series of length {length}",
                f.onset,
                f.end()
            )));
        }
        if !f.magnitude.is_finite() {
            return Err(Error::config("fault magnitude must be finite"));
        }
    }
    for (i, a) in faults.iter().enumerate() {
        for b in &faults[i + 1..] {
            if a.channel == b.channel && a.onset < b.end() && b.onset < a.end() {
                return Err(Error::config(format!(
                    "faults [{}, {}) and [{}, {}) overlap on channel {}",
                    a.onset,
                    a.end(),
                    b.onset,
                    b.end(),
                    a.channel
                )));
            }
        }
    }
    Ok(())
}

fn channel_seed(seed: u64, channel: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(channel as u64 + 1)
}

fn channel_series(spec: &SensorSpec, faults: &[&FaultSpec], length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(channel_seed(seed, spec.id));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..length).map(|_| unit.sample(&mut rng)).collect();
    let sigma = spec.noise_sigma;
    let mut x: Vec<f64> = (0..length).map(|t| spec.carrier(t) + sigma * noise[t]).collect();

    for f in faults {
        let scale = f.magnitude * sigma;
        match f.kind {
            FaultKind::Drift => {
                let ramp = (f.duration as f64 * 0.1).max(1.0);
                for t in f.onset..f.end() {
                    x[t] += scale * ((t - f.onset + 1) as f64 / ramp).min(1.0);
                }
            }
            FaultKind::SpikeBurst => {
                for v in &mut x[f.onset..f.end()] {
                    if rng.random_bool(0.25) {
                        *v += if rng.random_bool(0.5) { scale } else { -scale };
                    }
                }
            }
            FaultKind::StuckAt => {
                let held = x[f.onset];
                for v in &mut x[f.onset..f.end()] {
                    *v = held;
                }
            }
            FaultKind::VarianceInflation => {
                let extra = sigma * (f.magnitude * f.magnitude - 1.0).max(0.0).sqrt();
                for t in f.onset..f.end() {
                    x[t] += extra * noise[t];
                }
            }
        }
    }
    if spec.kind == ChannelKind::Digital {
        for v in &mut x {
            *v = if *v >= 0.0 { 1.0 } else { 0.0 };
        }
    }
    x
}

/// Deterministic in `(specs, faults, length, seed)`. Every step covered by a
/// fault is labelled Abnormal.
pub fn generate(specs: &[SensorSpec], faults: &[FaultSpec], length: usize, seed: u64) -> Result<TimeSeriesDataset> {
    if length == 0 {
        return Err(Error::config("series length must be positive"));
    }
    if specs.is_empty() {
        return Err(Error::config("no channels specified"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.id != i {
            return Err(Error::config(format!("channel ids must be 0..C in order, found {} at {i}", s.id)));
        }
        s.validate()?;
    }
    check_faults(specs, faults, length)?;

    let columns: Vec<Vec<f64>> = specs
        .par_iter()
        .map(|s| {
            let own: Vec<&FaultSpec> = faults.iter().filter(|f| f.channel == s.id).collect();
            channel_series(s, &own, length, seed)
        })
        .collect();
    let c = specs.len();
    let mut samples = vec![0.0; length * c];
    for (j, col) in columns.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            samples[t * c + j] = *v;
        }
    }
    let labels = (0..length).map(|t| faults.iter().any(|f| f.contains(t))).collect();
    Ok(TimeSeriesDataset { channels: specs.to_vec(), faults: faults.to_vec(), seed, length, samples, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { length: 1000, fault_kinds: vec![], ..GeneratorConfig::default() }
    }

    #[test]
    fn deterministic() {
        let a = small().build().unwrap();
        let b = small().build().unwrap();
        assert_eq!(
            a.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_faults_all_normal() {
        let d = small().build().unwrap();
        assert!(d.labels.iter().all(|&l| !l));
    }

    #[test]
    fn single_fault_fraction() {
        let cfg = small();
        let specs = default_channels(&cfg).unwrap();
        let fault = FaultSpec { kind: FaultKind::Drift, channel: 0, onset: 300, duration: 100, magnitude: 5.0 };
        let d = generate(&specs, &[fault], 1000, 1).unwrap();
        assert_eq!(d.abnormal_fraction(), 0.10);
    }

    #[test]
    fn overlapping_faults_rejected() {
        let cfg = small();
        let specs = default_channels(&cfg).unwrap();
        let f = |onset| FaultSpec { kind: FaultKind::StuckAt, channel: 2, onset, duration: 100, magnitude: 0.0 };
        assert!(matches!(generate(&specs, &[f(100), f(150)], 1000, 1), Err(Error::Config(_))));
        let mut other = f(150);
        other.channel = 3;
        assert!(generate(&specs, &[f(100), other], 1000, 1).is_ok());
    }

    #[test]
    fn digital_channels_are_binary() {
        let d = small().build().unwrap();
        for t in 0..d.length {
            for j in d.channels.iter().filter(|s| s.kind == ChannelKind::Digital).map(|s| s.id) {
                let v = d.value(t, j);
                assert!(v == 0.0 || v == 1.0);
            }
        }
    }

    #[test]
    fn default_faults_one_per_kind_per_region() {
        let cfg = GeneratorConfig::default();
        let faults = default_faults(&cfg).unwrap();
        assert_eq!(faults.len(), 9);
        assert!(faults.iter().all(|f| f.channel < cfg.analog && f.end() <= cfg.length));
    }

    #[test]
    fn stuck_at_holds_onset_value() {
        let cfg = small();
        let specs = default_channels(&cfg).unwrap();
        let fault = FaultSpec { kind: FaultKind::StuckAt, channel: 1, onset: 200, duration: 50, magnitude: 0.0 };
        let d = generate(&specs, &[fault], 1000, 3).unwrap();
        let held = d.value(200, 1);
        assert!((200..250).all(|t| d.value(t, 1) == held));
    }
}
