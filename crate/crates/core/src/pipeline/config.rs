//! Line-oriented `dotted.key = value` configuration driving every stage.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{FaultKind, GeneratorConfig};
use crate::eqrnn::{EqrnnConfig, QuantileLevelSet, QuantileLoss};
use crate::error::{Error, Result};
use crate::gta::{Combine, GtaConfig};
use crate::snn::{InputMode, LifParams, SnnConfig};

/// Which stage a digest or checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Eqrnn,
    Gta,
    Snn,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Eqrnn, Stage::Gta, Stage::Snn];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "eqrnn" => Ok(Stage::Eqrnn),
            "gta" => Ok(Stage::Gta),
            "snn" => Ok(Stage::Snn),
            other => Err(Error::config(format!("unknown stage {other:?} (eqrnn | gta | snn)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Eqrnn => "eqrnn",
            Stage::Gta => "gta",
            Stage::Snn => "snn",
        }
    }

    /// Key prefixes whose values the stage depends on.
    fn scope(&self) -> &'static [&'static str] {
        match self {
            Stage::Eqrnn => &["seed", "data.", "window.", "eqrnn."],
            Stage::Gta => &["seed", "data.", "window.", "eqrnn.", "gta."],
            Stage::Snn => &["seed", "data.", "window.", "eqrnn.", "gta.", "snn."],
        }
    }
}

/// Encoder/decoder layer schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Widths rescaled to the channel count.
    Scaled,
    /// The 70-input schedule regardless of channel count.
    Paper,
}

/// What the spiking stage receives per quantile output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// How far each observation falls beyond its refined quantile, in units
    /// of the sensor's quantile band.
    Exceedance,
    /// The refined quantile estimates themselves.
    Quantiles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EqrnnSettings {
    pub schedule: Schedule,
    pub groups: usize,
    pub eps: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub loss: QuantileLoss,
    pub levels: QuantileLevelSet,
    pub refined_levels: QuantileLevelSet,
    pub head_epochs: usize,
    pub head_samples: usize,
    pub train_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtaSettings {
    pub config: GtaConfig,
    pub epochs: usize,
    pub batch: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnSettings {
    pub hidden: usize,
    pub lif: LifParams,
    pub t_w: usize,
    pub beta: f64,
    pub tau: f64,
    pub r_max: f64,
    pub input: InputMode,
    pub features: FeatureMode,
    pub feature_scale: f64,
    /// shuffle sensor blocks of training features
    pub permute_sensors: bool,
    /// share of the highest per-step rates averaged into a window feature
    pub pool_fraction: f64,
    pub attention_rates: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch: usize,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub threshold: f64,
    pub vote_k: usize,
    pub vote_m: usize,
    pub calibrate: bool,
}

/// Every setting of a run, defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub window_len: usize,
    pub stride: usize,
    pub horizon: usize,
    pub eqrnn: EqrnnSettings,
    pub gta: GtaSettings,
    pub snn: SnnSettings,
    pub eval: EvalSettings,
}

const DEFAULTS: &str = "\
seed = 7
data.analog = 6
data.digital = 2
data.length = 20000
data.noise_sigma = 0.1
data.periods = 211,67
data.faults = drift,spike-burst,stuck-at
data.fault_duration = 400
data.drift_magnitude = 8
data.spike_magnitude = 10
data.variance_magnitude = 4
window.length = 32
window.stride = 8
window.horizon = 1
eqrnn.schedule = scaled
eqrnn.groups = 1
eqrnn.eps = 0.00001
eqrnn.dropout = 0
eqrnn.epochs = 150
eqrnn.batch = 64
eqrnn.patience = 12
eqrnn.train_rows = 6000
eqrnn.loss = asymmetric-huber
eqrnn.levels = 0.01,0.1,0.2,0.25,0.5,0.6,0.75,0.8,0.9,0.99
eqrnn.refined_levels = 0.25,0.4,0.6,0.75
eqrnn.head_epochs = 30
eqrnn.head_samples = 4000
gta.d_k = 16
gta.ranges = 2,24,48
gta.combine = blend-mean
gta.epochs = 10
gta.batch = 64
gta.samples = 3000
snn.hidden = 64
snn.t_w = 50
snn.dt = 1
snn.tau_m = 10
snn.r_m = 1
snn.v_rest = 0
snn.v_th = 1
snn.v_reset = 0
snn.beta = 10
snn.tau = 0.25
snn.r_max = 1
snn.input = current
snn.features = exceedance
snn.feature_scale = 4
snn.permute_sensors = false
snn.pool_fraction = 0.25
snn.attention_rates = 8
snn.dropout = 0.25
snn.lambda = 0.1
snn.pretrain_epochs = 40
snn.joint_epochs = 5
snn.batch = 32
snn.patience = 12
eval.threshold = 0.5
eval.vote_k = 0
eval.vote_m = 1
eval.calibrate = true
";

/// Raw key/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::config(format!("line {}: bad key {k:?}", n + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(ConfigMap { values })
    }

    pub fn defaults() -> Self {
        ConfigMap::parse(DEFAULTS).expect("defaults parse")
    }

    /// Defaults overlaid with `text`; unknown keys are rejected.
    pub fn with_defaults(text: &str) -> Result<Self> {
        let mut base = ConfigMap::defaults();
        let user = ConfigMap::parse(text)?;
        for (k, v) in user.values {
            if !base.values.contains_key(&k) {
                return Err(Error::config(format!("unknown key {k}")));
            }
            base.values.insert(k, v);
        }
        Ok(base)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !ConfigMap::defaults().values.contains_key(key) {
            return Err(Error::config(format!("unknown key {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::config(format!("missing key {key}")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::config(format!("{key} = {v:?} is not a valid number")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::config(format!("{key}: bad entry {s:?}"))))
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::config(format!("{key} = {v:?} must be true or false"))),
        }
    }

    /// Canonical `key = value` lines in key order.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the canonical lines a stage depends on.
    pub fn digest(&self, stage: Stage) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            let in_scope = stage.scope().iter().any(|p| k == p || (p.ends_with('.') && k.starts_with(p)));
            if in_scope {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().into()
    }
}

impl PipelineConfig {
    pub fn from_map(m: &ConfigMap) -> Result<Self> {
        let seed = m.num("seed")?;
        let fault_kinds = m
            .raw("data.faults")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty() && *s != "none")
            .map(FaultKind::parse)
            .collect::<Result<Vec<_>>>()?;
        let data = GeneratorConfig {
            analog: m.num("data.analog")?,
            digital: m.num("data.digital")?,
            length: m.num("data.length")?,
            noise_sigma: m.num("data.noise_sigma")?,
            periods: m.list("data.periods")?,
            fault_kinds,
            fault_duration: m.num("data.fault_duration")?,
            drift_magnitude: m.num("data.drift_magnitude")?,
            spike_magnitude: m.num("data.spike_magnitude")?,
            stuck_magnitude: 0.0,
            variance_magnitude: m.num("data.variance_magnitude")?,
            seed,
        };
        let schedule = match m.raw("eqrnn.schedule")? {
            "scaled" => Schedule::Scaled,
            "paper" => Schedule::Paper,
            v => return Err(Error::config(format!("eqrnn.schedule = {v:?} (scaled | paper)"))),
        };
        let eqrnn = EqrnnSettings {
            schedule,
            groups: m.num("eqrnn.groups")?,
            eps: m.num("eqrnn.eps")?,
            dropout: m.num("eqrnn.dropout")?,
            epochs: m.num("eqrnn.epochs")?,
            batch: m.num("eqrnn.batch")?,
            patience: m.num("eqrnn.patience")?,
            loss: QuantileLoss::parse(m.raw("eqrnn.loss")?)?,
            levels: QuantileLevelSet::parse(m.raw("eqrnn.levels")?)?,
            refined_levels: QuantileLevelSet::parse(m.raw("eqrnn.refined_levels")?)?,
            head_epochs: m.num("eqrnn.head_epochs")?,
            head_samples: m.num("eqrnn.head_samples")?,
            train_rows: m.num("eqrnn.train_rows")?,
        };
        let d_k = m.num("gta.d_k")?;
        let gta = GtaSettings {
            config: GtaConfig {
                d_model: crate::eqrnn::net::BOTTLENECK,
                d_k,
                d_v: d_k,
                ranges: m.list("gta.ranges")?,
                combine: Combine::parse(m.raw("gta.combine")?)?,
            },
            epochs: m.num("gta.epochs")?,
            batch: m.num("gta.batch")?,
            samples: m.num("gta.samples")?,
        };
        let features = match m.raw("snn.features")? {
            "exceedance" => FeatureMode::Exceedance,
            "quantiles" => FeatureMode::Quantiles,
            v => return Err(Error::config(format!("snn.features = {v:?} (exceedance | quantiles)"))),
        };
        let snn = SnnSettings {
            hidden: m.num("snn.hidden")?,
            lif: LifParams {
                tau_m: m.num("snn.tau_m")?,
                r_m: m.num("snn.r_m")?,
                v_rest: m.num("snn.v_rest")?,
                v_th: m.num("snn.v_th")?,
                v_reset: m.num("snn.v_reset")?,
                dt: m.num("snn.dt")?,
            },
            t_w: m.num("snn.t_w")?,
            beta: m.num("snn.beta")?,
            tau: m.num("snn.tau")?,
            r_max: m.num("snn.r_max")?,
            input: InputMode::parse(m.raw("snn.input")?)?,
            features,
            feature_scale: m.num("snn.feature_scale")?,
            permute_sensors: m.flag("snn.permute_sensors")?,
            pool_fraction: m.num("snn.pool_fraction")?,
            attention_rates: m.num("snn.attention_rates")?,
            dropout: m.num("snn.dropout")?,
            lambda: m.num("snn.lambda")?,
            pretrain_epochs: m.num("snn.pretrain_epochs")?,
            joint_epochs: m.num("snn.joint_epochs")?,
            batch: m.num("snn.batch")?,
            patience: m.num("snn.patience")?,
        };
        let eval = EvalSettings {
            threshold: m.num("eval.threshold")?,
            vote_k: m.num("eval.vote_k")?,
            vote_m: m.num("eval.vote_m")?,
            calibrate: m.flag("eval.calibrate")?,
        };
        let cfg = PipelineConfig {
            seed,
            data,
            window_len: m.num("window.length")?,
            stride: m.num("window.stride")?,
            horizon: m.num("window.horizon")?,
            eqrnn,
            gta,
            snn,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<(Self, ConfigMap)> {
        let map = ConfigMap::with_defaults(text)?;
        Ok((PipelineConfig::from_map(&map)?, map))
    }

    pub fn load(path: &Path) -> Result<(Self, ConfigMap)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        PipelineConfig::parse(&text)
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn eqrnn_config(&self) -> EqrnnConfig {
        let mut c = match self.eqrnn.schedule {
            Schedule::Scaled => EqrnnConfig::scaled(self.channels()),
            Schedule::Paper => EqrnnConfig::paper(),
        };
        c.groups = self.eqrnn.groups;
        c.eps = self.eqrnn.eps;
        c.dropout = self.eqrnn.dropout;
        c
    }

    /// Inputs to the spiking network: four-per-sensor quantile rates plus
    /// the projected attention rates.
    pub fn snn_config(&self) -> SnnConfig {
        let inputs = self.channels() * self.eqrnn.refined_levels.len() + self.snn.attention_rates;
        SnnConfig {
            layers: vec![inputs, self.snn.hidden, self.snn.hidden, 1],
            lif: self.snn.lif,
            t_w: self.snn.t_w,
            beta: self.snn.beta,
            tau: self.snn.tau,
            r_max: self.snn.r_max,
            input_mode: self.snn.input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.channels() == 0 || self.data.length == 0 {
            return Err(Error::config("data needs channels and a positive length"));
        }
        if self.eqrnn.schedule == Schedule::Paper && self.channels() != 70 {
            return Err(Error::config(format!(
                "the paper schedule needs 70 channels, the data has {}",
                self.channels()
            )));
        }
        if self.window_len == 0 || self.stride == 0 || self.horizon == 0 {
            return Err(Error::config("window length, stride and horizon must be positive"));
        }
        let e = &self.eqrnn;
        if e.refined_levels.min() < e.levels.min() || e.refined_levels.max() > e.levels.max() {
            return Err(Error::config("refined levels must lie within the stage-1 level range"));
        }
        if !(0.0..1.0).contains(&e.dropout) || !(0.0..1.0).contains(&self.snn.dropout) {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        if e.batch == 0 || self.gta.batch == 0 || self.snn.batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if e.head_samples == 0 || e.train_rows == 0 || self.gta.samples == 0 {
            return Err(Error::config("sample caps must be positive"));
        }
        if !(self.snn.lambda >= 0.0) {
            return Err(Error::config("snn.lambda must be nonnegative"));
        }
        if !(self.snn.feature_scale > 0.0) {
            return Err(Error::config("snn.feature_scale must be positive"));
        }
        if !(self.snn.pool_fraction > 0.0 && self.snn.pool_fraction <= 1.0) {
            return Err(Error::config("snn.pool_fraction must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::config("eval.threshold must lie in [0, 1]"));
        }
        if self.eval.vote_k > self.eval.vote_m || self.eval.vote_m == 0 {
            return Err(Error::config("voting needs 0 <= vote_k <= vote_m and vote_m >= 1"));
        }
        self.eqrnn_config().validate()?;
        self.gta.config.validate()?;
        self.snn_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let (cfg, _) = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg.channels(), 8);
        assert_eq!(cfg.snn_config().layers, vec![40, 64, 64, 1]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(PipelineConfig::parse("nonsense"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("bogus.key = 1"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("seed = 1\nseed = 2"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("eqrnn.loss = mse"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("snn.dt = 8"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::parse("eqrnn.refined_levels = 0.001"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_whitespace() {
        let (cfg, _) = PipelineConfig::parse("# header\n  seed=11   # trailing\n\n").unwrap();
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn digest_scopes() {
        let a = ConfigMap::with_defaults("").unwrap();
        let b = ConfigMap::with_defaults("eval.threshold = 0.7").unwrap();
        let c = ConfigMap::with_defaults("snn.lambda = 0.3").unwrap();
        for s in Stage::ALL {
            assert_eq!(a.digest(s), b.digest(s));
        }
        assert_eq!(a.digest(Stage::Eqrnn), c.digest(Stage::Eqrnn));
        assert_eq!(a.digest(Stage::Gta), c.digest(Stage::Gta));
        assert_ne!(a.digest(Stage::Snn), c.digest(Stage::Snn));
        // explicit defaults bind the same as omitted ones
        let d = ConfigMap::with_defaults("seed = 7").unwrap();
        assert_eq!(a.digest(Stage::Snn), d.digest(Stage::Snn));
    }
}
