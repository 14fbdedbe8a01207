use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing quantile levels in (0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevelSet(Vec<f64>);

impl QuantileLevelSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("quantile level set is empty"));
        }
        if let Some(bad) = levels.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::config(format!("quantile level {bad} outside (0, 1)")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("quantile levels {levels:?} not strictly increasing")));
        }
        Ok(QuantileLevelSet(levels))
    }

    /// The ten first-stage levels.
    pub fn stage1() -> Self {
        QuantileLevelSet(vec![0.01, 0.1, 0.2, 0.25, 0.5, 0.6, 0.75, 0.8, 0.9, 0.99])
    }

    /// The refinement levels.
    pub fn stage2() -> Self {
        QuantileLevelSet(vec![0.25, 0.4, 0.6, 0.75])
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, alpha: f64) -> bool {
        self.position(alpha).is_some()
    }

    pub fn position(&self, alpha: f64) -> Option<usize> {
        self.0.iter().position(|&a| (a - alpha).abs() < 1e-12)
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Parses a comma-separated list.
    pub fn parse(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::config(format!("bad quantile level {p:?}"))))
            .collect::<Result<Vec<_>>>()?;
        QuantileLevelSet::new(levels)
    }

    pub fn to_config_string(&self) -> String {
        self.0.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Named forecast horizons with their quantile subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    H1,
    H12,
    H24,
    H48,
}

impl Horizon {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1h" => Ok(Horizon::H1),
            "12h" => Ok(Horizon::H12),
            "24h" => Ok(Horizon::H24),
            "48h" => Ok(Horizon::H48),
            other => Err(Error::config(format!("unknown horizon {other:?} (1h | 12h | 24h | 48h)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Horizon::H1 => "1h",
            Horizon::H12 => "12h",
            Horizon::H24 => "24h",
            Horizon::H48 => "48h",
        }
    }

    pub fn levels(&self) -> QuantileLevelSet {
        match self {
            Horizon::H1 => QuantileLevelSet::stage1(),
            Horizon::H12 | Horizon::H24 => QuantileLevelSet(vec![0.25, 0.4, 0.6, 0.75, 0.99]),
            Horizon::H48 => QuantileLevelSet(vec![0.1, 0.5, 0.75, 0.9]),
        }
    }
}

/// A horizon together with the channel layout it is evaluated over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub horizon: Horizon,
    pub levels: QuantileLevelSet,
    pub analog: usize,
    pub digital: usize,
}

impl HorizonConfig {
    /// The named horizon over the 22 analog + 48 digital layout.
    pub fn reference(horizon: Horizon) -> Self {
        HorizonConfig { horizon, levels: horizon.levels(), analog: 22, digital: 48 }
    }

    pub fn from_name(name: &str, analog: usize, digital: usize) -> Result<Self> {
        let horizon = Horizon::parse(name)?;
        Ok(HorizonConfig { horizon, levels: horizon.levels(), analog, digital })
    }
}

/// `|levels| x (analog + digital)`.
pub fn horizon_output_count(config: &HorizonConfig) -> usize {
    config.levels.len() * (config.analog + config.digital)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(QuantileLevelSet::new(QuantileLevelSet::stage1().levels().to_vec()).is_ok());
        assert!(QuantileLevelSet::new(QuantileLevelSet::stage2().levels().to_vec()).is_ok());
        for h in [Horizon::H1, Horizon::H12, Horizon::H24, Horizon::H48] {
            assert!(QuantileLevelSet::new(h.levels().levels().to_vec()).is_ok());
        }
    }

    #[test]
    fn invalid_sets() {
        assert!(QuantileLevelSet::new(vec![]).is_err());
        assert!(QuantileLevelSet::new(vec![0.5, 0.5]).is_err());
        assert!(QuantileLevelSet::new(vec![0.6, 0.5]).is_err());
        assert!(QuantileLevelSet::new(vec![0.0, 0.5]).is_err());
        assert!(QuantileLevelSet::new(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn parse_round_trip() {
        let s = QuantileLevelSet::stage1();
        assert_eq!(QuantileLevelSet::parse(&s.to_config_string()).unwrap(), s);
    }

    #[test]
    fn output_counts() {
        assert_eq!(horizon_output_count(&HorizonConfig::reference(Horizon::H1)), 700);
        assert_eq!(horizon_output_count(&HorizonConfig::reference(Horizon::H12)), 350);
        assert_eq!(horizon_output_count(&HorizonConfig::reference(Horizon::H24)), 350);
        assert_eq!(horizon_output_count(&HorizonConfig::reference(Horizon::H48)), 280);
        assert!(HorizonConfig::from_name("6h", 22, 48).is_err());
    }
}
