//! Quantile losses and the IQR-based Huber scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest Huber scale `select_delta` will return.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Which loss a quantile head is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantileLoss {
    /// `max(α r, (α - 1) r)`.
    Pinball,
    /// The modified Huber loss exactly as written: no dependence on α, so
    /// every level is pulled to the same location.
    Huber,
    /// Huber loss tilted by `α` for `r > 0` and `1 - α` for `r < 0`.
    AsymmetricHuber,
}

impl QuantileLoss {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "pinball" => Ok(QuantileLoss::Pinball),
            "huber" => Ok(QuantileLoss::Huber),
            "asymmetric-huber" => Ok(QuantileLoss::AsymmetricHuber),
            other => {
                Err(Error::config(format!("unknown quantile loss {other:?} (pinball | huber | asymmetric-huber)")))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuantileLoss::Pinball => "pinball",
            QuantileLoss::Huber => "huber",
            QuantileLoss::AsymmetricHuber => "asymmetric-huber",
        }
    }

    pub fn uses_delta(&self) -> bool {
        !matches!(self, QuantileLoss::Pinball)
    }
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("quantile level {alpha} outside (0, 1)")))
    }
}

/// Pinball loss without validation; used by the tape kernels.
pub(crate) fn pinball(y: f64, q: f64, alpha: f64) -> f64 {
    let r = y - q;
    (alpha * r).max((alpha - 1.0) * r)
}

/// Pinball (quantile) loss of prediction `q` for observation `y` at level `alpha`.
pub fn pinball_loss(y: f64, q: f64, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    Ok(pinball(y, q, alpha))
}

pub(crate) fn huber_value(r: f64, alpha: f64, delta: f64, asymmetric: bool) -> f64 {
    let a = r.abs();
    let base = if a <= delta { 0.5 * r * r } else { delta * a - 0.5 * delta * delta };
    if !asymmetric {
        base
    } else if r > 0.0 {
        alpha * base
    } else {
        (1.0 - alpha) * base
    }
}

/// Modified Huber loss with residual `r = y - q`: `r²/2` inside `|r| <= δ`,
/// `δ|r| - δ²/2` outside. With `asymmetric` the value is weighted by `α`
/// above the prediction and `1 - α` below it.
pub fn huber_quantile_loss(y: f64, q: f64, alpha: f64, delta: f64, asymmetric: bool) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("huber delta {delta} must be positive")));
    }
    if asymmetric {
        check_level(alpha)?;
    }
    Ok(huber_value(y - q, alpha, delta, asymmetric))
}

/// Loss of `kind` for one observation. `delta` is ignored by pinball.
pub fn quantile_loss(kind: QuantileLoss, y: f64, q: f64, alpha: f64, delta: f64) -> Result<f64> {
    match kind {
        QuantileLoss::Pinball => pinball_loss(y, q, alpha),
        QuantileLoss::Huber => huber_quantile_loss(y, q, alpha, delta, false),
        QuantileLoss::AsymmetricHuber => huber_quantile_loss(y, q, alpha, delta, true),
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `p (n - 1)` in the sorted sample).
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Huber scale from the interquartile range of `residuals`, floored at [`DELTA_FLOOR`].
pub fn select_delta(residuals: &[f64]) -> Result<f64> {
    if residuals.len() < 4 {
        return Err(Error::config(format!("need at least 4 residuals to estimate an IQR, got {}", residuals.len())));
    }
    let mut sorted: Vec<f64> = residuals.to_vec();
    if sorted.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite residual".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let iqr = empirical_quantile(&sorted, 0.75) - empirical_quantile(&sorted, 0.25);
    Ok(iqr.max(DELTA_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(2.0, 2.0, 0.3).unwrap(), 0.0);
        assert!((pinball_loss(1.0, 0.0, 0.9).unwrap() - 0.9).abs() < 1e-15);
        assert!((pinball_loss(0.0, 1.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!(pinball_loss(0.0, 1.0, 1.0).is_err());
        assert!(pinball_loss(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_quantile_loss(1.0, 1.0, 0.5, 1.0, false).unwrap(), 0.0);
        assert_eq!(huber_quantile_loss(0.5, 0.0, 0.5, 1.0, false).unwrap(), 0.125);
        assert_eq!(huber_quantile_loss(3.0, 0.0, 0.5, 1.0, false).unwrap(), 2.5);
        for delta in [0.1, 1.0, 7.5] {
            let inner = 0.5 * delta * delta;
            assert_eq!(huber_value(delta, 0.5, delta, false), inner);
            assert_eq!(huber_value(-delta, 0.5, delta, false), inner);
        }
        assert!(huber_quantile_loss(1.0, 0.0, 0.5, 0.0, false).is_err());
        assert!(huber_quantile_loss(1.0, 0.0, 0.5, -1.0, true).is_err());
    }

    #[test]
    fn asymmetric_weights() {
        let up = huber_quantile_loss(3.0, 0.0, 0.9, 1.0, true).unwrap();
        let down = huber_quantile_loss(-3.0, 0.0, 0.9, 1.0, true).unwrap();
        assert!((up - 0.9 * 2.5).abs() < 1e-15);
        assert!((down - 0.1 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(select_delta(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.5);
        assert_eq!(select_delta(&[2.0; 9]).unwrap(), DELTA_FLOOR);
        assert!(matches!(select_delta(&[1.0, 2.0, 3.0]), Err(Error::Config(_))));
        let r = [0.3, -1.2, 4.0, 2.2, -0.7, 0.05];
        let d1 = select_delta(&r).unwrap();
        let d2 = select_delta(&r.map(|v| 2.0 * v)).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn parse_names() {
        for k in [QuantileLoss::Pinball, QuantileLoss::Huber, QuantileLoss::AsymmetricHuber] {
            assert_eq!(QuantileLoss::parse(k.name()).unwrap(), k);
        }
        assert!(QuantileLoss::parse("mse").is_err());
    }
}
