//! Dense tensors and a tape-based reverse-mode differentiator.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{surrogate, Gradients, SpikeMode, Tape, Var};
pub use tensor::{sigmoid, softmax_rows, Tensor};

use rand::Rng;

use crate::error::{Error, Result};

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect())
}

/// Dropout on a tape value. Identity when `training` is false or `rate` is 0.
pub fn dropout<'t, R: Rng + ?Sized>(x: Var<'t>, rate: f64, rng: &mut R, training: bool) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let (m, n) = x.dims();
    Ok(x.mask(dropout_mask(m * n, rate, rng)?))
}

/// Dropout on a plain tensor.
pub fn dropout_tensor<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::row(vec![1.0, -2.0, 3.0]);
        assert_eq!(dropout_tensor(&x, 0.15, &mut rng, false).unwrap(), x);
        assert_eq!(dropout_tensor(&x, 0.0, &mut rng, true).unwrap(), x);
    }

    #[test]
    fn dropout_rate_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::row(vec![1.0]);
        assert!(matches!(dropout_tensor(&x, 1.0, &mut rng, true), Err(Error::Config(_))));
        assert!(matches!(dropout_tensor(&x, -0.1, &mut rng, true), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_fraction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::filled(1, 100_000, 1.0);
        let y = dropout_tensor(&x, 0.15, &mut rng, true).unwrap();
        let zeroed = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeroed - 0.15).abs() < 0.01, "zeroed fraction {zeroed}");
        let survivor = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.85).abs() < 1e-12);
    }
}
