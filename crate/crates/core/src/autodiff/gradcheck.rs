//! Reverse-mode gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SpikeMode, Tape, Tensor, Var};

/// Step for the central differences.
pub const EPS: f64 = 1e-6;
/// Coordinates probed per tensor; larger tensors are sampled.
pub const PROBES: usize = 6;

/// Uniform entries in `[-1, 1)`.
pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Outcome of one comparison: the largest relative error over the probed
/// coordinates, and how many probes straddled a kink and were skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Check {
    pub worst: f64,
    pub probes: usize,
    pub kinks: usize,
}

impl Check {
    pub fn merge(self, other: Check) -> Check {
        Check {
            worst: self.worst.max(other.worst),
            probes: self.probes + other.probes,
            kinks: self.kinks + other.kinks,
        }
    }
}

/// Compares the tape gradient of `f` with central differences over (a
/// sample of) every coordinate of `inputs`. A probe whose one-sided
/// differences disagree straddles a ReLU-type kink, where no derivative
/// exists, and is counted instead of compared.
pub fn check<F>(inputs: &[Tensor], spike_mode: SpikeMode, rng: &mut ChaCha8Rng, f: F) -> Check
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::with_spike_mode(spike_mode);
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).item()
    };
    let tape = Tape::with_spike_mode(spike_mode);
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let grads = f(&tape, &vars).backward().expect("scalar output");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut out = Check::default();
    let mut xs = inputs.to_vec();
    let center = eval(&xs);
    for (k, g) in analytic.iter().enumerate() {
        let n = xs[k].len();
        let coords: Vec<usize> =
            if n <= PROBES { (0..n).collect() } else { (0..PROBES).map(|_| rng.random_range(0..n)).collect() };
        for i in coords {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + EPS;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x0 - EPS;
            let down = eval(&xs);
            xs[k].data_mut()[i] = x0;
            out.probes += 1;
            let right = (up - center) / EPS;
            let left = (center - down) / EPS;
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
                out.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * EPS);
            let a = g.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.worst = out.worst.max(err);
        }
    }
    out
}

/// Reduces a matrix to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
pub fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let (r, c) = y.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    y.mul(tape.constant(random(r, c, &mut rng))).sum()
}
