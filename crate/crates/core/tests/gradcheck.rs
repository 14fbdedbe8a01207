//! Reverse-mode gradients against central finite differences.

use eqsnn_core::autodiff::gradcheck::{check, random, weighted, Check};
use eqsnn_core::autodiff::SpikeMode;
use eqsnn_core::eqrnn::{EqrnnConfig, EqrnnNet, QuantileModel, STAGE1_DIMS};
use eqsnn_core::gta::{GtaConfig, GtaNet};
use eqsnn_core::snn::{SnnConfig, SnnNet};
use eqsnn_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn each_seed(name: &str, mut body: impl FnMut(&mut ChaCha8Rng) -> Check) {
    let (mut probes, mut kinks) = (0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = body(&mut rng);
        assert!(c.worst <= TOL, "{name}: seed {seed} relative error {:e}", c.worst);
        probes += c.probes;
        kinks += c.kinks;
    }
    assert!(kinks * 20 <= probes, "{name}: {kinks} of {probes} probes sat on kinks");
}

#[test]
fn elementwise_and_matrix_ops() {
    each_seed("ops", |rng| {
        let a = random(3, 4, rng);
        let b = random(4, 2, rng);
        let c = random(3, 4, rng);
        let row = random(1, 4, rng);
        let slope = Tensor::scalar(rng.random_range(0.05..0.5));
        check(&[a, b, c, row, slope], SpikeMode::Heaviside, rng, |t, v| {
            let mixed = v[0].mul(v[2]).add(v[0].sub(v[2]).scale(0.5)).add_row(v[3]).mul_row(v[3]);
            let act = mixed.prelu(v[4]).sigmoid().affine(2.0, -0.3).one_minus().neg();
            let prod = act.matmul(v[1]);
            let cat = Var::concat_cols(&[prod, v[0].transpose().matmul(v[2]).slice_cols(1, 3).slice_rows(0, 3)]);
            let stacked = Var::concat_rows(&[cat, cat.slice_rows(1, 2).repeat_rows(2)]).mean_rows();
            weighted(t, stacked, 1).add(weighted(t, cat, 2)).add(mixed.mean())
        })
    });
}

#[test]
fn normalization_and_softmax() {
    each_seed("group_norm/softmax", |rng| {
        let x = random(3, 8, rng);
        check(&[x], SpikeMode::Heaviside, rng, |t, v| {
            let g = v[0].group_norm(2, 1e-5).unwrap();
            let s = v[0].scale(2.0).softmax_rows();
            weighted(t, g, 3).add(weighted(t, s, 4))
        })
    });
}

#[test]
fn losses() {
    each_seed("losses", |rng| {
        let q = random(5, 1, rng);
        let y = random(5, 1, rng);
        let alpha = rng.random_range(0.05..0.95);
        let delta = rng.random_range(0.2..0.6);
        // targets enter the losses as data, not as differentiable inputs
        check(&[q], SpikeMode::Heaviside, rng, move |t, v| {
            let y = t.constant(y.clone());
            let p = v[0].pinball(y, alpha).mean();
            let h = v[0].huber(y, alpha, delta, false).mean();
            let a = v[0].huber(y, alpha, delta, true).mean();
            let targets = y.sigmoid();
            let b = v[0].bce_with_logits(targets).mean();
            p.add(h).add(a.scale(0.5)).add(b)
        })
    });
}

#[test]
fn relaxed_spike() {
    each_seed("spike", |rng| {
        let x = random(2, 5, rng).map(|v| 2.0 * v);
        check(&[x], SpikeMode::Relaxed, rng, |t, v| weighted(t, v[0].spike(0.3, 10.0), 5))
    });
}

#[test]
fn eqrnn_encoder_decoder() {
    let config = EqrnnConfig { groups: 4, dropout: 0.0, ..EqrnnConfig::scaled(8) };
    each_seed("eqrnn", |rng| {
        let net = EqrnnNet::new(config.clone(), rng.random()).unwrap();
        let mut inputs = net.params.tensors().to_vec();
        let n = inputs.len();
        inputs.push(random(3, 8, rng));
        let frozen = net.clone();
        check(&inputs, SpikeMode::Heaviside, rng, move |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let code = frozen.encode(&v[..n], v[n], true, &mut r).unwrap();
            let out = frozen.decode(&v[..n], code, true, &mut r).unwrap();
            weighted(t, out, 6).add(weighted(t, code, 7))
        })
    });
}

#[test]
fn quantile_head() {
    each_seed("quantile head", |rng| {
        let model = QuantileModel::new(0, 0.75, &STAGE1_DIMS, rng.random());
        let mut inputs = model.params.tensors().to_vec();
        let n = inputs.len();
        inputs.push(random(6, 1, rng));
        let y = random(6, 1, rng);
        check(&inputs, SpikeMode::Heaviside, rng, move |t, v| {
            model.forward_tape(&v[..n], v[n]).pinball(t.constant(y.clone()), 0.75).mean()
        })
    });
}

#[test]
fn attention_gate_and_blend() {
    let config = GtaConfig { d_model: 6, d_k: 4, d_v: 5, ranges: vec![2, 4], ..GtaConfig::default() };
    each_seed("attention", |rng| {
        let net = GtaNet::new(config.clone(), rng.random()).unwrap();
        let mut inputs = net.params.tensors().to_vec();
        let n = inputs.len();
        let w = rng.random_range(1..=5);
        for _ in 0..=w {
            inputs.push(random(1, 6, rng));
        }
        check(&inputs, SpikeMode::Heaviside, rng, move |t, v| {
            let out = net.step_tape(&v[..n], v[n], &v[n + 1..]).unwrap();
            let mut loss = weighted(t, out.output, 8);
            for g in out.gates.iter().flatten() {
                loss = loss.add(g.sum());
            }
            loss
        })
    });
}

#[test]
fn spiking_network_relaxed() {
    let config = SnnConfig { t_w: 6, ..SnnConfig::new(5, 7) };
    each_seed("snn", |rng| {
        let net = SnnNet::new(config.clone(), rng.random()).unwrap();
        let mut inputs = net.params.tensors().to_vec();
        let n = inputs.len();
        // keep rates inside (0, r_max) so the input clip is locally linear
        inputs.push(random(3, 5, rng).map(|v| 0.5 + 0.4 * v));
        check(&inputs, SpikeMode::Relaxed, rng, move |t, v| {
            let logits = net.logits_tape(&v[..n], v[n], None).unwrap();
            weighted(t, logits, 9)
        })
    });
}

#[test]
fn tape_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(4, 8, &mut rng);
    let run = || {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let y = v.group_norm(4, 1e-5).unwrap().softmax_rows().matmul(v.transpose()).sum();
        let g = y.backward().unwrap().wrt(v);
        (y.item().to_bits(), g.data().iter().map(|d| d.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
