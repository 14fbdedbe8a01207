use std::path::Path;

use eqsnn_core::autodiff::softmax_rows;
use eqsnn_core::data::{split, window, GeneratorConfig};
use eqsnn_core::eqrnn::{huber_quantile_loss, pinball_loss, QuantileLevelSet};
use eqsnn_core::gta::{attend, gate, gated_blend};
use eqsnn_core::pipeline::quantiles::{top_mean, QuantileSeries};
use eqsnn_core::pipeline::spiking::permute_blocks;
use eqsnn_core::pipeline::{classify, metrics, roc_auc, Checkpoint};
use eqsnn_core::snn::{layer_forward, lif_step, LifParams, SnnConfig, SnnNet, SpikeTrain};
use eqsnn_core::training::Schedule;
use eqsnn_core::{Error, Stage, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tensor_shape_must_match_data(rows in 1usize..6, cols in 1usize..6, extra in 1usize..4) {
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols]).is_ok());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + extra]).is_err());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols - 1]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one(t in (1usize..6, 1usize..12).prop_flat_map(|(r, c)| matrix(r, c, -50.0, 50.0))) {
        let s = softmax_rows(&t);
        for r in 0..s.rows() {
            let row = s.row_slice(r);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_weights_are_a_distribution(
        (q, k, v) in (1usize..8, 1usize..6, 1usize..5).prop_flat_map(|(w, dk, dv)| {
            (matrix(1, dk, -3.0, 3.0), matrix(w, dk, -3.0, 3.0), matrix(w, dv, -3.0, 3.0))
        })
    ) {
        let (out, weights) = attend(&q, &k, &v).unwrap();
        prop_assert_eq!(weights.len(), k.rows());
        prop_assert!(weights.iter().all(|&w| w >= 0.0));
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        // the output is a convex combination of the value rows
        for c in 0..v.cols() {
            let col: Vec<f64> = (0..v.rows()).map(|r| v.get(r, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.get(0, c) >= lo - 1e-12 && out.get(0, c) <= hi + 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(
        (q, k, v, seed) in (2usize..8, 1usize..6).prop_flat_map(|(w, d)| {
            (matrix(1, d, -3.0, 3.0), matrix(w, d, -3.0, 3.0), matrix(w, 3, -3.0, 3.0), any::<u64>())
        })
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..k.rows()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (out, w) = attend(&q, &k, &v).unwrap();
        let (pout, pw) = attend(&q, &k.select_rows(&perm), &v.select_rows(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((pw[i] - w[p]).abs() <= 1e-12);
        }
        for (a, b) in out.data().iter().zip(pout.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval(
        (h, hb, wg, bg) in (1usize..7).prop_flat_map(|d| {
            (
                prop::collection::vec(-2.0..2.0f64, d),
                prop::collection::vec(-2.0..2.0f64, d),
                matrix(d, 2 * d, -1.0, 1.0),
                prop::collection::vec(-1.0..1.0f64, d),
            )
        })
    ) {
        let g = gate(&h, &hb, &wg, &bg).unwrap();
        prop_assert!(g.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn blend_is_elementwise_convex(
        (g, a, h) in (1usize..10).prop_flat_map(|d| {
            (
                prop::collection::vec(0.0..=1.0f64, d),
                prop::collection::vec(-100.0..100.0f64, d),
                prop::collection::vec(-100.0..100.0f64, d),
            )
        })
    ) {
        let out = gated_blend(&g, &a, &h).unwrap();
        for i in 0..out.len() {
            let (lo, hi) = (a[i].min(h[i]), a[i].max(h[i]));
            prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
        }
        let zeros = vec![0.0; a.len()];
        let ones = vec![1.0; a.len()];
        prop_assert_eq!(gated_blend(&zeros, &a, &h).unwrap(), h.clone());
        prop_assert_eq!(gated_blend(&ones, &a, &h).unwrap(), a.clone());
    }

    #[test]
    fn pinball_equals_max_form(y in -10.0..10.0f64, q in -10.0..10.0f64, alpha in 0.001..0.999f64) {
        let r = y - q;
        let expected = if r >= 0.0 { alpha * r } else { (alpha - 1.0) * r };
        let got = pinball_loss(y, q, alpha).unwrap();
        prop_assert!((got - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn huber_is_continuous_at_delta(delta in 1e-4..5.0f64, alpha in 0.01..0.99f64, sign in prop::bool::ANY, asym in prop::bool::ANY) {
        let r = if sign { delta } else { -delta };
        let at = huber_quantile_loss(r, 0.0, alpha, delta, asym).unwrap();
        let w = if !asym { 1.0 } else if r > 0.0 { alpha } else { 1.0 - alpha };
        let quadratic = w * 0.5 * r * r;
        let linear = w * (delta * r.abs() - 0.5 * delta * delta);
        prop_assert!((quadratic - linear).abs() <= 1e-15 * delta * delta);
        prop_assert!((at - quadratic).abs() <= 1e-15 * delta * delta);
        let outside = r * (1.0 + 1e-9);
        let beyond = huber_quantile_loss(outside, 0.0, alpha, delta, asym).unwrap();
        prop_assert!((beyond - at).abs() <= 2e-9 * delta * delta);
    }

    #[test]
    fn huber_is_convex_in_prediction(
        y in -5.0..5.0f64,
        q1 in -5.0..5.0f64,
        q2 in -5.0..5.0f64,
        delta in 0.01..2.0f64,
        alpha in 0.01..0.99f64,
        asym in prop::bool::ANY,
    ) {
        let l = |q: f64| huber_quantile_loss(y, q, alpha, delta, asym).unwrap();
        let mid = l(0.5 * (q1 + q2));
        prop_assert!(mid <= 0.5 * (l(q1) + l(q2)) + 1e-12);
    }

    #[test]
    fn scaled_asymmetric_huber_approaches_pinball(r in prop_oneof![-5.0..-0.05f64, 0.05..5.0f64], alpha in 0.01..0.99f64) {
        let pin = pinball_loss(r, 0.0, alpha).unwrap();
        let mut last = f64::INFINITY;
        for delta in [1e-2, 1e-3, 1e-4] {
            let h = huber_quantile_loss(r, 0.0, alpha, delta, true).unwrap() / delta;
            let gap = (h - pin).abs();
            prop_assert!(gap <= 0.5 * delta + 1e-12, "delta {} gap {}", delta, gap);
            prop_assert!(gap <= last);
            last = gap;
        }
    }

    #[test]
    fn lif_euler_matches_closed_form(current in 0.1..0.95f64, v0_frac in 0.0..0.5f64, steps in 1usize..600) {
        let p = LifParams { dt: 0.1, ..LifParams::default() };
        let drive = p.r_m * current;
        let v0 = v0_frac * drive;
        let mut v = v0;
        for n in 1..=steps {
            let (next, fired) = lif_step(v, current, &p).unwrap();
            prop_assert!(!fired);
            v = next;
            let t = n as f64 * p.dt;
            let exact = p.v_rest + drive + (v0 - p.v_rest - drive) * (-t / p.tau_m).exp();
            prop_assert!((v - exact).abs() <= 0.01 * exact.abs().max(1e-12), "step {} euler {} exact {}", n, v, exact);
        }
    }

    #[test]
    fn lif_reset_is_exact(current in 0.0..20.0f64, v0 in -1.0..0.999f64, v_reset in -0.5..0.5f64) {
        let p = LifParams { v_reset, ..LifParams::default() };
        let mut v = v0;
        for _ in 0..200 {
            let (next, fired) = lif_step(v, current, &p).unwrap();
            if fired {
                prop_assert_eq!(next.to_bits(), v_reset.to_bits());
            } else {
                prop_assert!(next < p.v_th);
            }
            v = next;
        }
    }

    #[test]
    fn excitability_is_monotone(
        (w, rates) in (1usize..6, 1usize..6).prop_flat_map(|(i, o)| {
            (matrix(i, o, 0.0, 1.0), prop::collection::vec(0.0..2.0f64, i))
        }),
        gain in 1.0..4.0f64,
    ) {
        let p = LifParams::default();
        let bias = vec![0.0; w.cols()];
        let base = layer_forward(&SpikeTrain::constant(&rates, 50), &w, &bias, &p).unwrap().counts();
        let louder: Vec<f64> = rates.iter().map(|r| r * gain).collect();
        let more = layer_forward(&SpikeTrain::constant(&louder, 50), &w, &bias, &p).unwrap().counts();
        for (a, b) in base.iter().zip(&more) {
            prop_assert!(b >= a, "{:?} -> {:?}", base, more);
        }
    }

    #[test]
    fn snn_score_is_a_probability(seed in any::<u64>(), rates in prop::collection::vec(0.0..1.0f64, 6)) {
        let net = SnnNet::new(SnnConfig::new(6, 8), seed).unwrap();
        let s = net.score(&rates).unwrap();
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn raising_threshold_never_raises_recall_or_false_positives(
        data in prop::collection::vec((prop::bool::ANY, 0.0..1.0f64), 2..80),
        t1 in 0.0..1.0f64,
        t2 in 0.0..1.0f64,
    ) {
        let (labels, scores): (Vec<bool>, Vec<f64>) = data.into_iter().unzip();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let at = |t: f64| {
            let pred: Vec<bool> = scores.iter().map(|&s| classify(s, t)).collect();
            metrics(&labels, &pred, &scores, t).unwrap()
        };
        let (a, b) = (at(lo), at(hi));
        prop_assert!(b.recall <= a.recall);
        prop_assert!(b.fp <= a.fp);
        prop_assert_eq!(a.total(), labels.len());
        prop_assert_eq!(b.total(), labels.len());
        if let Some(auc) = a.auc {
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }

    #[test]
    fn auc_matches_pair_counting(data in prop::collection::vec((prop::bool::ANY, 0u8..8), 2..60)) {
        let labels: Vec<bool> = data.iter().map(|d| d.0).collect();
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.1)).collect();
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|p| *p.1).map(|p| *p.0).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|p| !*p.1).map(|p| *p.0).collect();
        match roc_auc(&labels, &scores) {
            None => prop_assert!(pos.is_empty() || neg.is_empty()),
            Some(auc) => {
                let mut wins = 0.0;
                for a in &pos {
                    for b in &neg {
                        wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    }
                }
                let expected = wins / (pos.len() * neg.len()) as f64;
                prop_assert!((auc - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn splits_cover_every_window_once(n in 3usize..5000) {
        let s = split(n, (0.6, 0.2, 0.2));
        if let Ok(s) = s {
            prop_assert_eq!(s.total(), n);
            prop_assert!(s.train >= 1 && s.val >= 1 && s.test >= 1);
        }
    }

    #[test]
    fn levels_must_strictly_increase(levels in prop::collection::vec(0.001..0.999f64, 1..12)) {
        let increasing = levels.windows(2).all(|w| w[0] < w[1]);
        prop_assert_eq!(QuantileLevelSet::new(levels.clone()).is_ok(), increasing);
        let mut sorted = levels;
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        prop_assert!(QuantileLevelSet::new(sorted).is_ok());
    }

    #[test]
    fn checkpoint_round_trip(
        tensors in prop::collection::vec((1usize..5, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c, -1e3, 1e3)), 1..5),
        seed in any::<u64>(),
        digest in prop::array::uniform32(any::<u8>()),
    ) {
        let mut ck = Checkpoint::new(Stage::Gta, digest, seed);
        for (i, t) in tensors.iter().enumerate() {
            ck.push(format!("t{i}"), t);
        }
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.digest, digest);
        for (i, t) in tensors.iter().enumerate() {
            let got = back.tensor(&format!("t{i}")).unwrap();
            prop_assert_eq!(got.dims(), t.dims());
            for (a, b) in got.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn top_mean_is_mean_of_largest(values in prop::collection::vec(-10.0..10.0f64, 1..40), fraction in 0.01..=1.0f64) {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
        let expected = sorted[..k].iter().sum::<f64>() / k as f64;
        let got = top_mean(values.clone(), fraction);
        prop_assert!((got - expected).abs() <= 1e-12);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!(got >= mean - 1e-12);
        prop_assert!((top_mean(values.clone(), 1.0) - mean).abs() <= 1e-12);
    }

    #[test]
    fn permuted_blocks_keep_block_contents(blocks in 1usize..8, width in 1usize..5, seed in any::<u64>()) {
        let f: Vec<f64> = (0..blocks * width).map(|i| i as f64).collect();
        let g = permute_blocks(&f, blocks, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(g.len(), f.len());
        let mut seen: Vec<usize> = g.chunks(width).map(|c| {
            let b = c[0] as usize / width;
            assert!(c.iter().enumerate().all(|(j, &x)| x as usize == b * width + j));
            b
        }).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..blocks).collect::<Vec<_>>());
    }

    #[test]
    fn crossing_rate_counts_unsorted_points(
        refined in prop::collection::vec(prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 12), 4), 1..4),
        lead in 0usize..3,
    ) {
        let mut refined = refined;
        for levels in &mut refined {
            for q in levels.iter_mut() {
                for v in q.iter_mut().take(lead) {
                    *v = f64::NAN;
                }
            }
        }
        let series = QuantileSeries { forecast: vec![], refined: refined.clone() };
        let mut crossed = 0;
        for levels in &refined {
            for t in lead..12 {
                let column: Vec<f64> = levels.iter().map(|q| q[t]).collect();
                let mut sorted = column.clone();
                sorted.sort_by(f64::total_cmp);
                if sorted != column {
                    crossed += 1;
                }
            }
        }
        let expected = crossed as f64 / (refined.len() * (12 - lead)) as f64;
        prop_assert!((series.crossing_rate() - expected).abs() < 1e-15);
    }
}

#[test]
fn top_mean_of_nothing_is_zero() {
    assert_eq!(top_mean(vec![], 0.5), 0.0);
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let mut ck = Checkpoint::new(Stage::Snn, [1; 32], 3);
    ck.push("w", &Tensor::row(vec![1.0, 2.0]));
    let mut bytes = ck.to_bytes();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    match Checkpoint::from_bytes(&bytes, Path::new("mem")) {
        Err(Error::Version { found: 99, .. }) => {}
        other => panic!("expected a version error, got {other:?}"),
    }
    let mut flipped = ck.to_bytes();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped, Path::new("mem")), Err(Error::Corrupt { .. })));
}

#[test]
fn schedule_matches_closed_form_up_to_epoch_1000() {
    for (s, initial, factor, interval) in [(Schedule::eqrnn(), 5e-4, 10.0, 80), (Schedule::snn(), 1e-3, 2.0, 50)] {
        let mut expected = initial;
        for epoch in 0..=1000usize {
            if epoch > 0 && epoch % interval == 0 {
                expected /= factor;
            }
            let got = s.rate(epoch);
            assert!((got - expected).abs() <= 1e-12 * expected, "epoch {epoch}: {got} vs {expected}");
        }
    }
}

fn small_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig { length: 4000, fault_duration: 150, seed, ..GeneratorConfig::default() }
}

#[test]
fn labels_count_fault_durations_and_generation_is_pure() {
    for seed in 0..8 {
        let cfg = small_generator(seed);
        let a = cfg.build().unwrap();
        let b = cfg.build().unwrap();
        assert_eq!(a, b);
        let abnormal = a.labels.iter().filter(|&&l| l).count();
        let total: usize = a.faults.iter().map(|f| f.duration).sum();
        assert_eq!(abnormal, total, "seed {seed}");
        for t in 0..a.length {
            assert_eq!(a.labels[t], a.faults.iter().any(|f| f.contains(t)));
        }
    }
    assert_ne!(small_generator(1).build().unwrap().samples, small_generator(2).build().unwrap().samples);
}

#[test]
fn splits_are_chronological() {
    let ds = small_generator(5).build().unwrap();
    let mut ws = window(&ds, 32, 8, &[1]).unwrap();
    ws.assign_split((0.6, 0.2, 0.2)).unwrap();
    assert_eq!(ws.split.total(), ws.len());
    let starts = |s| ws.indices(s).map(|i| ws.windows[i].start).collect::<Vec<_>>();
    use eqsnn_core::data::Split;
    let (tr, va, te) = (starts(Split::Train), starts(Split::Val), starts(Split::Test));
    assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());
    assert!(tr.iter().max() < va.iter().min());
    assert!(va.iter().max() < te.iter().min());
}
