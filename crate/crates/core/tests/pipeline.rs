use eqsnn_core::data::Split;
use eqsnn_core::eqrnn::EqrnnNet;
use eqsnn_core::gta::GtaNet;
use eqsnn_core::pipeline::quantiles::MaskedForecast;
use eqsnn_core::pipeline::spiking::{fixed_rows, Joint, SpikingModel, WindowBatch};
use eqsnn_core::pipeline::{classify, mann_whitney_p, metrics, run_pipeline, Layout, Stage};
use eqsnn_core::{PipelineConfig, Prepared, RunOptions, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: &str = "\
data.length = 5000
data.fault_duration = 200
eqrnn.epochs = 6
eqrnn.train_rows = 1500
eqrnn.head_epochs = 4
eqrnn.head_samples = 800
gta.epochs = 2
gta.samples = 400
snn.hidden = 16
snn.t_w = 20
snn.pretrain_epochs = 3
snn.joint_epochs = 1
";

fn small(extra: &str) -> Prepared {
    let (cfg, map) = PipelineConfig::parse(&format!("{SMALL}{extra}")).unwrap();
    Prepared::generate(cfg, map).unwrap()
}

/// Joint objective over freshly initialized networks.
fn joint_losses(p: &Prepared, lambda: f64) -> (f64, f64, Vec<Tensor>, Vec<Tensor>) {
    let net = EqrnnNet::new(p.cfg.eqrnn_config(), 1).unwrap();
    let gta = GtaNet::new(p.cfg.gta.config.clone(), 2).unwrap();
    let model = SpikingModel::new(p, 3).unwrap();
    let idx = p.window_indices(Split::Train);
    let features = vec![vec![0.3; model.snn.config.inputs() - p.cfg.snn.attention_rates]; p.windows.len()];
    let joint = Joint {
        p,
        net: &net,
        gta: &gta,
        model: &model,
        forecast: MaskedForecast::new(&net, p),
        train: WindowBatch::gather(p, &features, &idx),
        val: WindowBatch::gather(p, &features, &idx[..8]),
        lambda,
        dropout: 0.0,
        permute: 0,
        eqrnn_rows: 16,
    };
    let (params, layout) = Joint::params(&net, &gta, &model);
    let batch: Vec<usize> = (0..6).collect();
    let rows = fixed_rows(p, &p.window_indices(Split::Train)[..16]);

    let tape = Tape::new();
    let vars = params.bind(&tape);
    let l = joint.losses(&tape, &vars, &batch, &rows, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = l.total.backward().unwrap();
    let total: Vec<Tensor> = vars.iter().map(|&v| g.wrt(v)).collect();
    let (total_value, eqrnn_value) = (l.total.item(), l.eqrnn.item());

    let tape = Tape::new();
    let vars = params.bind(&tape);
    let l = joint.losses(&tape, &vars, &batch, &rows, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let g = l.eqrnn.backward().unwrap();
    let eqrnn_only: Vec<Tensor> = vars[..layout.spiking].iter().map(|&v| g.wrt(v)).collect();
    (total_value, eqrnn_value, total, eqrnn_only)
}

#[test]
fn zero_lambda_leaves_only_the_forecasting_loss() {
    let p = small("");
    let (total, eqrnn, grads, eqrnn_only) = joint_losses(&p, 0.0);
    assert_eq!(total, eqrnn);
    let shared = eqrnn_only.len();
    for (a, b) in grads[..shared].iter().zip(&eqrnn_only) {
        assert_eq!(a.data(), b.data());
    }
    for g in &grads[shared..] {
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    // with a positive weight the spiking loss does reach the shared encoder
    let (total, eqrnn, grads, eqrnn_only) = joint_losses(&p, 1.0);
    assert!(total > eqrnn);
    assert!(grads[..shared].iter().zip(&eqrnn_only).any(|(a, b)| a.data() != b.data()));
}

fn without_seconds(log: &str) -> Vec<String> {
    log.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

#[test]
fn pipeline_is_deterministic_and_isolated() {
    let p = small("snn.lambda = 0\n");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let opts = RunOptions::default();
    let evals: Vec<_> = dirs.iter().map(|d| run_pipeline(&p, &Layout::new(d.path()), &opts).unwrap()).collect();
    assert_eq!(evals[0], evals[1]);
    let (a, b) = (Layout::new(dirs[0].path()), Layout::new(dirs[1].path()));
    for stage in Stage::ALL {
        assert_eq!(std::fs::read(a.checkpoint(stage)).unwrap(), std::fs::read(b.checkpoint(stage)).unwrap());
        let la = std::fs::read_to_string(a.log(stage)).unwrap();
        let lb = std::fs::read_to_string(b.log(stage)).unwrap();
        assert_eq!(without_seconds(&la), without_seconds(&lb));
    }
    assert_eq!(std::fs::read(a.report()).unwrap(), std::fs::read(b.report()).unwrap());
    assert_eq!(std::fs::read(a.scores()).unwrap(), std::fs::read(b.scores()).unwrap());

    // a zero threshold flags every window
    let (labels, scores) = evals[0].split_scores(Split::Test);
    let pred: Vec<bool> = scores.iter().map(|&s| classify(s, 0.0)).collect();
    assert_eq!(metrics(&labels, &pred, &scores, 0.0).unwrap().recall, 1.0);

    // shuffled labels, closed gates and no joint coupling: scores carry no label information
    let mut shuffled = p.clone();
    shuffled.shuffle_labels(17);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { force_gates: Some(-1e3), ..RunOptions::default() };
    let e = run_pipeline(&shuffled, &Layout::new(dir.path()), &opts).unwrap();
    let (labels, scores) = e.split_scores(Split::Test);
    let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    assert!(!pos.is_empty() && !neg.is_empty());
    let pval = mann_whitney_p(&pos, &neg);
    assert!(pval > 0.01, "p = {pval}");
}
