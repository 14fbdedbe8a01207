use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use eqsnn_core::data::write_csv;
use eqsnn_core::pipeline::{
    evaluate, inspect_checkpoint, train_stage, Checkpoint, ConfigMap, Layout, PipelineConfig, Prepared, RunOptions,
    Stage,
};
use eqsnn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "eqsnn", version, about = "Quantile forecasting, gated attention and spiking anomaly scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Eqrnn,
    Gta,
    Snn,
    All,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file (`key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as CSV plus a JSON sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage, or all of them in order.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Dataset CSV; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score validation and test windows and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding the checkpoints; reports are written here too.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_attention: bool,
        #[arg(long)]
        dump_spikes: bool,
    },
    /// Print a checkpoint summary with its parameter tables.
    Inspect { checkpoint: PathBuf },
}

fn load_config(common: &Common) -> Result<(PipelineConfig, ConfigMap)> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut map = ConfigMap::with_defaults(&text)?;
    if let Some(seed) = common.seed {
        map.set("seed", seed)?;
    }
    Ok((PipelineConfig::from_map(&map)?, map))
}

fn prepare(common: &Common, data: Option<&Path>) -> Result<Prepared> {
    let (cfg, map) = load_config(common)?;
    Prepared::load(cfg, map, data)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let (cfg, _) = load_config(&common)?;
            let ds = cfg.data.build()?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_csv(&ds, &out)?;
            println!(
                "wrote {} steps x {} channels to {} ({:.1}% abnormal)",
                ds.length,
                ds.channel_count(),
                out.display(),
                100.0 * ds.abnormal_fraction()
            );
        }
        Command::Train { common, stage, data, out, max_epochs } => {
            let p = prepare(&common, data.as_deref())?;
            let layout = Layout::new(out);
            let opts = RunOptions { max_epochs, ..RunOptions::default() };
            let stages: Vec<Stage> = match stage {
                StageArg::Eqrnn => vec![Stage::Eqrnn],
                StageArg::Gta => vec![Stage::Gta],
                StageArg::Snn => vec![Stage::Snn],
                StageArg::All => Stage::ALL.to_vec(),
            };
            for s in stages {
                let log = train_stage(&p, s, &layout, &opts)?;
                let best = log.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
                println!("{}: {} epochs, best val loss {best:.6}", s.name(), log.records.len());
            }
        }
        Command::Eval { common, data, out, dump_attention, dump_spikes } => {
            let p = prepare(&common, data.as_deref())?;
            let layout = Layout::new(out);
            let opts = RunOptions { dump_attention, dump_spikes, ..RunOptions::default() };
            let e = evaluate(&p, &layout, &opts)?;
            let auc = e.default.auc.map_or_else(|| "absent".to_string(), |a| format!("{a:.4}"));
            println!("test AUC {auc}");
            println!(
                "threshold {:.4}: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4}",
                e.default.threshold, e.default.accuracy, e.default.precision, e.default.recall, e.default.f1
            );
            if let Some(c) = &e.calibrated {
                println!(
                    "calibrated {:.4}: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4}",
                    c.threshold, c.accuracy, c.precision, c.recall, c.f1
                );
            }
            println!("report written to {}", layout.report().display());
        }
        Command::Inspect { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            print!("{}", inspect_checkpoint(&ck)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("EQSNN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore failure: the pool may already exist
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
