//! Human-readable checkpoint summaries.

use std::fmt::Write as _;

use super::checkpoint::{Checkpoint, VERSION};
use crate::eqrnn::net::{PUBLISHED_ENCODER_COUNTS, PUBLISHED_ENCODER_TOTAL};
use crate::error::Result;
use crate::nn::layer_param_count;
use crate::snn::snn_param_count;

/// `(in, out)` of each `{prefix}{i}.weight` tensor, in layer order.
pub fn stack_dims(ck: &Checkpoint, prefix: &str) -> Vec<(usize, usize)> {
    (0..).map_while(|i| ck.tensor(&format!("{prefix}{i}.weight")).ok()).map(|t| t.dims()).collect()
}

/// Dense parameter counts of a layer stack.
pub fn stack_counts(dims: &[(usize, usize)]) -> Vec<usize> {
    dims.iter().map(|&(i, o)| layer_param_count(i, o)).collect()
}

fn encoder_prefix(ck: &Checkpoint) -> Option<&'static str> {
    ["net.", "eqrnn."].into_iter().find(|p| ck.tensor(&format!("{p}encoder.0.weight")).is_ok())
}

/// Summary lines for a checkpoint: header, tensors, and parameter tables
/// for whatever networks it contains.
pub fn inspect_checkpoint(ck: &Checkpoint) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "stage = {}", ck.stage.name());
    let _ = writeln!(s, "version = {VERSION}");
    let _ = writeln!(s, "seed = {}", ck.seed);
    let _ = writeln!(s, "digest = {}", hex::encode(ck.digest));
    for (k, v) in &ck.meta {
        let _ = writeln!(s, "meta.{k} = {v}");
    }
    let _ = writeln!(s, "tensors = {}", ck.tensors.len());
    let _ = writeln!(s, "scalars = {}", ck.scalar_count());

    if let Some(p) = encoder_prefix(ck) {
        let enc = stack_dims(ck, &format!("{p}encoder."));
        let dec = stack_dims(ck, &format!("{p}decoder."));
        let enc_counts = stack_counts(&enc);
        let dec_counts = stack_counts(&dec);
        let paper = enc.len() == PUBLISHED_ENCODER_COUNTS.len() && enc[0].0 == 70;
        let _ = writeln!(s, "\nencoder layer      in    out     params{}", if paper { "  published" } else { "" });
        for (i, ((a, b), n)) in enc.iter().zip(&enc_counts).enumerate() {
            let _ = write!(s, "  {:>2}           {:>6} {:>6} {:>10}", i + 1, a, b, n);
            if paper {
                let published = PUBLISHED_ENCODER_COUNTS[i];
                let mark = if published == *n { "" } else { "  MISMATCH" };
                let _ = write!(s, " {published:>10}{mark}");
            }
            s.push('\n');
        }
        let enc_total: usize = enc_counts.iter().sum();
        let _ = writeln!(s, "encoder.total = {enc_total}");
        if paper {
            let _ = writeln!(
                s,
                "encoder.published_total = {PUBLISHED_ENCODER_TOTAL} (formula total differs by {})",
                enc_total as i64 - PUBLISHED_ENCODER_TOTAL as i64
            );
            for (i, (n, published)) in enc_counts.iter().zip(PUBLISHED_ENCODER_COUNTS).enumerate() {
                if *n != published {
                    let _ =
                        writeln!(s, "note: layer {} formula gives {n}, the published table states {published}", i + 1);
                }
            }
        }
        let _ = writeln!(s, "decoder layer      in    out     params");
        for (i, ((a, b), n)) in dec.iter().zip(&dec_counts).enumerate() {
            let _ = writeln!(s, "  {:>2}           {:>6} {:>6} {:>10}", i + 1, a, b, n);
        }
        let _ = writeln!(s, "decoder.total = {}", dec_counts.iter().sum::<usize>());
    }

    if let (Ok(w1), Ok(w2), Ok(w3)) =
        (ck.tensor("snn.lif.0.weight"), ck.tensor("snn.lif.1.weight"), ck.tensor("snn.readout.weight"))
    {
        let layers = vec![w1.rows(), w2.rows(), w3.rows(), w3.cols()];
        let _ = writeln!(s, "snn.layers = {layers:?}");
        let _ = writeln!(s, "snn.total = {}", snn_param_count(&layers)?);
    }

    let heads = ck.tensors.iter().filter(|(n, _)| n.starts_with("stage") && n.ends_with("layer.0.weight")).count();
    if heads > 0 {
        let _ = writeln!(s, "quantile_heads = {heads}");
    }
    Ok(s)
}
