use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{FaultSpec, SensorSpec, TimeSeriesDataset};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    length: usize,
    channels: Vec<SensorSpec>,
    faults: Vec<FaultSpec>,
}

/// `data.csv` -> `data.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `t,ch_0,...,ch_{C-1},label` rows plus the JSON sidecar.
pub fn write_csv(dataset: &TimeSeriesDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let c = dataset.channel_count();
    let mut header = vec!["t".to_string()];
    header.extend((0..c).map(|j| format!("ch_{j}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in 0..dataset.length {
        let mut rec = Vec::with_capacity(c + 2);
        rec.push(t.to_string());
        rec.extend(dataset.row(t).iter().map(|v| v.to_string()));
        rec.push(if dataset.labels[t] { "1" } else { "0" }.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        seed: dataset.seed,
        length: dataset.length,
        channels: dataset.channels.clone(),
        faults: dataset.faults.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    let side = sidecar_path(path);
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a dataset written by [`write_csv`]. The sidecar must be present.
pub fn read_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", side.display())))?;
    let c = sidecar.channels.len();

    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() != c + 2 || &header[0] != "t" || &header[c + 1] != "label" {
        return Err(Error::data(format!("{}: expected t, {c} channel columns and label", path.display())));
    }
    let mut samples = Vec::with_capacity(sidecar.length * c);
    let mut labels = Vec::with_capacity(sidecar.length);
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != c + 2 {
            return Err(Error::data(format!("{}: row {line} has {} fields", path.display(), rec.len())));
        }
        for field in rec.iter().skip(1).take(c) {
            samples.push(
                field
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("{}: row {line}: bad value {field:?}", path.display())))?,
            );
        }
        labels.push(match &rec[c + 1] {
            "0" => false,
            "1" => true,
            other => return Err(Error::data(format!("{}: row {line}: bad label {other:?}", path.display()))),
        });
    }
    if labels.len() != sidecar.length {
        return Err(Error::data(format!(
            "{}: {} rows but the sidecar records {}",
            path.display(),
            labels.len(),
            sidecar.length
        )));
    }
    Ok(TimeSeriesDataset {
        channels: sidecar.channels,
        faults: sidecar.faults,
        seed: sidecar.seed,
        length: sidecar.length,
        samples,
        labels,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = GeneratorConfig { length: 600, fault_duration: 20, ..GeneratorConfig::default() }.build().unwrap();
        write_csv(&d, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back, d);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("t,ch_0,ch_1,ch_2,ch_3,ch_4,ch_5,ch_6,ch_7,label\n"));
    }
}
