use serde::{Deserialize, Serialize};

use super::generate::TimeSeriesDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One window `[start, start + len)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub abnormal: bool,
    /// channel vector at `end - 1 + h` for each configured horizon `h > 0`
    pub targets: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

/// Windows over a dataset together with their split assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub window_len: usize,
    pub stride: usize,
    pub horizons: Vec<usize>,
    pub windows: Vec<Window>,
    pub split: SplitCounts,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn end(&self, index: usize) -> usize {
        self.windows[index].start + self.window_len
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        self.split.range(split)
    }

    pub fn labels(&self, split: Split) -> Vec<bool> {
        self.windows[self.indices(split)].iter().map(|w| w.abnormal).collect()
    }

    /// Splits the windows chronologically by `fractions`.
    pub fn assign_split(&mut self, fractions: (f64, f64, f64)) -> Result<()> {
        self.split = split(self.windows.len(), fractions)?;
        Ok(())
    }

    /// First time step not covered by any training window.
    pub fn train_end(&self) -> usize {
        if self.split.train == 0 {
            0
        } else {
            self.end(self.split.train - 1)
        }
    }
}

/// Slides a window of `window_len` with `stride`; the number of windows is
/// `floor((length - window_len - max_horizon) / stride) + 1`. All windows
/// start out in the training split; see [`WindowSet::assign_split`].
pub fn window(dataset: &TimeSeriesDataset, window_len: usize, stride: usize, horizons: &[usize]) -> Result<WindowSet> {
    if window_len == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    if window_len + max_h > dataset.length {
        return Err(Error::config(format!(
            "window of {window_len} steps plus horizon {max_h} exceeds series length {}",
            dataset.length
        )));
    }
    let count = (dataset.length - window_len - max_h) / stride + 1;
    let windows = (0..count)
        .map(|k| {
            let start = k * stride;
            let end = start + window_len;
            Window {
                start,
                abnormal: dataset.labels[start..end].iter().any(|&l| l),
                targets: horizons.iter().filter(|&&h| h > 0).map(|&h| dataset.row(end - 1 + h).to_vec()).collect(),
            }
        })
        .collect::<Vec<_>>();
    let split = SplitCounts { train: windows.len(), val: 0, test: 0 };
    Ok(WindowSet { window_len, stride, horizons: horizons.to_vec(), windows, split })
}

/// Chronological split of `n` windows. Validation and test counts are
/// floor-rounded (at least one each) and the remainder goes to training.
pub fn split(n: usize, fractions: (f64, f64, f64)) -> Result<SplitCounts> {
    let (tr, va, te) = fractions;
    if [tr, va, te].iter().any(|f| !(*f > 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    if n < 3 {
        return Err(Error::config(format!("need at least 3 windows to split, got {n}")));
    }
    let val = ((va * n as f64 + 1e-9).floor() as usize).max(1);
    let test = ((te * n as f64 + 1e-9).floor() as usize).max(1);
    if val + test >= n {
        return Err(Error::config(format!("split of {n} windows leaves no training windows")));
    }
    Ok(SplitCounts { train: n - val - test, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChannelKind;
    use crate::data::{generate, SensorSpec};

    fn flat(length: usize) -> TimeSeriesDataset {
        let spec = SensorSpec {
            id: 0,
            kind: ChannelKind::Analog,
            amplitudes: vec![],
            periods: vec![],
            phases: vec![],
            offset: 0.0,
            noise_sigma: 0.0,
        };
        generate(&[spec], &[], length, 0).unwrap()
    }

    #[test]
    fn counts() {
        let mut one = window(&flat(10), 10, 1, &[0]).unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(one.assign_split((0.6, 0.2, 0.2)), Err(Error::Config(_))));
        assert_eq!(window(&flat(12), 4, 4, &[0]).unwrap().len(), 3);
        assert_eq!(window(&flat(100), 10, 5, &[3]).unwrap().len(), (100 - 10 - 3) / 5 + 1);
        assert!(matches!(window(&flat(5), 6, 1, &[0]), Err(Error::Config(_))));
    }

    #[test]
    fn all_normal_windows() {
        let mut w = window(&flat(200), 16, 4, &[1]).unwrap();
        w.assign_split((0.6, 0.2, 0.2)).unwrap();
        assert_eq!(w.split.total(), w.len());
        assert!(w.windows.iter().all(|w| !w.abnormal));
    }

    #[test]
    fn split_examples() {
        let c = |n| {
            let s = split(n, (0.6, 0.2, 0.2)).unwrap();
            (s.train, s.val, s.test)
        };
        assert_eq!(c(100), (60, 20, 20));
        assert_eq!(c(10), (6, 2, 2));
        assert_eq!(c(3), (1, 1, 1));
        assert!(matches!(split(2, (0.6, 0.2, 0.2)), Err(Error::Config(_))));
        assert!(split(10, (0.5, 0.2, 0.2)).is_err());
    }
}
