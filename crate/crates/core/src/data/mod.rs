//! Synthetic multivariate sensor streams with injected faults, windowing and
//! the chronological train/validation/test split.

mod generate;
mod io;
mod window;

pub use generate::{
    default_channels, default_faults, generate, ChannelKind, FaultKind, FaultSpec, GeneratorConfig, SensorSpec,
    TimeSeriesDataset,
};
pub use io::{read_csv, sidecar_path, write_csv};
pub use window::{split, window, Split, SplitCounts, Window, WindowSet};
