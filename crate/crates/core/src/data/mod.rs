//! Sensor recordings, windowing, multi-rate decimation, synthetic data,
//! cross-validation splits and class statistics.

mod csv;
mod split;
mod stats;
mod synthetic;
mod window;

pub use self::csv::{load_recordings, parse_recordings, write_windows_csv, CsvFormat, LabelTable};
pub use self::split::{split, Fold, SplitPlan, SplitScheme};
pub use self::stats::{class_stats, counts_of, rebalance_minority, ClassStats};
pub use self::synthetic::{generate_synthetic, largest_remainder, Component, Signature, SyntheticSpec};
pub use self::window::{build_multirate, decimate, make_windows, make_windows_with_offset};

/// Anything carrying a class label and a subject id.
pub trait Labeled {
    fn label(&self) -> usize;
    fn subject(&self) -> &str;
}

/// A contiguous labelled segment of one subject's multi-channel stream.
///
/// `values` is channel-major: `values[c * samples + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub label: usize,
    pub sampling_rate_hz: f64,
    pub channels: usize,
    pub samples: usize,
    pub values: Vec<f64>,
}

/// A fixed-duration cut of a recording, same layout as [`Recording`].
#[derive(Clone, Debug, PartialEq)]
pub struct SensorWindow {
    pub subject_id: String,
    pub label: usize,
    pub sampling_rate_hz: f64,
    pub channels: usize,
    pub samples: usize,
    pub values: Vec<f64>,
}

impl SensorWindow {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.samples..(c + 1) * self.samples]
    }
}

/// One window materialised at every configured rate, highest rate first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiRateSample {
    pub label: usize,
    pub subject_id: String,
    pub windows: Vec<SensorWindow>,
}

impl MultiRateSample {
    pub fn rates_hz(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.sampling_rate_hz).collect()
    }
}

impl Labeled for SensorWindow {
    fn label(&self) -> usize {
        self.label
    }
    fn subject(&self) -> &str {
        &self.subject_id
    }
}

impl Labeled for MultiRateSample {
    fn label(&self) -> usize {
        self.label
    }
    fn subject(&self) -> &str {
        &self.subject_id
    }
}

impl Labeled for Recording {
    fn label(&self) -> usize {
        self.label
    }
    fn subject(&self) -> &str {
        &self.subject_id
    }
}
