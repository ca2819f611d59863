use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MultiRateSample, Recording, SensorWindow};
use crate::error::{shape_err, Error, Result};

fn extents(rate: f64, window_seconds: f64, stride_seconds: f64) -> Result<(usize, usize)> {
    if !(window_seconds > 0.0) || !(stride_seconds > 0.0) {
        return Err(Error::Parameter(format!(
            "window and stride must be positive, got {window_seconds} s / {stride_seconds} s"
        )));
    }
    let len = (window_seconds * rate).round() as usize;
    let stride = (stride_seconds * rate).round() as usize;
    if len == 0 || stride == 0 {
        return Err(Error::Parameter(format!(
            "window {window_seconds} s or stride {stride_seconds} s is under one sample at {rate} Hz"
        )));
    }
    Ok((len, stride))
}

fn cut(rec: &Recording, start: usize, len: usize) -> SensorWindow {
    let mut values = Vec::with_capacity(rec.channels * len);
    for c in 0..rec.channels {
        values.extend_from_slice(&rec.values[c * rec.samples + start..][..len]);
    }
    SensorWindow {
        subject_id: rec.subject_id.clone(),
        label: rec.label,
        sampling_rate_hz: rec.sampling_rate_hz,
        channels: rec.channels,
        samples: len,
        values,
    }
}

/// Cuts windows of `round(window_seconds * rate)` samples every
/// `round(stride_seconds * rate)` samples, starting at sample 0 of every
/// recording. Tails shorter than a window are dropped.
pub fn make_windows(recordings: &[Recording], window_seconds: f64, stride_seconds: f64) -> Result<Vec<SensorWindow>> {
    windows_from(recordings, window_seconds, stride_seconds, |_| 0)
}

/// Like [`make_windows`], but each recording starts at a seeded random offset
/// in `[0, stride)`.
pub fn make_windows_with_offset(
    recordings: &[Recording],
    window_seconds: f64,
    stride_seconds: f64,
    seed: u64,
) -> Result<Vec<SensorWindow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows_from(recordings, window_seconds, stride_seconds, |stride| rng.random_range(0..stride))
}

fn windows_from(
    recordings: &[Recording],
    window_seconds: f64,
    stride_seconds: f64,
    mut offset: impl FnMut(usize) -> usize,
) -> Result<Vec<SensorWindow>> {
    let mut out = Vec::new();
    for rec in recordings {
        let (len, stride) = extents(rec.sampling_rate_hz, window_seconds, stride_seconds)?;
        let mut start = offset(stride);
        while start + len <= rec.samples {
            out.push(cut(rec, start, len));
            start += stride;
        }
    }
    Ok(out)
}

/// Keeps samples `0, factor, 2 factor, ...` (no anti-alias filtering); the
/// result has `floor(samples / factor)` samples at `rate / factor`.
pub fn decimate(window: &SensorWindow, factor: usize) -> Result<SensorWindow> {
    if factor == 0 {
        return Err(Error::Parameter("decimation factor must be positive".into()));
    }
    let samples = window.samples / factor;
    if samples == 0 {
        return Err(shape_err(
            "decimate",
            format!("{} samples cannot be decimated by {factor}", window.samples),
        ));
    }
    let mut values = Vec::with_capacity(window.channels * samples);
    for c in 0..window.channels {
        let ch = window.channel(c);
        values.extend((0..samples).map(|i| ch[i * factor]));
    }
    Ok(SensorWindow {
        subject_id: window.subject_id.clone(),
        label: window.label,
        sampling_rate_hz: window.sampling_rate_hz / factor as f64,
        channels: window.channels,
        samples,
        values,
    })
}

/// Materialises `window` at `rate / f` for every factor `f`.
pub fn build_multirate(window: &SensorWindow, factors: &[usize]) -> Result<MultiRateSample> {
    if factors.is_empty() {
        return Err(Error::Parameter("at least one decimation factor is required".into()));
    }
    if factors.contains(&0) {
        return Err(Error::Parameter("decimation factor must be positive".into()));
    }
    if factors.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Parameter(format!("decimation factors must increase strictly: {factors:?}")));
    }
    let windows = factors.iter().map(|&f| decimate(window, f)).collect::<Result<Vec<_>>>()?;
    Ok(MultiRateSample { label: window.label, subject_id: window.subject_id.clone(), windows })
}
