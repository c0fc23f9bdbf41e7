//! Series ingestion, chronological splitting, standardization, patching, and
//! (lookback, horizon) window emission.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

/// Multivariate series, channel-major storage, with optional chronological
/// split indices. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesFrame {
    /// values[channel][t]
    pub values: Vec<Vec<f64>>,
    pub timestamps: Option<Vec<String>>,
    /// (train_end, val_end); train = [0, train_end), val = [train_end, val_end),
    /// test = [val_end, length).
    pub split: Option<(usize, usize)>,
}

impl SeriesFrame {
    pub fn from_channels(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(Error::EmptySeries);
        }
        let len = values[0].len();
        for ch in &values {
            assert_eq!(ch.len(), len, "ragged channels");
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "series ingestion".into(),
                    index: i,
                });
            }
        }
        Ok(SeriesFrame {
            values,
            timestamps: None,
            split: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn length(&self) -> usize {
        self.values[0].len()
    }

    /// Content hash, used for train/eval disjointness contracts.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for ch in &self.values {
            for v in ch {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn split_ranges(&self) -> Option<[(usize, usize); 3]> {
        self.split.map(|(a, b)| [(0, a), (a, b), (b, self.length())])
    }
}

/// Which chronological split a window set is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel train-split statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Non-overlapping patch view of one segment.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub patch_length: usize,
    pub patches: Vec<Vec<f64>>,
    pub remainder: usize,
}

/// (history, future) pairs for one channel and split.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    /// (history values, future values), both contiguous in time; future
    /// starts exactly where history ends.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Load a CSV with a header row; `timestamp_column` (when given) must be
/// monotonically increasing under string comparison of equal-format stamps.
pub fn load_series_csv(
    path: &Path,
    value_columns: &[&str],
    timestamp_column: Option<&str>,
) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let value_idx: Vec<usize> = value_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let ts_idx = timestamp_column.map(col_index).transpose()?;

    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); value_idx.len()];
    let mut timestamps: Vec<String> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (ch, &idx) in value_idx.iter().enumerate() {
            let raw = record.get(idx).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| Error::BadValue {
                row,
                column: value_columns[ch].to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::BadValue {
                    row,
                    column: value_columns[ch].to_string(),
                });
            }
            channels[ch].push(v);
        }
        if let Some(idx) = ts_idx {
            let stamp = record.get(idx).unwrap_or("").to_string();
            if let Some(prev) = timestamps.last() {
                if stamp <= *prev {
                    return Err(Error::NonMonotonicTimestamps(row));
                }
            }
            timestamps.push(stamp);
        }
    }
    let mut frame = SeriesFrame::from_channels(channels)?;
    if ts_idx.is_some() {
        frame.timestamps = Some(timestamps);
    }
    Ok(frame)
}

/// Export a frame back to CSV with the same layout (debug aid).
pub fn write_series_csv(frame: &SeriesFrame, path: &Path, value_columns: &[&str]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(value_columns)?;
    for t in 0..frame.length() {
        let row: Vec<String> = frame.values.iter().map(|ch| ch[t].to_string()).collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Set split indices from (train, val, test) fractions.
pub fn chronological_split(
    frame: &SeriesFrame,
    fractions: (f64, f64, f64),
    min_window: usize,
) -> Result<SeriesFrame> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::BadSplitFractions(vec![a, b, c]));
    }
    let len = frame.length();
    let train_end = (len as f64 * a).round() as usize;
    let val_end = (len as f64 * (a + b)).round() as usize;
    split_at(frame, train_end, val_end, min_window)
}

/// Set explicit split indices (e.g. benchmark-standard sample counts).
pub fn split_at(
    frame: &SeriesFrame,
    train_end: usize,
    val_end: usize,
    min_window: usize,
) -> Result<SeriesFrame> {
    let len = frame.length();
    if !(0 < train_end && train_end < val_end && val_end <= len) {
        return Err(Error::WindowInfeasible(format!(
            "split indices ({train_end}, {val_end}) invalid for length {len}"
        )));
    }
    for (name, span) in [
        ("train", train_end),
        ("val", val_end - train_end),
        ("test", len - val_end),
    ] {
        if span < min_window {
            return Err(Error::WindowInfeasible(format!(
                "{name} split has {span} samples, needs at least {min_window}"
            )));
        }
    }
    let mut out = frame.clone();
    out.split = Some((train_end, val_end));
    Ok(out)
}

/// Compute train-split statistics and return the standardized frame.
///
/// `clamp_constant` replaces a zero train-split std with 1 instead of
/// rejecting the channel.
pub fn standardize(frame: &SeriesFrame, clamp_constant: bool) -> Result<(SeriesFrame, NormStats)> {
    let train_end = frame.split.map(|(a, _)| a).unwrap_or(frame.length());
    let mut mean = Vec::with_capacity(frame.channels());
    let mut std = Vec::with_capacity(frame.channels());
    for (ch, values) in frame.values.iter().enumerate() {
        let train = &values[..train_end];
        let m = train.iter().sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / train.len() as f64;
        let s = var.sqrt();
        if s == 0.0 && !clamp_constant {
            return Err(Error::ConstantChannel(ch));
        }
        mean.push(m);
        std.push(if s == 0.0 { 1.0 } else { s });
    }
    let stats = NormStats { mean, std };
    let mut out = frame.clone();
    for (ch, values) in out.values.iter_mut().enumerate() {
        for v in values.iter_mut() {
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
    }
    Ok((out, stats))
}

/// Invert standardization for one channel's values.
pub fn destandardize(values: &[f64], stats: &NormStats, channel: usize) -> Vec<f64> {
    values
        .iter()
        .map(|v| v * stats.std[channel] + stats.mean[channel])
        .collect()
}

/// Split a segment into floor(len / patch_len) whole patches.
pub fn segment_patches(segment: &[f64], patch_len: usize) -> Result<PatchSequence> {
    assert!(patch_len >= 1);
    if patch_len > segment.len() {
        return Err(Error::EmptyPatchSequence {
            patch_len,
            segment_len: segment.len(),
        });
    }
    let n = segment.len() / patch_len;
    let patches = (0..n)
        .map(|i| segment[i * patch_len..(i + 1) * patch_len].to_vec())
        .collect();
    Ok(PatchSequence {
        patch_length: patch_len,
        patches,
        remainder: segment.len() - n * patch_len,
    })
}

/// Emit (lookback, horizon) windows for one channel on one split. Windows
/// never cross the split boundary.
pub fn make_windows(
    frame: &SeriesFrame,
    channel: usize,
    split: Split,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet> {
    assert!(stride >= 1);
    let (start, end) = match (frame.split, split) {
        (Some((a, _)), Split::Train) => (0, a),
        (Some((a, b)), Split::Val) => (a, b),
        (Some((_, b)), Split::Test) => (b, frame.length()),
        (None, _) => (0, frame.length()),
    };
    let span = end - start;
    let need = lookback + horizon;
    if span < need {
        return Err(Error::WindowInfeasible(format!(
            "split of {span} samples cannot fit lookback {lookback} + horizon {horizon} (needs >= {need})"
        )));
    }
    let values = &frame.values[channel];
    let count = (span - need) / stride + 1;
    let pairs = (0..count)
        .map(|i| {
            let s = start + i * stride;
            (
                values[s..s + lookback].to_vec(),
                values[s + lookback..s + need].to_vec(),
            )
        })
        .collect();
    Ok(WindowSet {
        lookback,
        horizon,
        stride,
        pairs,
    })
}
