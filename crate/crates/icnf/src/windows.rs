//! Sequence-length standardization and sliding-window segmentation.

use thiserror::Error;

use crate::data::{Cohort, IcnRecord, Label, CHANNELS};

/// Window length used throughout the pipeline.
pub const WINDOW_LEN: usize = 24;
/// Sliding step.
pub const WINDOW_STEP: usize = 4;
/// Leading timestamps visible to the forecaster.
pub const CONTEXT_LEN: usize = 20;
/// Trailing timestamps to forecast.
pub const TARGET_LEN: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum WindowError {
    #[error("subject {subject}: cannot truncate T={t} to {target} (T < target)")]
    TooShortToTruncate { subject: String, t: usize, target: usize },
    #[error(
        "subject {subject}: cannot replicate T={t} to {target}; single-pass replication covers at most 2T={max}"
    )]
    ReplicationRange {
        subject: String,
        t: usize,
        target: usize,
        max: usize,
    },
    #[error("subject {subject}: T={t} is shorter than the window length {window}")]
    TooShortToSlide { subject: String, t: usize, window: usize },
    #[error("window length {window} is not divisible by the mask denominator {denom}")]
    IndivisibleMask { window: usize, denom: usize },
}

/// Keeps the first `target_len` timestamps.
pub fn truncate(record: &IcnRecord, target_len: usize) -> Result<IcnRecord, WindowError> {
    if record.t_len < target_len {
        return Err(WindowError::TooShortToTruncate {
            subject: record.subject_id.clone(),
            t: record.t_len,
            target: target_len,
        });
    }
    let mut values = Vec::with_capacity(CHANNELS * target_len);
    for c in 0..CHANNELS {
        values.extend_from_slice(&record.channel(c)[..target_len]);
    }
    Ok(record.with_series(target_len, values))
}

/// Extends the series to `target_len` by appending its own prefix.
pub fn replicate(record: &IcnRecord, target_len: usize) -> Result<IcnRecord, WindowError> {
    let t = record.t_len;
    if target_len < t || target_len > 2 * t {
        return Err(WindowError::ReplicationRange {
            subject: record.subject_id.clone(),
            t,
            target: target_len,
            max: 2 * t,
        });
    }
    let extra = target_len - t;
    let mut values = Vec::with_capacity(CHANNELS * target_len);
    for c in 0..CHANNELS {
        let ch = record.channel(c);
        values.extend_from_slice(ch);
        values.extend_from_slice(&ch[..extra]);
    }
    Ok(record.with_series(target_len, values))
}

/// Segmented training windows. Window data is channel-major per window:
/// `data[w][c][t]` with `c < 53`, `t < window_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub window_len: usize,
    pub context_len: usize,
    pub target_len: usize,
    /// (subject_id, start offset) per window.
    pub sources: Vec<(String, usize)>,
    data: Vec<f64>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    #[inline]
    pub fn get(&self, window: usize, channel: usize, t: usize) -> f64 {
        self.data[(window * CHANNELS + channel) * self.window_len + t]
    }

    pub fn window(&self, window: usize) -> &[f64] {
        let stride = CHANNELS * self.window_len;
        &self.data[window * stride..(window + 1) * stride]
    }

    /// Sets one channel of every window to zero; used by the
    /// perturbation analysis.
    pub fn silence_channel(&mut self, channel: usize) {
        assert!(channel < CHANNELS, "channel {channel} out of range");
        for w in 0..self.len() {
            let base = (w * CHANNELS + channel) * self.window_len;
            self.data[base..base + self.window_len].fill(0.0);
        }
    }

    /// Appends all windows of `other` (same geometry).
    pub fn extend_from(&mut self, other: &WindowBatch) {
        assert_eq!(self.window_len, other.window_len);
        self.sources.extend_from_slice(&other.sources);
        self.data.extend_from_slice(&other.data);
    }

    /// Copies the selected windows into a new batch.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        let stride = CHANNELS * self.window_len;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut sources = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.window(i));
            sources.push(self.sources[i].clone());
        }
        WindowBatch {
            window_len: self.window_len,
            context_len: self.context_len,
            target_len: self.target_len,
            sources,
            data,
        }
    }
}

/// Closed-form window count for a series of length `t`.
pub fn window_count(t: usize, window: usize, step: usize) -> usize {
    (t - window) / step + 1
}

/// Sliding-window segmentation; trailing partial windows are dropped.
pub fn slide(record: &IcnRecord, window: usize, step: usize) -> Result<WindowBatch, WindowError> {
    if record.t_len < window {
        return Err(WindowError::TooShortToSlide {
            subject: record.subject_id.clone(),
            t: record.t_len,
            window,
        });
    }
    let n = window_count(record.t_len, window, step);
    let mut data = Vec::with_capacity(n * CHANNELS * window);
    let mut sources = Vec::with_capacity(n);
    for w in 0..n {
        let start = w * step;
        for c in 0..CHANNELS {
            data.extend_from_slice(&record.channel(c)[start..start + window]);
        }
        sources.push((record.subject_id.clone(), start));
    }
    Ok(WindowBatch {
        window_len: window,
        context_len: CONTEXT_LEN.min(window),
        target_len: window - CONTEXT_LEN.min(window),
        sources,
        data,
    })
}

/// Segments every record of a cohort into one combined batch.
pub fn slide_cohort(
    cohort: &Cohort,
    window: usize,
    step: usize,
) -> Result<WindowBatch, WindowError> {
    let mut combined: Option<WindowBatch> = None;
    for record in &cohort.records {
        let batch = slide(record, window, step)?;
        match combined.as_mut() {
            Some(all) => all.extend_from(&batch),
            None => combined = Some(batch),
        }
    }
    Ok(combined.expect("cohort is non-empty"))
}

/// Windows of the records with the given label only.
pub fn slide_class(
    cohort: &Cohort,
    label: Label,
    window: usize,
    step: usize,
) -> Result<WindowBatch, WindowError> {
    let records: Vec<IcnRecord> = cohort
        .records
        .iter()
        .filter(|r| r.label == label)
        .cloned()
        .collect();
    let class_cohort = Cohort { records };
    slide_cohort(&class_cohort, window, step)
}

/// Boolean mask over window positions marking the final
/// `window / denominator` timestamps across all channels. The pipeline
/// masks the final 1/6 of each window, i.e. `mask_tail(len, 6)`.
pub fn mask_tail(window_len: usize, denominator: usize) -> Result<Vec<bool>, WindowError> {
    if !window_len.is_multiple_of(denominator) {
        return Err(WindowError::IndivisibleMask { window: window_len, denom: denominator });
    }
    let masked = window_len / denominator;
    Ok((0..window_len).map(|t| t >= window_len - masked).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_cohort;

    fn record(t_len: usize) -> IcnRecord {
        // Values encode (channel, t) so slices are checkable exactly.
        let values: Vec<f64> = (0..CHANNELS)
            .flat_map(|c| (0..t_len).map(move |t| (c * 1000 + t) as f64))
            .collect();
        IcnRecord::new("w0".into(), Label::Cn, t_len, values).unwrap()
    }

    #[test]
    fn truncate_keeps_prefix() {
        let r = record(194);
        let out = truncate(&r, 137).unwrap();
        assert_eq!(out.t_len, 137);
        for c in 0..CHANNELS {
            for t in 0..137 {
                assert_eq!(out.get(c, t), r.get(c, t));
            }
        }
    }

    #[test]
    fn truncate_to_own_length_is_identity() {
        let r = record(137);
        assert_eq!(truncate(&r, 137).unwrap(), r);
    }

    #[test]
    fn truncate_too_short_errors() {
        let r = record(100);
        assert!(matches!(
            truncate(&r, 137),
            Err(WindowError::TooShortToTruncate { t: 100, target: 137, .. })
        ));
    }

    #[test]
    fn replicate_appends_prefix() {
        let r = record(137);
        let out = replicate(&r, 194).unwrap();
        assert_eq!(out.t_len, 194);
        for c in 0..CHANNELS {
            for t in 0..137 {
                assert_eq!(out.get(c, t), r.get(c, t));
            }
            for k in 0..57 {
                assert_eq!(out.get(c, 137 + k), r.get(c, k));
            }
        }
    }

    #[test]
    fn replicate_identity_and_small_case() {
        let r = record(194);
        assert_eq!(replicate(&r, 194).unwrap(), r);

        let r = record(10);
        let out = replicate(&r, 14).unwrap();
        for c in 0..CHANNELS {
            for k in 0..4 {
                assert_eq!(out.get(c, 10 + k), r.get(c, k));
            }
        }
    }

    #[test]
    fn replicate_beyond_double_errors() {
        let r = record(10);
        assert!(matches!(
            replicate(&r, 21),
            Err(WindowError::ReplicationRange { t: 10, target: 21, max: 20, .. })
        ));
    }

    #[test]
    fn replicate_then_truncate_is_identity() {
        let r = record(137);
        let back = truncate(&replicate(&r, 194).unwrap(), 137).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn window_counts_for_both_scan_lengths() {
        assert_eq!(window_count(137, 24, 4), 29);
        assert_eq!(window_count(194, 24, 4), 43);
        assert_eq!(window_count(24, 24, 4), 1);
    }

    #[test]
    fn slide_produces_contiguous_slices() {
        let r = record(137);
        let batch = slide(&r, 24, 4).unwrap();
        assert_eq!(batch.len(), 29);
        for w in 0..batch.len() {
            let (ref sid, start) = batch.sources[w];
            assert_eq!(sid, "w0");
            assert_eq!(start, w * 4);
            for c in 0..CHANNELS {
                for t in 0..24 {
                    assert_eq!(batch.get(w, c, t), r.get(c, start + t));
                }
            }
        }
    }

    #[test]
    fn slide_whole_series_window() {
        let r = record(24);
        let batch = slide(&r, 24, 4).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.window(0), r.values());
    }

    #[test]
    fn slide_too_short_errors() {
        let r = record(20);
        assert!(matches!(
            slide(&r, 24, 4),
            Err(WindowError::TooShortToSlide { t: 20, window: 24, .. })
        ));
    }

    #[test]
    fn mask_tail_marks_final_sixth() {
        let mask = mask_tail(24, 6).unwrap();
        assert_eq!(mask.len(), 24);
        for (t, &m) in mask.iter().enumerate() {
            assert_eq!(m, t >= 20, "position {t}");
        }

        let mask12 = mask_tail(12, 6).unwrap();
        assert_eq!(mask12.iter().filter(|&&m| m).count(), 2);
        assert!(mask12[10] && mask12[11]);
    }

    #[test]
    fn mask_tail_rejects_indivisible_window() {
        assert_eq!(
            mask_tail(23, 6).unwrap_err(),
            WindowError::IndivisibleMask { window: 23, denom: 6 }
        );
    }

    #[test]
    fn silence_channel_touches_exactly_one_channel() {
        let cohort = synth_cohort(2, 1, 0.5, 5).unwrap();
        let batch = slide_cohort(&cohort, 24, 4).unwrap();
        let mut silenced = batch.clone();
        silenced.silence_channel(7);
        let mut diffs = 0usize;
        for w in 0..batch.len() {
            for c in 0..CHANNELS {
                for t in 0..24 {
                    let (a, b) = (batch.get(w, c, t), silenced.get(w, c, t));
                    if a.to_bits() != b.to_bits() {
                        assert_eq!(c, 7);
                        assert_eq!(b, 0.0);
                        diffs += 1;
                    }
                }
            }
        }
        // Synthetic data is never exactly zero, so every touched cell
        // differs.
        assert_eq!(diffs, batch.len() * 24);
        // Idempotence.
        let mut twice = silenced.clone();
        twice.silence_channel(7);
        assert_eq!(twice, silenced);
    }
}
