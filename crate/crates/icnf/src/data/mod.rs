//! Dataset schema, normalization, disk format, and the seeded synthetic
//! cohort generator.
//!
//! Every record is one subject's independent-component time-course
//! matrix: 53 channels by T timestamps, stored channel-major. Real-schema
//! scans are either regular (T=137) or extended (T=194).

mod io;
mod synth;

pub use io::{load_cohort, save_cohort};
pub use synth::{synth_cohort, synth_cohort_with, SynthParams, DESIGNATED_CHANNELS};

use thiserror::Error;

/// Channels per record, fixed by the component template.
pub const CHANNELS: usize = 53;
/// Regular scan length.
pub const T_REGULAR: usize = 137;
/// Extended scan length.
pub const T_EXTENDED: usize = 194;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("subject {subject}: expected {expected} channels, found {found}")]
    ChannelCount {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("subject {subject}: non-finite value at channel {channel}, t={t}")]
    NonFinite {
        subject: String,
        channel: usize,
        t: usize,
    },
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("subject {subject}: T={t} not in the declared set {allowed:?}")]
    BadLength {
        subject: String,
        t: usize,
        allowed: Vec<usize>,
    },
    #[error("subject {subject}: channel {channel} is constant (std <= 1e-12), cannot z-score")]
    ConstantChannel { subject: String, channel: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("label `{found}` is not allowed; expected one of CN, AD")]
    BadLabel { found: String },
    #[error("series file {path}: {msg}")]
    SeriesFormat { path: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("synthetic cohort requires positive class counts")]
    EmptyClass,
}

/// Diagnosis label for the binary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Cn,
    Ad,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Cn => "CN",
            Label::Ad => "AD",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "CN" => Ok(Label::Cn),
            "AD" => Ok(Label::Ad),
            other => Err(DataError::BadLabel { found: other.to_string() }),
        }
    }

    /// Target value for the classifier: AD = 1, CN = 0.
    pub fn target(&self) -> f64 {
        match self {
            Label::Cn => 0.0,
            Label::Ad => 1.0,
        }
    }
}

/// One subject's channel-major series: values[c * t_len + t].
#[derive(Debug, Clone, PartialEq)]
pub struct IcnRecord {
    pub subject_id: String,
    pub label: Label,
    pub t_len: usize,
    values: Vec<f64>,
}

impl IcnRecord {
    pub fn new(
        subject_id: String,
        label: Label,
        t_len: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if values.len() != CHANNELS * t_len {
            return Err(DataError::ChannelCount {
                subject: subject_id,
                expected: CHANNELS,
                found: values.len().checked_div(t_len).unwrap_or(0),
            });
        }
        let record = IcnRecord { subject_id, label, t_len, values };
        record.check_finite()?;
        Ok(record)
    }

    fn check_finite(&self) -> Result<(), DataError> {
        for c in 0..CHANNELS {
            for t in 0..self.t_len {
                if !self.get(c, t).is_finite() {
                    return Err(DataError::NonFinite {
                        subject: self.subject_id.clone(),
                        channel: c,
                        t,
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, channel: usize, t: usize) -> f64 {
        self.values[channel * self.t_len + t]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.t_len..(channel + 1) * self.t_len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same subject and label with a new series of length `t_len`.
    pub fn with_series(&self, t_len: usize, values: Vec<f64>) -> IcnRecord {
        debug_assert_eq!(values.len(), CHANNELS * t_len);
        IcnRecord {
            subject_id: self.subject_id.clone(),
            label: self.label,
            t_len,
            values,
        }
    }
}

/// Per-subject, per-channel z-scoring with the population std.
pub fn zscore(record: &IcnRecord) -> Result<IcnRecord, DataError> {
    let t_len = record.t_len;
    let mut values = Vec::with_capacity(CHANNELS * t_len);
    for c in 0..CHANNELS {
        let ch = record.channel(c);
        let mean = ch.iter().sum::<f64>() / t_len as f64;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t_len as f64;
        let std = var.sqrt();
        if std <= 1e-12 {
            return Err(DataError::ConstantChannel {
                subject: record.subject_id.clone(),
                channel: c,
            });
        }
        values.extend(ch.iter().map(|&v| (v - mean) / std));
    }
    Ok(record.with_series(t_len, values))
}

/// The seven anatomical domains covering the 53 components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Subcortical,
    Auditory,
    Sensorimotor,
    Visual,
    CognitiveControl,
    DefaultMode,
    Cerebellar,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Subcortical => "subcortical",
            Domain::Auditory => "auditory",
            Domain::Sensorimotor => "sensorimotor",
            Domain::Visual => "visual",
            Domain::CognitiveControl => "cognitive-control",
            Domain::DefaultMode => "default-mode",
            Domain::Cerebellar => "cerebellar",
        }
    }
}

/// (domain, component count) in template order; counts sum to 53.
pub const DOMAIN_COUNTS: [(Domain, usize); 7] = [
    (Domain::Subcortical, 5),
    (Domain::Auditory, 2),
    (Domain::Sensorimotor, 9),
    (Domain::Visual, 9),
    (Domain::CognitiveControl, 17),
    (Domain::DefaultMode, 7),
    (Domain::Cerebellar, 4),
];

/// Domain of channel `index` (0..53).
pub fn domain_of(index: usize) -> Domain {
    assert!(index < CHANNELS, "channel index {index} out of range");
    let mut upto = 0;
    for (domain, count) in DOMAIN_COUNTS {
        upto += count;
        if index < upto {
            return domain;
        }
    }
    unreachable!("DOMAIN_COUNTS covers 0..53")
}

/// An ordered collection of records; ordering is by subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<IcnRecord>,
}

impl Cohort {
    /// Validates uniqueness and sorts by subject id.
    pub fn new(mut records: Vec<IcnRecord>) -> Result<Self, DataError> {
        records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        for pair in records.windows(2) {
            if pair[0].subject_id == pair[1].subject_id {
                return Err(DataError::DuplicateSubject(pair[0].subject_id.clone()));
            }
        }
        Ok(Cohort { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Applies z-scoring to every record.
    pub fn zscored(&self) -> Result<Cohort, DataError> {
        let records = self
            .records
            .iter()
            .map(zscore)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Cohort { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_from_channel(ch: &[f64]) -> IcnRecord {
        // One interesting channel, the rest filled with a ramp to stay
        // non-constant.
        let t_len = ch.len();
        let mut values = Vec::with_capacity(CHANNELS * t_len);
        values.extend_from_slice(ch);
        for c in 1..CHANNELS {
            values.extend((0..t_len).map(|t| (t as f64) + (c as f64) * 0.1));
        }
        IcnRecord::new("s0".into(), Label::Cn, t_len, values).unwrap()
    }

    #[test]
    fn domain_counts_sum_to_53() {
        let total: usize = DOMAIN_COUNTS.iter().map(|(_, c)| c).sum();
        assert_eq!(total, CHANNELS);
    }

    #[test]
    fn domain_lookup_boundaries() {
        assert_eq!(domain_of(0), Domain::Subcortical);
        assert_eq!(domain_of(4), Domain::Subcortical);
        assert_eq!(domain_of(5), Domain::Auditory);
        assert_eq!(domain_of(6), Domain::Auditory);
        assert_eq!(domain_of(7), Domain::Sensorimotor);
        assert_eq!(domain_of(24), Domain::Visual);
        assert_eq!(domain_of(25), Domain::CognitiveControl);
        assert_eq!(domain_of(41), Domain::CognitiveControl);
        assert_eq!(domain_of(42), Domain::DefaultMode);
        assert_eq!(domain_of(49), Domain::Cerebellar);
        assert_eq!(domain_of(52), Domain::Cerebellar);
    }

    #[test]
    fn zscore_hand_computed_example() {
        // channel [1,2,3]: population std = sqrt(2/3), z = (x-2)/std
        let record = record_from_channel(&[1.0, 2.0, 3.0]);
        let z = zscore(&record).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (got, want) in z.channel(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zscore_is_idempotent() {
        let record = record_from_channel(&[0.3, -1.2, 4.0, 2.2, -0.5]);
        let once = zscore(&record).unwrap();
        let twice = zscore(&once).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_normalizes_mean_and_std() {
        let record = record_from_channel(&[10.0, 20.0, 15.0, 12.0, 99.0, -3.0]);
        let z = zscore(&record).unwrap();
        for c in 0..CHANNELS {
            let ch = z.channel(c);
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "channel {c} std {}", var.sqrt());
        }
    }

    #[test]
    fn zscore_rejects_constant_channel() {
        let record = record_from_channel(&[5.0, 5.0, 5.0]);
        match zscore(&record) {
            Err(DataError::ConstantChannel { channel: 0, .. }) => {}
            other => panic!("expected ConstantChannel, got {other:?}"),
        }
    }

    #[test]
    fn cohort_rejects_duplicate_subjects() {
        let a = record_from_channel(&[1.0, 2.0, 3.0]);
        let b = record_from_channel(&[4.0, 5.0, 6.0]);
        assert!(matches!(
            Cohort::new(vec![a, b]),
            Err(DataError::DuplicateSubject(_))
        ));
    }

    #[test]
    fn cohort_orders_by_subject_id() {
        let mk = |id: &str| {
            let mut r = record_from_channel(&[1.0, 2.0, 3.0]);
            r.subject_id = id.to_string();
            r
        };
        let cohort = Cohort::new(vec![mk("s2"), mk("s0"), mk("s1")]).unwrap();
        let ids: Vec<&str> = cohort.records.iter().map(|r| r.subject_id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s2"]);
    }
}
