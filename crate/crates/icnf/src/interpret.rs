//! Perturbation-based per-class channel sensitivity of a trained
//! masked-reconstruction forecaster: silence one channel everywhere,
//! re-evaluate the masked-reconstruction loss, and report the percent
//! change per class.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{domain_of, Cohort, Label, CHANNELS};
use crate::forecast::{window_tensor, BrainLm, ForecastError};
use crate::numerics::Tape;
use crate::seeds::mix3;
use crate::windows::{
    mask_tail, slide_class, WindowBatch, WindowError, WINDOW_LEN, WINDOW_STEP,
};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("class {0} has no records")]
    EmptyClass(&'static str),
    #[error("channel {0} out of range (0..53)")]
    ChannelRange(usize),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

/// Which windows the sensitivity pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalScope {
    /// Every sliding window of the class (default).
    All,
    /// Only windows in the forecaster's held-out validation split,
    /// reconstructed from the training seed and fraction.
    ForecastHoldout { seed: u64, train_fraction: f64 },
}

/// One (class, channel) sensitivity entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub label: Label,
    pub channel: usize,
    pub baseline_loss: f64,
    pub perturbed_loss: f64,
    /// 100 * (perturbed - baseline) / baseline.
    pub delta_percent: f64,
}

/// 2 classes x 53 channels, class-major, channel-ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    pub fn class_rows(&self, label: Label) -> Vec<&SensitivityRow> {
        self.rows.iter().filter(|r| r.label == label).collect()
    }

    pub fn delta(&self, label: Label, channel: usize) -> f64 {
        self.rows
            .iter()
            .find(|r| r.label == label && r.channel == channel)
            .map(|r| r.delta_percent)
            .expect("complete table")
    }
}

/// Sets channel `i` of every window to zero. Input and target positions
/// are both affected: the channel's activity is removed entirely.
pub fn silence_channel(batch: &WindowBatch, channel: usize) -> Result<WindowBatch, InterpretError> {
    if channel >= CHANNELS {
        return Err(InterpretError::ChannelRange(channel));
    }
    let mut out = batch.clone();
    out.silence_channel(channel);
    Ok(out)
}

/// Mean masked-reconstruction MSE over all windows of the batch.
/// Accumulation is window-major regardless of `batch_size`, so the
/// result does not depend on evaluation batching.
fn masked_loss(model: &BrainLm, batch: &WindowBatch, batch_size: usize) -> Result<f64, InterpretError> {
    let mask = mask_tail(model.shape.window, 6).expect("window divisible by 6");
    let masked_from = model.shape.window - model.shape.masked();
    let all: Vec<usize> = (0..batch.len()).collect();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for chunk in all.chunks(batch_size.max(1)) {
        let input = window_tensor(batch, chunk, 0, model.shape.window);
        let recon = model.forward(&input, &mask)?;
        let mut tape = Tape::new();
        let r = tape.constant(recon);
        let tail = tape
            .slice(r, 1, masked_from, model.shape.window)
            .map_err(ForecastError::from)?;
        let target = window_tensor(batch, chunk, masked_from, model.shape.window);
        sq_sum += tape
            .value(tail)
            .values()
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>();
        count += target.numel();
    }
    Ok(sq_sum / count as f64)
}

/// Windows of one class under the evaluation scope.
fn class_windows(
    cohort: &Cohort,
    label: Label,
    scope: EvalScope,
) -> Result<WindowBatch, InterpretError> {
    match scope {
        EvalScope::All => Ok(slide_class(cohort, label, WINDOW_LEN, WINDOW_STEP)?),
        EvalScope::ForecastHoldout { seed, train_fraction } => {
            // Reproduce the forecaster's cohort-wide window split, then
            // keep the held-out windows belonging to this class.
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let all = crate::windows::slide_cohort(cohort, WINDOW_LEN, WINDOW_STEP)?;
            let mut indices: Vec<usize> = (0..all.len()).collect();
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(mix3(seed, 0xda7a, 0));
            indices.shuffle(&mut rng);
            let train_n = ((all.len() as f64 * train_fraction).round() as usize)
                .clamp(1, all.len() - 1);
            let holdout = &indices[train_n..];
            let label_of = |sid: &str| {
                cohort
                    .records
                    .iter()
                    .find(|r| r.subject_id == sid)
                    .map(|r| r.label)
            };
            let mut keep: Vec<usize> = holdout
                .iter()
                .copied()
                .filter(|&i| label_of(&all.sources[i].0) == Some(label))
                .collect();
            keep.sort_unstable();
            Ok(all.select(&keep))
        }
    }
}

/// Deltas for all 53 channels of one class.
pub fn class_sensitivity(
    model: &BrainLm,
    cohort: &Cohort,
    label: Label,
    scope: EvalScope,
    batch_size: usize,
) -> Result<Vec<SensitivityRow>, InterpretError> {
    if cohort.count(label) == 0 {
        return Err(InterpretError::EmptyClass(label.as_str()));
    }
    let batch = class_windows(cohort, label, scope)?;
    let baseline = masked_loss(model, &batch, batch_size)?;
    // Channels are independent given the read-only model.
    let rows: Result<Vec<SensitivityRow>, InterpretError> = (0..CHANNELS)
        .into_par_iter()
        .map(|channel| {
            let silenced = silence_channel(&batch, channel)?;
            let perturbed = masked_loss(model, &silenced, batch_size)?;
            Ok(SensitivityRow {
                label,
                channel,
                baseline_loss: baseline,
                perturbed_loss: perturbed,
                delta_percent: 100.0 * (perturbed - baseline) / baseline,
            })
        })
        .collect();
    rows
}

/// Full 2 x 53 sensitivity table (CN first).
pub fn sensitivity_table(
    model: &BrainLm,
    cohort: &Cohort,
    scope: EvalScope,
    batch_size: usize,
) -> Result<SensitivityTable, InterpretError> {
    let mut rows = class_sensitivity(model, cohort, Label::Cn, scope, batch_size)?;
    rows.extend(class_sensitivity(model, cohort, Label::Ad, scope, batch_size)?);
    Ok(SensitivityTable { rows })
}

/// Which class is more sensitive to silencing a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonSign {
    /// AD delta exceeds CN delta ("red").
    AdGreater,
    /// CN delta is at least the AD delta ("blue").
    CnGreater,
}

#[derive(Debug, Clone)]
pub struct RankedSensitivities {
    /// (class, channels ranked by descending delta; ties break on the
    /// lower channel index).
    pub per_class: Vec<(Label, Vec<usize>)>,
    /// Per requested top channel of either class, the CN-AD sign.
    pub signs: Vec<(usize, ComparisonSign)>,
    pub top_k: usize,
}

/// Ranks channels per class and annotates the union of the two top-k
/// lists with the class-comparison sign.
pub fn rank_sensitivities(table: &SensitivityTable, top_k: usize) -> RankedSensitivities {
    let ranked = |label: Label| -> Vec<usize> {
        let mut rows = table.class_rows(label);
        rows.sort_by(|a, b| {
            b.delta_percent
                .partial_cmp(&a.delta_percent)
                .expect("finite deltas")
                .then(a.channel.cmp(&b.channel))
        });
        rows.iter().map(|r| r.channel).collect()
    };
    let cn = ranked(Label::Cn);
    let ad = ranked(Label::Ad);
    let mut tops: Vec<usize> = cn
        .iter()
        .take(top_k)
        .chain(ad.iter().take(top_k))
        .copied()
        .collect();
    tops.sort_unstable();
    tops.dedup();
    let signs = tops
        .into_iter()
        .map(|ch| {
            let sign = if table.delta(Label::Ad, ch) > table.delta(Label::Cn, ch) {
                ComparisonSign::AdGreater
            } else {
                ComparisonSign::CnGreater
            };
            (ch, sign)
        })
        .collect();
    RankedSensitivities {
        per_class: vec![(Label::Cn, cn), (Label::Ad, ad)],
        signs,
        top_k,
    }
}

/// `sensitivity.csv` body: class,channel_index,domain,delta_percent,rank
/// with rank the 1-based position in the class's descending ordering.
pub fn sensitivity_csv(table: &SensitivityTable) -> String {
    let ranking = rank_sensitivities(table, CHANNELS);
    let mut s = String::from("class,channel_index,domain,delta_percent,rank\n");
    for (label, order) in &ranking.per_class {
        for (pos, &channel) in order.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                label.as_str(),
                channel,
                domain_of(channel).as_str(),
                table.delta(*label, channel),
                pos + 1
            ));
        }
    }
    s
}
