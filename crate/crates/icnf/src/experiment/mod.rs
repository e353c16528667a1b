//! Experimental protocol: builds the six dataset variants, runs the
//! stratified 5-fold x 5-seed cross-validation per variant, and compares
//! mean test AUCs against a reference variant with a paired test.

mod splits;
mod stats;

pub use splits::{kfold, stratified_split, SplitError};
pub use stats::{auc, paired_ttest, wilcoxon_signed_rank, SignificanceResult, StatsError};

use rayon::prelude::*;
use thiserror::Error;

use crate::classify::{train_classifier, ClassifyError, ClassifyTrainConfig, score_records};
use crate::data::{Cohort, IcnRecord, Label};
use crate::forecast::{extend_series, Forecaster, ForecastError};
use crate::seeds::{mix2, mix3};
use crate::windows::{replicate, truncate, WindowError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("variant {variant}: subject {subject} has T={t}, expected {expected}")]
    LengthMismatch {
        variant: char,
        subject: String,
        t: usize,
        expected: usize,
    },
    #[error("no variants configured")]
    NoVariants,
}

/// The six dataset constructions evaluated by the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariantId {
    A,
    B,
    C,
    D,
    E,
    F,
}

pub const ALL_VARIANTS: [VariantId; 6] = [
    VariantId::A,
    VariantId::B,
    VariantId::C,
    VariantId::D,
    VariantId::E,
    VariantId::F,
];

impl VariantId {
    pub fn letter(&self) -> char {
        match self {
            VariantId::A => 'a',
            VariantId::B => 'b',
            VariantId::C => 'c',
            VariantId::D => 'd',
            VariantId::E => 'e',
            VariantId::F => 'f',
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a" => Some(VariantId::A),
            "b" => Some(VariantId::B),
            "c" => Some(VariantId::C),
            "d" => Some(VariantId::D),
            "e" => Some(VariantId::E),
            "f" => Some(VariantId::F),
            _ => None,
        }
    }

    /// Series length every record of the built variant must have.
    pub fn expected_t(&self) -> usize {
        match self {
            VariantId::A => 137,
            VariantId::B | VariantId::C => 141,
            VariantId::D => 194,
            VariantId::E | VariantId::F => 198,
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            VariantId::A => "baseline",
            VariantId::B => "baseline+lstm",
            VariantId::C => "baseline+brainlm",
            VariantId::D => "replication",
            VariantId::E => "replication+lstm",
            VariantId::F => "replication+brainlm",
        }
    }
}

/// The four trained forecasters the extended variants draw on:
/// base models trained on truncated-length windows, repl models on
/// replicated-length windows.
pub struct ForecasterSet {
    pub lstm_base: Forecaster,
    pub brainlm_base: Forecaster,
    pub lstm_repl: Forecaster,
    pub brainlm_repl: Forecaster,
}

/// Builds one dataset variant from the prepped (z-scored, mixed-length)
/// cohort. Record order follows the cohort.
pub fn build_variant(
    cohort: &Cohort,
    id: VariantId,
    forecasters: &ForecasterSet,
    seed: u64,
) -> Result<Vec<IcnRecord>, ExperimentError> {
    let records: Vec<IcnRecord> = match id {
        VariantId::A => cohort
            .records
            .iter()
            .map(|r| truncate(r, 137))
            .collect::<Result<_, _>>()?,
        VariantId::D => cohort
            .records
            .iter()
            .map(|r| replicate(r, 194))
            .collect::<Result<_, _>>()?,
        VariantId::B | VariantId::C => {
            let base = build_variant(cohort, VariantId::A, forecasters, seed)?;
            let model = match id {
                VariantId::B => &forecasters.lstm_base,
                _ => &forecasters.brainlm_base,
            };
            base.iter()
                .map(|r| extend_series(r, model, 4, mix2(seed, 0xe7e)))
                .collect::<Result<_, _>>()?
        }
        VariantId::E | VariantId::F => {
            let base = build_variant(cohort, VariantId::D, forecasters, seed)?;
            let model = match id {
                VariantId::E => &forecasters.lstm_repl,
                _ => &forecasters.brainlm_repl,
            };
            base.iter()
                .map(|r| extend_series(r, model, 4, mix2(seed, 0xe7e)))
                .collect::<Result<_, _>>()?
        }
    };
    for r in &records {
        if r.t_len != id.expected_t() {
            return Err(ExperimentError::LengthMismatch {
                variant: id.letter(),
                subject: r.subject_id.clone(),
                t: r.t_len,
                expected: id.expected_t(),
            });
        }
    }
    Ok(records)
}

/// Which paired significance test the summary uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Significance {
    TTest,
    Wilcoxon,
}

impl Significance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Significance::TTest => "ttest",
            Significance::Wilcoxon => "wilcoxon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ttest" => Some(Significance::TTest),
            "wilcoxon" => Some(Significance::Wilcoxon),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub test_fraction: f64,
    pub variants: Vec<VariantId>,
    pub reference: VariantId,
    pub significance: Significance,
    pub classify: ClassifyTrainConfig,
    /// Worker threads for the (variant, seed, fold) cells; 0 = rayon
    /// default.
    pub threads: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            seeds: vec![0, 1, 2, 3, 4],
            folds: 5,
            test_fraction: 0.10,
            variants: ALL_VARIANTS.to_vec(),
            reference: VariantId::D,
            significance: Significance::TTest,
            classify: ClassifyTrainConfig::default(),
            threads: 0,
        }
    }
}

/// One test score.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScore {
    pub variant: VariantId,
    pub seed: u64,
    pub fold: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: VariantId,
    pub mean_auc: f64,
    pub std: f64,
    /// None for the reference variant or when the paired test is
    /// undefined (zero variance).
    pub p_vs_ref: Option<f64>,
}

#[derive(Debug)]
pub struct MatrixResult {
    /// Ordered variant-major, then seed, then fold.
    pub scores: Vec<CellScore>,
    pub summary: Vec<VariantSummary>,
}

impl MatrixResult {
    pub fn variant_scores(&self, id: VariantId) -> Vec<f64> {
        self.scores
            .iter()
            .filter(|s| s.variant == id)
            .map(|s| s.auc)
            .collect()
    }
}

/// Runs the full evaluation matrix over pre-built variant datasets.
/// For every seed: one stratified test split shared by all variants,
/// k folds over the remainder, one classifier per (variant, seed, fold)
/// scored on the held-out test set.
pub fn run_matrix(
    variants: &[(VariantId, Vec<IcnRecord>)],
    config: &MatrixConfig,
) -> Result<MatrixResult, ExperimentError> {
    if variants.is_empty() {
        return Err(ExperimentError::NoVariants);
    }
    let labels: Vec<Label> = variants[0].1.iter().map(|r| r.label).collect();

    // Splits depend on the seed only, so scores pair across variants.
    let mut seed_plans = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (trainval, test) = stratified_split(&labels, config.test_fraction, seed)?;
        let folds = kfold(&labels, &trainval, config.folds, mix2(seed, 0x0f01d5))?;
        seed_plans.push((seed, test, folds));
    }

    let mut cells = Vec::new();
    for (vi, (variant, _)) in variants.iter().enumerate() {
        for (si, _) in config.seeds.iter().enumerate() {
            for fold in 0..config.folds {
                cells.push((vi, si, fold, *variant));
            }
        }
    }

    let run_cell = |&(vi, si, fold, variant): &(usize, usize, usize, VariantId)|
     -> Result<CellScore, ExperimentError> {
        let records = &variants[vi].1;
        let (seed, ref test_idx, ref folds) = seed_plans[si];
        let (ref train_idx, ref val_idx) = folds[fold];
        let train: Vec<&IcnRecord> = train_idx.iter().map(|&i| &records[i]).collect();
        let val: Vec<&IcnRecord> = val_idx.iter().map(|&i| &records[i]).collect();
        let test: Vec<&IcnRecord> = test_idx.iter().map(|&i| &records[i]).collect();

        // Same classifier stream for every variant of a (seed, fold)
        // cell, so paired comparisons share initialization.
        let cell_config = ClassifyTrainConfig {
            seed: mix3(seed, fold as u64, 0xce11),
            ..config.classify.clone()
        };
        let trained = train_classifier(&train, &val, &cell_config)?;
        let scores = score_records(&trained.model, &test, cell_config.batch_size)?;
        let test_labels: Vec<f64> = test.iter().map(|r| r.label.target()).collect();
        let auc = auc(&scores, &test_labels)?;
        Ok(CellScore { variant, seed, fold, auc })
    };

    let results: Result<Vec<CellScore>, ExperimentError> = if config.threads == 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .expect("thread pool");
        pool.install(|| cells.par_iter().map(run_cell).collect())
    };
    let scores = results?;

    let summary = summarize(variants, &scores, config)?;
    Ok(MatrixResult { scores, summary })
}

fn summarize(
    variants: &[(VariantId, Vec<IcnRecord>)],
    scores: &[CellScore],
    config: &MatrixConfig,
) -> Result<Vec<VariantSummary>, ExperimentError> {
    let per_variant = |id: VariantId| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| s.variant == id)
            .map(|s| s.auc)
            .collect()
    };
    let reference = variants
        .iter()
        .any(|(v, _)| *v == config.reference)
        .then(|| per_variant(config.reference));

    let mut out = Vec::with_capacity(variants.len());
    for (id, _) in variants {
        let vals = per_variant(*id);
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let p_vs_ref = match (&reference, *id == config.reference) {
            (Some(ref_scores), false) => {
                let r = match config.significance {
                    Significance::TTest => paired_ttest(&vals, ref_scores)?,
                    Significance::Wilcoxon => wilcoxon_signed_rank(&vals, ref_scores)?,
                };
                r.p
            }
            _ => None,
        };
        out.push(VariantSummary { variant: *id, mean_auc: mean, std, p_vs_ref });
    }
    Ok(out)
}

/// `manifest.csv` body: one row per test score.
pub fn manifest_csv(result: &MatrixResult) -> String {
    let mut s = String::from("variant,seed,fold,auc\n");
    for row in &result.scores {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.variant.letter(),
            row.seed,
            row.fold,
            row.auc
        ));
    }
    s
}

/// `summary.csv` body: per-variant mean, std, and p against the
/// reference (empty when undefined).
pub fn summary_csv(result: &MatrixResult) -> String {
    let mut s = String::from("variant,mean_auc,std,p_vs_ref\n");
    for row in &result.summary {
        let p = row.p_vs_ref.map(|p| p.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.variant.letter(),
            row.mean_auc,
            row.std,
            p
        ));
    }
    s
}
