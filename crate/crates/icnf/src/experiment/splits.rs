//! Stratified test split and stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Label;
use crate::seeds::mix2;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("class {label} has {count} members, needs at least {needed}")]
    ClassTooSmall {
        label: &'static str,
        count: usize,
        needed: usize,
    },
    #[error("class {label}: test fraction rounds to the whole class, train side would be empty")]
    EmptyTrainClass { label: &'static str },
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn class_indices(labels: &[Label], label: Label) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == label)
        .map(|(i, _)| i)
        .collect()
}

/// Splits indices into (trainval, test) with per-class test counts of
/// round(count * test_fraction), half-up. Deterministic in `seed`.
pub fn stratified_split(
    labels: &[Label],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), SplitError> {
    let needed = (1.0 / test_fraction).ceil() as usize;
    let mut trainval = Vec::new();
    let mut test = Vec::new();
    for (tag, label) in [(0u64, Label::Cn), (1u64, Label::Ad)] {
        let mut idx = class_indices(labels, label);
        if idx.len() < needed {
            return Err(SplitError::ClassTooSmall {
                label: label.as_str(),
                count: idx.len(),
                needed,
            });
        }
        let n_test = round_half_up(idx.len() as f64 * test_fraction);
        if n_test >= idx.len() {
            return Err(SplitError::EmptyTrainClass { label: label.as_str() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, 0xf01d + tag));
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test]);
        trainval.extend_from_slice(&idx[n_test..]);
    }
    trainval.sort_unstable();
    test.sort_unstable();
    Ok((trainval, test))
}

/// (train indices, val indices) per fold.
pub type Folds = Vec<(Vec<usize>, Vec<usize>)>;

/// Stratified k folds over `indices`; returns (train, val) index lists
/// per fold. Per-class val counts differ by at most one across folds.
pub fn kfold(
    labels: &[Label],
    indices: &[usize],
    k: usize,
    seed: u64,
) -> Result<Folds, SplitError> {
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (tag, label) in [(0u64, Label::Cn), (1u64, Label::Ad)] {
        let mut idx: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| labels[i] == label)
            .collect();
        if idx.len() < k {
            return Err(SplitError::ClassTooSmall {
                label: label.as_str(),
                count: idx.len(),
                needed: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, 0xf02d + tag));
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold_members[j % k].push(i);
        }
    }
    let folds = (0..k)
        .map(|f| {
            let mut val = fold_members[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> = fold_members
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != f)
                .flat_map(|(_, m)| m.iter().copied())
                .collect();
            train.sort_unstable();
            (train, val)
        })
        .collect();
    Ok(folds)
}
