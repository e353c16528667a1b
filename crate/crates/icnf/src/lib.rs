//! Generative-forecasting data augmentation for ICN time courses.
//!
//! The pipeline ingests multivariate independent-component time courses
//! (53 channels per subject), standardizes sequence lengths by truncation
//! and replication, trains two generative forecasters (a stateless LSTM
//! and a masked-reconstruction transformer) on sliding windows, extends
//! each series with forecasted timestamps, and evaluates the augmented
//! datasets with a time-attention LSTM classifier under a 5-fold x 5-seed
//! protocol. A perturbation pass ranks per-class channel sensitivity of
//! the trained transformer.
//!
//! Everything runs on the small reverse-mode autodiff engine in
//! [`numerics`]; all randomness flows through explicitly seeded ChaCha
//! generators so every artifact is reproducible byte-for-byte.

pub mod classify;
pub mod config;
pub mod data;
pub mod experiment;
pub mod forecast;
pub mod interpret;
mod layers;
pub mod numerics;
mod seeds;
pub mod windows;
