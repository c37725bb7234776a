//! Aliasing analysis for convolutional networks.
//!
//! [`spectral`] holds the 2-D DFT and the polyphase block identity,
//! [`aliasing`] classifies frequency components of a downsampled signal,
//! [`oscillations`] generates the synthetic benchmark, [`nn`] is a small CNN
//! engine, [`instrumentation`] measures aliasing inside trained networks
//! and [`adversarial`] runs PGD attacks and sweeps.

pub mod adversarial;
pub mod aliasing;
mod error;
pub mod instrumentation;
pub mod nn;
pub mod oscillations;
pub mod spectral;

pub use adversarial::{adversarial_sweep, pgd_attack, AttackConfig, SweepRow, SweepTable};
pub use aliasing::{
    aggregate, classify, tally, Category, CategoryCounts, CategoryGrid, Fractions, ThresholdRule, Weighting,
};
pub use error::{Error, Result};
pub use instrumentation::{
    analyze_dataset, analyze_sample, capture_traces, enumerate_downsample_points, AnalysisReport, DownsamplePointId,
    DownsampleTrace, PointPath, PointReport,
};
pub use nn::{build_model, evaluate, train, Checkpoint, Family, ImageSet, Model, ModelSpec, TrainConfig};
pub use oscillations::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, FrequencyLabel};
pub use spectral::{dft2, downsample, idft2, RealGrid, Spectrum};
