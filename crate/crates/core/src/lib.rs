//! Lightweight prediction heads over frozen speech-foundation-model encoder
//! features, for predicting intelligibility scores of hearing-impaired
//! listeners.
//!
//! The crate covers the whole experiment lifecycle: a portable feature file
//! format, listener-disjoint three-fold splits, three head architectures,
//! a seeded training loop with validation-based checkpoint selection,
//! layer and width sweeps, and softmax-weighted ensembles of per-model
//! predictions.

pub mod datastore;
pub mod ensemble;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod numerics;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use datastore::{Audiogram, Dataset, FoldSplit, LayerFeatureTensor, Manifest, Sample, SfmDescriptor};
pub use ensemble::{EnsembleModel, EnsembleReport, MemberPredictions};
pub use heads::{Arch, Head, HeadConfig, LayerMode};
pub use metrics::MetricReport;
pub use numerics::{ParamSet, ScheduleSpec, Tensor};
pub use sweep::{ConfigId, SweepResult, SweepRow};
pub use trainer::{RunRecord, TrainRecipe};
