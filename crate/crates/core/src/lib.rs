//! Feedback-enabled cascaded classification: a two-layer multi-task
//! cascade of linear classifiers trained as a hard-EM loop, with a
//! no-feedback baseline, heterogeneous disjoint-label datasets balanced by
//! importance factors, an L1-sparse surrogate feedback mode for opaque
//! second-layer classifiers, and a synthetic-data experiment harness.

pub mod cascade;
pub mod classifiers;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod optimize;
pub mod tasks;
pub mod training;

pub use cascade::{Adapter, CascadeModel, LatentState, Standardization};
pub use classifiers::{learn, ClassifierKind, ClassifierParams, Target};
pub use error::{Error, Result};
pub use harness::{evaluate, generate_synthetic, run_experiment, EvalReport, SyntheticConfig};
pub use tasks::{
    load_dataset, save_dataset, Label, LabelSpace, Metric, MultiTaskDataset, Sample, TaskSpec,
};
pub use training::{
    train_ccm, train_feccm, FeedbackConfig, FeedbackMode, Instantiation, LayerKinds, TrainingTrace,
};
