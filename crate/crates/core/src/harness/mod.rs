// SPDX-License-Identifier: Apache-2.0

//! Experiment harness: synthetic data, partitioning, centralized reference
//! models, and end-to-end runs that compare federated against pooled training.

mod experiment;
mod oracle;
mod synthetic;

use thiserror::Error;

pub use experiment::{
    run_experiment, DataSection, ExperimentConfig, ExperimentReport, ExperimentSection,
    HflSection, HflUpdate, Mode, PsiGroup, RunArtifacts,
};
pub use oracle::{
    gradient_descent, mse, pooled_vertical, r_squared, ridge_closed_form, Descent, Objective,
};
pub use synthetic::{
    classify_partition, generate, partition_horizontal, partition_vertical, FeatureScale,
    PartitionKind, SplitScheme, SyntheticSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("partitions fit no single category: {0}")]
    Mixed(String),
    #[error("normal matrix is singular ({0}); use reg_lambda > 0")]
    Singular(String),
    #[error("malformed report: {0}")]
    Report(String),
}
