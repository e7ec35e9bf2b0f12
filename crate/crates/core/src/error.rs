// SPDX-License-Identifier: Apache-2.0

//! Crate-wide error type. Each variant wraps the error of the module that
//! raised it.

use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::data::DataError;
use crate::harness::HarnessError;
use crate::he::HeError;
use crate::hfl::HflError;
use crate::transport::TransportError;
use crate::vfl::VflError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("he: {0}")]
    He(#[from] HeError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("alignment: {0}")]
    Alignment(#[from] AlignmentError),
    #[error("vfl: {0}")]
    Vfl(#[from] VflError),
    #[error("hfl: {0}")]
    Hfl(#[from] HflError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("harness: {0}")]
    Harness(#[from] HarnessError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status: 2 for configuration and input problems, 3 for
    /// protocol failures, 4 when a safety guard refuses to start.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Vfl(VflError::SafetyGuard(_)) => 4,
            Error::Config(_) | Error::Data(_) | Error::Harness(_) | Error::Io(_) => 2,
            Error::Vfl(VflError::InvalidHyperparams(_) | VflError::InvalidDataset(_)) => 2,
            Error::Hfl(HflError::Protocol(_)) => 3,
            Error::Hfl(_) => 2,
            Error::He(_) | Error::Transport(_) | Error::Alignment(_) | Error::Vfl(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
