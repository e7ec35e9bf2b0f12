// SPDX-License-Identifier: Apache-2.0

pub mod alignment;
pub mod codec;
pub mod data;
pub mod error;
pub mod he;
pub mod harness;
pub mod hfl;
pub mod seed;
pub mod transport;
pub mod vfl;

pub use error::{Error, Result};
