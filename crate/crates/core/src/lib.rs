//! Multitiered experiments: decomposition of the observation space through a
//! chain of randomizations, skeleton ANOVA, estimation and a randomization
//! simulator.

pub mod anova;
pub mod balance;
pub mod chain;
pub mod data;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod oracle;
pub mod rational;
pub mod spec;
pub mod structure;

pub use error::{Error, Result};
