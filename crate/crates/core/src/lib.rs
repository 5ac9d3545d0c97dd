//! Few-shot knowledge graph completion with cross-task transfer.
//!
//! A task is one relation with a handful of example triples. The model
//! learns a relation vector from the support set, borrows from similar
//! tasks, adapts with one task-conditioned gradient step and ranks
//! candidate tails. See the guide in `book/` for a walkthrough.

pub mod config;
pub mod contrast;
pub mod error;
pub mod evalkit;
pub mod kgdata;
pub mod metatrain;
pub mod numkit;
pub mod relearner;
pub mod scorer;
pub mod taskgraph;

pub use config::{TrainConfig, TransferPool};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/relations.md")]
    mod relations {}
    #[doc = include_str!("../../../book/src/contrast.md")]
    mod contrast {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
