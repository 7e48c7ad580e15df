//! A miniature layout-aware tensor compiler.
//!
//! Graphs of tensor operators are rewritten with data-layout primitives,
//! lowered to loop nests, checked against a reference evaluator and measured
//! with a cache simulator. The autotuner searches layouts and loop schedules
//! jointly.

pub mod cli;
pub mod compute;
pub mod error;
pub mod exec;
pub mod graphs;
pub mod expr;
pub mod ir;
pub mod layout;
pub mod loops;
pub mod pipeline;
pub mod program;
pub mod propagation;
pub mod tuner;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/layouts.md")]
    mod layouts {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/loops.md")]
    mod loops {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
