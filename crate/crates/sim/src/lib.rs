//! Simulation driver on top of `relsym`: bundled demo scenes, an implicit
//! Euler Newton loop with backtracking line search, proximity pair refresh,
//! a finite-difference verification harness and plain text output.

pub mod config;
pub mod contact;
pub mod demos;
pub mod error;
pub mod fdcheck;
pub mod inspect;
pub mod newton;
pub mod output;

pub use config::SimConfig;
pub use demos::Sim;
pub use error::SimError;
