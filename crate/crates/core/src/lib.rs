//! Orchestration engine for round-based, reviewed self-improvement runs.
//!
//! A run starts from a declarative [`spec::TaskSpec`], builds or validates an
//! accepted baseline, then loops investigation, execution, evaluation and
//! review rounds until the reviewer or the budget stops it. Every round
//! leaves canonical artifacts on disk so a run can be audited and resumed.

pub mod demos;
pub mod drivers;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod protocol;
pub mod review;
pub mod spec;
pub mod subprocess;
pub mod tracking;
