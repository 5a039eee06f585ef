//! Desk-scale laboratory for speculative-execution security.
//!
//! The crate implements a small assembly language (muasm) with components,
//! attackers, and abstract instruction labels; a non-speculative semantics
//! with paired taint tracking; five always-mispredict speculative semantics
//! (`B`, `J`, `S`, `R`, `SLS`) and their combinations; the classic Spectre
//! countermeasure passes (fences, retpolines, speculative load hardening);
//! and checkers for speculative safety, speculative non-interference, and
//! the conditions under which a pass's guarantees lift to stronger
//! speculation models.
//!
//! Module map:
//! - [`lang`]: syntax, parsing, linking, label instantiation.
//! - [`machine`]: non-speculative execution with taints and event traces.
//! - [`spec`]: the speculative engine (stack of speculative instances).
//! - [`compose`]: trace projections and well-formedness checks.
//! - [`security`]: speculative safety / non-interference checkers.
//! - [`passes`]: the nine countermeasure compiler passes.
//! - [`lift`]: lifting-condition checkers and the lattice-wide report.
//! - [`fixtures`]: the built-in demo corpus used by tests and the CLI.

pub mod compose;
pub mod fixtures;
pub mod lang;
pub mod lift;
pub mod machine;
pub mod passes;
pub mod rng;
pub mod security;
pub mod spec;

pub use lang::{Attacker, Component, LabelMap, Program, Unit, WholeProgram};
pub use machine::{Event, EventKind, MachineOptions, Taint, Trace};
pub use spec::{SemId, SemSet};
