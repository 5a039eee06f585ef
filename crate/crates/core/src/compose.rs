//! Trace projections and empirical well-formedness checks for combined
//! semantics.
//!
//! The non-speculative projection strips every transaction (markers
//! included); the per-source projection strips only one source's
//! transactions; the speculative projection is the exact complement of the
//! non-speculative one. Projection preservation and confluence are checked
//! per program by running the engine, not proved.

pub use crate::spec::{SemId, SemSet};

use serde::Serialize;
use thiserror::Error;

use crate::lang::Program;
use crate::machine::{EventKind, Trace};
use crate::spec::{run_spec, SpecError, SpecOptions};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("malformed transaction brackets at event {0}")]
    MalformedBrackets(usize),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

fn bracket_depths(t: &Trace) -> Result<Vec<usize>, ComposeError> {
    // Depth of each event; markers carry the depth of the region they
    // delimit (a start is "inside" its own transaction).
    let mut depths = Vec::with_capacity(t.len());
    let mut open: Vec<(SemId, u64)> = Vec::new();
    for (i, e) in t.events().iter().enumerate() {
        match e.kind {
            EventKind::Start(id, c) => {
                open.push((id, c));
                depths.push(open.len());
            }
            EventKind::Rollback(id, c) => {
                if open.pop() != Some((id, c)) {
                    return Err(ComposeError::MalformedBrackets(i));
                }
                depths.push(open.len() + 1);
            }
            _ => depths.push(open.len()),
        }
    }
    if !open.is_empty() {
        return Err(ComposeError::MalformedBrackets(t.len()));
    }
    Ok(depths)
}

/// Remove every transaction: all events strictly inside any transaction,
/// plus the markers themselves.
pub fn nonspec_projection(t: &Trace) -> Result<Trace, ComposeError> {
    let depths = bracket_depths(t)?;
    let events = t
        .events()
        .iter()
        .zip(&depths)
        .filter(|(e, &d)| d == 0 && !e.kind.is_marker())
        .map(|(e, _)| e.clone())
        .collect();
    Ok(Trace(events))
}

/// The exact complement of the non-speculative projection: everything the
/// latter removes, markers included, in original order.
pub fn spec_projection(t: &Trace) -> Result<Trace, ComposeError> {
    let depths = bracket_depths(t)?;
    let events = t
        .events()
        .iter()
        .zip(&depths)
        .filter(|(e, &d)| d > 0 || e.kind.is_marker())
        .map(|(e, _)| e.clone())
        .collect();
    Ok(Trace(events))
}

/// Remove only the transactions of one source (with everything nested in
/// them); other sources' markers survive.
pub fn source_projection(t: &Trace, id: SemId) -> Result<Trace, ComposeError> {
    bracket_depths(t)?; // validate bracketing
    let mut depth_id = 0usize;
    let mut out = Vec::new();
    for e in t.events() {
        match e.kind {
            EventKind::Start(eid, _) if eid == id => {
                depth_id += 1;
            }
            EventKind::Rollback(eid, _) if eid == id => {
                // Bracketing already validated; this cannot underflow.
                depth_id -= 1;
            }
            _ => {
                if depth_id == 0 {
                    out.push(e.clone());
                }
            }
        }
    }
    Ok(Trace(out))
}

/// Strip the bookkeeping `spec_stack` and renumber transaction counters in
/// order of first appearance, so traces produced under different source
/// sets compare by their observable content. Counter values depend on how
/// many transactions the engine allocated, which differs across source
/// sets even when the projected structure is identical.
fn observable(t: &Trace) -> Vec<(EventKind, crate::machine::Taint)> {
    let mut renumber: std::collections::BTreeMap<(SemId, u64), u64> = Default::default();
    let mut next = 0;
    t.events()
        .iter()
        .map(|e| {
            let kind = match e.kind {
                EventKind::Start(id, c) => {
                    let canon = *renumber.entry((id, c)).or_insert_with(|| {
                        let n = next;
                        next += 1;
                        n
                    });
                    EventKind::Start(id, canon)
                }
                EventKind::Rollback(id, c) => {
                    let canon = *renumber.entry((id, c)).or_insert_with(|| {
                        let n = next;
                        next += 1;
                        n
                    });
                    EventKind::Rollback(id, canon)
                }
                ref k => k.clone(),
            };
            (kind, e.taint)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    pub x: String,
    pub y: String,
    pub holds: bool,
    /// `(direction, index)` of the first mismatch, if any.
    pub mismatches: Vec<(String, usize)>,
}

/// Projection preservation, checked by execution: the run under `x + y`
/// with `y`'s transactions projected away must equal the run under `x`,
/// and symmetrically.
pub fn check_projection_preservation(
    program: &Program,
    x: SemSet,
    y: SemSet,
    opts: &SpecOptions,
) -> Result<ProjectionReport, ComposeError> {
    let combined = run_spec(program, x.union(y), opts)?;
    let mut mismatches = Vec::new();

    let mut lhs = combined.clone();
    for id in y.iter() {
        lhs = source_projection(&lhs, id)?;
    }
    let under_x = run_spec(program, x, opts)?;
    if observable(&lhs) != observable(&under_x) {
        let idx = lhs.first_divergence(&under_x).unwrap_or(0);
        mismatches.push(("x".to_string(), idx));
    }

    let mut rhs = combined;
    for id in x.iter() {
        rhs = source_projection(&rhs, id)?;
    }
    let under_y = run_spec(program, y, opts)?;
    if observable(&rhs) != observable(&under_y) {
        let idx = rhs.first_divergence(&under_y).unwrap_or(0);
        mismatches.push(("y".to_string(), idx));
    }

    Ok(ProjectionReport {
        x: x.to_string(),
        y: y.to_string(),
        holds: mismatches.is_empty(),
        mismatches,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfluenceReport {
    pub sources: String,
    pub trials: usize,
    pub holds: bool,
    pub first_differing_trial: Option<usize>,
}

/// Verdict over a set of traces that are supposed to be identical.
pub fn confluent(traces: &[Trace]) -> Option<usize> {
    let first = traces.first()?;
    traces.iter().position(|t| t != first).filter(|&i| i != 0)
}

/// Re-execute `trials` times and require identical traces.
pub fn check_confluence(
    program: &Program,
    sources: SemSet,
    trials: usize,
    opts: &SpecOptions,
) -> Result<ConfluenceReport, ComposeError> {
    let mut traces = Vec::with_capacity(trials);
    for _ in 0..trials {
        traces.push(run_spec(program, sources, opts)?);
    }
    let first_differing_trial = confluent(&traces);
    Ok(ConfluenceReport {
        sources: sources.to_string(),
        trials,
        holds: first_differing_trial.is_none(),
        first_differing_trial,
    })
}

/// The leakage order: `a` leaks at most as much as `b` iff `a` is a subset
/// of `b`; both sides must be combinable.
pub fn leakage_leq(a: SemSet, b: SemSet) -> bool {
    a.combinable() && b.combinable() && a.is_subset(b)
}
