//! Lifting-condition checkers and the lattice-wide lifting report.
//!
//! Syntactic independence is decided from the pass's inserted-instruction
//! set alone. Everything else here is observed on a corpus: trapped
//! speculation and safe nesting scan traces of compiled programs, and the
//! independence / conditional-preservation checks compare source and
//! compiled safety verdicts. The report keeps the decided and observed
//! columns apart and never presents a corpus pass as a proof.

use serde::Serialize;
use thiserror::Error;

use crate::compose::spec_projection;
use crate::lang::{link, Attacker, Component, LangError};
use crate::machine::{Taint, Trace};
use crate::passes::{compile, inserted_instrs, PassError, PassId, PassOptions};
use crate::security::check_ss;
use crate::spec::{run_spec, trigger_set, InstrClass, SemId, SemSet, SpecError, SpecOptions};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Pass(#[from] PassError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Compose(#[from] crate::compose::ComposeError),
    #[error(transparent)]
    Security(#[from] crate::security::SecurityError),
}

/// Instruction classes whose insertion can move data or steer observations
/// regardless of any trigger set: branches, indirect jumps, memory
/// accesses, and register writes. Static jumps, barriers, and the
/// administrative return-address edits are excluded; they are
/// data-independent.
const STATE_TOUCHING: &[InstrClass] = &[
    InstrClass::Beqz,
    InstrClass::IndirectJmp,
    InstrClass::Store,
    InstrClass::StorePrv,
    InstrClass::Load,
    InstrClass::LoadPrv,
    InstrClass::Assign,
    InstrClass::CondAssign,
    InstrClass::VAssign,
];

/// Syntactic independence of a pass with respect to a semantics: the
/// inserted instructions neither trigger speculation under it nor touch
/// data-dependent state.
pub fn syntactic_independence(pass: PassId, sources: SemSet) -> bool {
    let inserted = inserted_instrs(pass);
    let triggers: Vec<InstrClass> =
        sources.iter().flat_map(|id| trigger_set(id).iter().copied()).collect();
    let clause1 = inserted.iter().all(|c| !triggers.contains(c));
    let clause2 = inserted.iter().all(|c| !STATE_TOUCHING.contains(c));
    clause1 && clause2
}

#[derive(Debug, Clone, Serialize)]
pub struct TrappedVerdict {
    pub pass: String,
    pub base: String,
    pub trapped: bool,
    /// First non-marker event observed inside a transaction.
    pub witness: Option<EventSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventSummary {
    pub index: usize,
    pub json: String,
}

fn summarize(trace: &Trace, index: usize) -> EventSummary {
    EventSummary { index, json: trace.events()[index].json_line() }
}

/// Trapped speculation: the speculative projection of every run of the
/// compiled program contains only start/rollback markers.
pub fn trapped_speculation(
    pass: PassId,
    component: &Component,
    attacker: &Attacker,
    opts: &SpecOptions,
    pass_opts: &PassOptions,
) -> Result<TrappedVerdict, LiftError> {
    let base = pass.descriptor().base_semantics;
    let compiled = compile(pass, component, pass_opts)?;
    let program = link(attacker, &compiled)?.program;
    let trace = run_spec(&program, SemSet::of(&[base]), opts)?;
    let spec = spec_projection(&trace)?;
    let offender = spec.events().iter().position(|e| !e.kind.is_marker());
    let witness = offender.map(|i| summarize(&spec, i));
    Ok(TrappedVerdict {
        pass: pass.to_string(),
        base: base.to_string(),
        trapped: witness.is_none(),
        witness,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NestingVerdict {
    pub sources: String,
    pub applicable: bool,
    pub holds: bool,
    pub witness: Option<EventSummary>,
}

/// Safe nesting over one trace: every event whose enclosing transactions
/// span at least two distinct sources must be safe.
pub fn safe_nesting_of_trace(sources: SemSet, trace: &Trace) -> NestingVerdict {
    if sources.len() < 2 {
        return NestingVerdict {
            sources: sources.to_string(),
            applicable: false,
            holds: true,
            witness: None,
        };
    }
    let mut witness = None;
    for (i, e) in trace.events().iter().enumerate() {
        if e.kind.is_marker() {
            continue;
        }
        let mut ids: Vec<SemId> = e.spec_stack.iter().map(|(id, _)| *id).collect();
        ids.dedup();
        let cross_nested = ids.len() >= 2;
        if cross_nested && e.taint == Taint::U {
            witness = Some(summarize(trace, i));
            break;
        }
    }
    NestingVerdict {
        sources: sources.to_string(),
        applicable: true,
        holds: witness.is_none(),
        witness,
    }
}

/// Safe nesting of a whole program under a combined semantics.
pub fn safe_nesting(
    program: &crate::lang::Program,
    sources: SemSet,
    opts: &SpecOptions,
) -> Result<NestingVerdict, LiftError> {
    let trace = run_spec(program, sources, opts)?;
    Ok(safe_nesting_of_trace(sources, &trace))
}

/// Safe nesting across the base/extension split: only events whose
/// enclosing transactions span both sides count. Nesting wholly inside
/// the extension is the extension's own leakage and is governed by the
/// independence and preservation conditions instead.
pub fn safe_nesting_split_of_trace(base: SemSet, ext: SemSet, trace: &Trace) -> NestingVerdict {
    let sources = base.union(ext);
    if base.is_empty() || ext.is_empty() {
        return NestingVerdict {
            sources: sources.to_string(),
            applicable: false,
            holds: true,
            witness: None,
        };
    }
    let mut witness = None;
    for (i, e) in trace.events().iter().enumerate() {
        if e.kind.is_marker() || e.taint != Taint::U {
            continue;
        }
        let in_base = e.spec_stack.iter().any(|(id, _)| base.contains(*id));
        let in_ext = e.spec_stack.iter().any(|(id, _)| ext.contains(*id));
        if in_base && in_ext {
            witness = Some(summarize(trace, i));
            break;
        }
    }
    NestingVerdict {
        sources: sources.to_string(),
        applicable: true,
        holds: witness.is_none(),
        witness,
    }
}

/// A corpus of (component, attacker) pairs for the empirical checks.
pub type Corpus<'a> = &'a [(String, Component, Attacker)];

#[derive(Debug, Clone, Serialize)]
pub struct IndependenceReport {
    pub pass: String,
    pub extension: String,
    /// Pairs whose source was already unsafe under the extension and were
    /// skipped.
    pub skipped: Vec<String>,
    pub holds: bool,
    pub falsifier: Option<String>,
}

/// Empirical independence in extension: sources that are safe under the
/// extension semantics stay safe after compilation.
pub fn independence_empirical(
    pass: PassId,
    extension: SemSet,
    corpus: Corpus,
    opts: &SpecOptions,
    pass_opts: &PassOptions,
) -> Result<IndependenceReport, LiftError> {
    let mut skipped = Vec::new();
    let mut falsifier = None;
    for (name, component, attacker) in corpus {
        let source = link(attacker, component)?.program;
        if !check_ss(&source, extension, opts)?.safe {
            skipped.push(name.clone());
            continue;
        }
        let compiled = compile(pass, component, pass_opts)?;
        let program = link(attacker, &compiled)?.program;
        if !check_ss(&program, extension, opts)?.safe {
            falsifier = Some(name.clone());
            break;
        }
    }
    Ok(IndependenceReport {
        pass: pass.to_string(),
        extension: extension.to_string(),
        skipped,
        holds: falsifier.is_none(),
        falsifier,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CrsspReport {
    pub pass: String,
    pub base: String,
    pub extension: String,
    pub combined: String,
    /// Pairs filtered out by the precondition (unsafe under the
    /// extension).
    pub skipped: Vec<String>,
    pub holds: bool,
    pub falsifier: Option<String>,
}

/// Conditional preservation, observed: corpus members that are safe under
/// the extension semantics compile to programs safe under base plus
/// extension.
pub fn crssp_empirical(
    pass: PassId,
    extension: SemSet,
    corpus: Corpus,
    opts: &SpecOptions,
    pass_opts: &PassOptions,
) -> Result<CrsspReport, LiftError> {
    let base = pass.descriptor().base_semantics;
    let combined = extension.with(base);
    let mut skipped = Vec::new();
    let mut falsifier = None;
    for (name, component, attacker) in corpus {
        let source = link(attacker, component)?.program;
        // Precondition: safe under NS (always true by construction, still
        // checked) and under the extension semantics.
        if !check_ss(&source, SemSet::EMPTY, opts)?.safe
            || !check_ss(&source, extension, opts)?.safe
        {
            skipped.push(name.clone());
            continue;
        }
        let compiled = compile(pass, component, pass_opts)?;
        let program = link(attacker, &compiled)?.program;
        if !check_ss(&program, combined, opts)?.safe {
            falsifier = Some(name.clone());
            break;
        }
    }
    Ok(CrsspReport {
        pass: pass.to_string(),
        base: base.to_string(),
        extension: extension.to_string(),
        combined: combined.to_string(),
        skipped,
        holds: falsifier.is_none(),
        falsifier,
    })
}

/// How independence was attained for one cell of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IndependenceKind {
    /// Decided syntactically.
    Syntactic,
    /// Observed on the corpus only.
    Observed,
    /// Falsified on the corpus.
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct LiftRow {
    pub sources: String,
    /// Decided: syntactic independence of the pass w.r.t. the full set.
    pub si: bool,
    /// Observed: independence w.r.t. the extension (set minus base).
    pub independence: IndependenceKind,
    /// Observed: compiled corpus traps speculation under the base.
    pub trapped: bool,
    /// Observed: safe nesting of the compiled corpus under the full set.
    pub nesting: NestingOutcome,
    /// Observed: conditional preservation on the corpus.
    pub crssp: bool,
    /// All lifting preconditions hold for this set.
    pub lifted: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NestingOutcome {
    NotApplicable,
    Holds,
    Fails,
}

#[derive(Debug, Clone, Serialize)]
pub struct LiftReport {
    pub pass: String,
    pub base: String,
    pub rows: Vec<LiftRow>,
    /// Maximal combinable sets where every precondition held.
    pub strongest: Vec<String>,
}

/// Memoized per-member run verdicts so the lattice sweep executes each
/// (program, source set) combination once.
struct CorpusRuns<'a> {
    corpus: Corpus<'a>,
    compiled: Vec<crate::lang::Program>,
    source: Vec<crate::lang::Program>,
    source_safe: std::collections::BTreeMap<(usize, SemSet), bool>,
    compiled_safe: std::collections::BTreeMap<(usize, SemSet), bool>,
    compiled_nesting: std::collections::BTreeMap<(usize, SemSet), bool>,
}

impl<'a> CorpusRuns<'a> {
    fn new(
        pass: PassId,
        corpus: Corpus<'a>,
        pass_opts: &PassOptions,
    ) -> Result<CorpusRuns<'a>, LiftError> {
        let mut compiled = Vec::new();
        let mut source = Vec::new();
        for (_, component, attacker) in corpus {
            source.push(link(attacker, component)?.program);
            let c = compile(pass, component, pass_opts)?;
            compiled.push(link(attacker, &c)?.program);
        }
        Ok(CorpusRuns {
            corpus,
            compiled,
            source,
            source_safe: Default::default(),
            compiled_safe: Default::default(),
            compiled_nesting: Default::default(),
        })
    }

    fn source_safe(&mut self, i: usize, s: SemSet, o: &SpecOptions) -> Result<bool, LiftError> {
        if let Some(&v) = self.source_safe.get(&(i, s)) {
            return Ok(v);
        }
        let v = check_ss(&self.source[i], s, o)?.safe;
        self.source_safe.insert((i, s), v);
        Ok(v)
    }

    fn compiled_run(
        &mut self,
        i: usize,
        base: SemSet,
        s: SemSet,
        o: &SpecOptions,
    ) -> Result<(), LiftError> {
        if self.compiled_safe.contains_key(&(i, s)) {
            return Ok(());
        }
        let trace = run_spec(&self.compiled[i], s, o)?;
        self.compiled_safe.insert((i, s), trace.all_safe());
        let split = safe_nesting_split_of_trace(base, s.difference(base), &trace);
        self.compiled_nesting.insert((i, s), split.holds);
        Ok(())
    }

    fn compiled_safe(
        &mut self,
        i: usize,
        base: SemSet,
        s: SemSet,
        o: &SpecOptions,
    ) -> Result<bool, LiftError> {
        self.compiled_run(i, base, s, o)?;
        Ok(self.compiled_safe[&(i, s)])
    }

    fn compiled_nesting(
        &mut self,
        i: usize,
        base: SemSet,
        s: SemSet,
        o: &SpecOptions,
    ) -> Result<bool, LiftError> {
        self.compiled_run(i, base, s, o)?;
        Ok(self.compiled_nesting[&(i, s)])
    }

    fn len(&self) -> usize {
        self.corpus.len()
    }
}

/// Build the lattice-wide report for one pass: every combinable superset
/// of the base semantics gets a row with the decided and observed
/// verdicts, and the strongest liftable sets are the maximal rows where
/// everything holds.
pub fn lift_report(
    pass: PassId,
    corpus: Corpus,
    opts: &SpecOptions,
    pass_opts: &PassOptions,
) -> Result<LiftReport, LiftError> {
    let base = pass.descriptor().base_semantics;
    let base_set = SemSet::of(&[base]);
    let mut runs = CorpusRuns::new(pass, corpus, pass_opts)?;

    // Trapped speculation is a per-pass verdict under the base semantics.
    let mut trapped_all = true;
    for (_, component, attacker) in corpus {
        if !trapped_speculation(pass, component, attacker, opts, pass_opts)?.trapped {
            trapped_all = false;
            break;
        }
    }

    let supersets: Vec<SemSet> = SemSet::all_combinable()
        .into_iter()
        .filter(|s| base_set.is_subset(*s))
        .collect();

    let slh_pass = matches!(pass, PassId::SslhB | PassId::UslhB);
    let mut rows = Vec::new();
    let mut lifted_sets: Vec<SemSet> = Vec::new();
    for s in supersets {
        let extension = s.difference(base_set);
        let si = syntactic_independence(pass, s);
        let independence = if syntactic_independence(pass, extension) {
            IndependenceKind::Syntactic
        } else {
            let mut holds = true;
            for i in 0..runs.len() {
                if runs.source_safe(i, extension, opts)?
                    && !runs.compiled_safe(i, base_set, extension, opts)?
                {
                    holds = false;
                    break;
                }
            }
            if holds { IndependenceKind::Observed } else { IndependenceKind::Failed }
        };
        let nesting = if s.len() < 2 {
            NestingOutcome::NotApplicable
        } else {
            let mut holds = true;
            for i in 0..runs.len() {
                if !runs.compiled_nesting(i, base_set, s, opts)? {
                    holds = false;
                    break;
                }
            }
            if holds { NestingOutcome::Holds } else { NestingOutcome::Fails }
        };
        let mut crssp = true;
        for i in 0..runs.len() {
            let precondition = runs.source_safe(i, SemSet::EMPTY, opts)?
                && runs.source_safe(i, extension, opts)?;
            if precondition && !runs.compiled_safe(i, base_set, s, opts)? {
                crssp = false;
                break;
            }
        }
        let lifted = independence != IndependenceKind::Failed
            && !matches!(nesting, NestingOutcome::Fails)
            && crssp;
        let note = if slh_pass && s.contains(SemId::J) && independence != IndependenceKind::Failed
        {
            Some(
                "independence observed on this corpus only; not a liftability claim for \
                 jump speculation"
                    .to_string(),
            )
        } else {
            None
        };
        if lifted {
            lifted_sets.push(s);
        }
        rows.push(LiftRow {
            sources: s.to_string(),
            si,
            independence,
            trapped: trapped_all,
            nesting,
            crssp,
            lifted,
            note,
        });
    }

    // Keep only maximal lifted sets.
    let strongest: Vec<String> = lifted_sets
        .iter()
        .filter(|s| !lifted_sets.iter().any(|t| *t != **s && s.is_subset(*t)))
        .map(|s| s.to_string())
        .collect();

    Ok(LiftReport { pass: pass.to_string(), base: base.to_string(), rows, strongest })
}

/// Plain-text rendering of the report matrix.
pub fn render_report(report: &LiftReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("pass {} (base {})\n", report.pass, report.base));
    out.push_str("sources          SI     independence  trapped  nesting  crssp  lifted\n");
    for row in &report.rows {
        let ind = match row.independence {
            IndependenceKind::Syntactic => "SI",
            IndependenceKind::Observed => "observed",
            IndependenceKind::Failed => "failed",
        };
        let nest = match row.nesting {
            NestingOutcome::NotApplicable => "n/a",
            NestingOutcome::Holds => "holds",
            NestingOutcome::Fails => "fails",
        };
        out.push_str(&format!(
            "{:<16} {:<6} {:<13} {:<8} {:<8} {:<6} {}\n",
            row.sources,
            if row.si { "yes" } else { "no" },
            ind,
            if row.trapped { "yes" } else { "no" },
            nest,
            if row.crssp { "yes" } else { "no" },
            if row.lifted { "yes" } else { "no" },
        ));
        if let Some(note) = &row.note {
            out.push_str(&format!("    note: {note}\n"));
        }
    }
    out.push_str(&format!("strongest: {}\n", report.strongest.join(", ")));
    out
}
