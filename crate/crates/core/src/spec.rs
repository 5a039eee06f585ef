//! The always-mispredict speculative engine.
//!
//! Execution state is a stack of speculative instances; only the top one
//! steps. When an instruction that triggers one of the active speculation
//! sources executes inside the component, the engine first performs the
//! architectural step, then pushes the mispredicted instance(s) on top with
//! a bounded speculation window and an unsafe pc taint. A transaction spans
//! from its `start` marker to the matching `rollback`; the architectural
//! event of the triggering instruction is emitted before `start`, so the
//! non-speculative projection of any run reproduces the plain run exactly.
//!
//! Speculation sources:
//! - `B`: branch misprediction (`beqz` takes the wrong direction),
//! - `J`: indirect-jump misprediction (every component label is a target),
//! - `S`: store bypass (the store is skipped),
//! - `R`: return misprediction through the return stack buffer,
//! - `SLS`: straight-line speculation (the return is bypassed).
//!
//! `R` and `SLS` both speculate on `ret` and never combine. A jump trigger
//! pushes one instance per candidate target; each instance is its own
//! transaction, opened when it first runs, so brackets stay well nested and
//! every transaction holds at most `omega` of its own events.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::lang::{Expr, Instr, Program};
use crate::machine::{
    filter_event, initial_state, step_ns, Configuration, Event, EventKind, MachineError,
    MachineOptions, StepEffect, Taint, Trace,
};

/// Identifier of one speculation source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum SemId {
    B,
    J,
    S,
    R,
    Sls,
}

impl SemId {
    pub const ALL: [SemId; 5] = [SemId::B, SemId::J, SemId::S, SemId::R, SemId::Sls];
}

impl fmt::Display for SemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemId::B => write!(f, "B"),
            SemId::J => write!(f, "J"),
            SemId::S => write!(f, "S"),
            SemId::R => write!(f, "R"),
            SemId::Sls => write!(f, "SLS"),
        }
    }
}

impl FromStr for SemId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "B" | "b" => Ok(SemId::B),
            "J" | "j" => Ok(SemId::J),
            "S" | "s" => Ok(SemId::S),
            "R" | "r" => Ok(SemId::R),
            "SLS" | "sls" | "Sls" => Ok(SemId::Sls),
            other => Err(format!("unknown speculation source `{other}`")),
        }
    }
}

/// A set of speculation sources. `R` and `SLS` speculate on the same
/// instruction and cannot be combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize)]
pub struct SemSet(u8);

impl SemSet {
    pub const EMPTY: SemSet = SemSet(0);

    fn bit(id: SemId) -> u8 {
        match id {
            SemId::B => 1,
            SemId::J => 2,
            SemId::S => 4,
            SemId::R => 8,
            SemId::Sls => 16,
        }
    }

    pub fn of(ids: &[SemId]) -> SemSet {
        let mut s = SemSet::EMPTY;
        for &id in ids {
            s = s.with(id);
        }
        s
    }

    pub fn with(self, id: SemId) -> SemSet {
        SemSet(self.0 | Self::bit(id))
    }

    pub fn without(self, id: SemId) -> SemSet {
        SemSet(self.0 & !Self::bit(id))
    }

    pub fn contains(self, id: SemId) -> bool {
        self.0 & Self::bit(id) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = SemId> {
        SemId::ALL.into_iter().filter(move |&id| self.contains(id))
    }

    pub fn is_subset(self, other: SemSet) -> bool {
        self.0 & other.0 == self.0
    }

    pub fn union(self, other: SemSet) -> SemSet {
        SemSet(self.0 | other.0)
    }

    pub fn difference(self, other: SemSet) -> SemSet {
        SemSet(self.0 & !other.0)
    }

    /// A set is combinable unless it contains both `R` and `SLS`.
    pub fn combinable(self) -> bool {
        !(self.contains(SemId::R) && self.contains(SemId::Sls))
    }

    /// All 23 combinable nonempty sets, smallest first.
    pub fn all_combinable() -> Vec<SemSet> {
        let mut out: Vec<SemSet> = (1u8..32).map(SemSet).filter(|s| s.combinable()).collect();
        out.sort_by_key(|s| (s.len(), s.0));
        out
    }

    /// Parse `B,J,S` or `B+J+S`; empty or `NS` is the empty set.
    pub fn parse_list(s: &str) -> Result<SemSet, String> {
        let mut set = SemSet::EMPTY;
        let trimmed = s.trim();
        if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("ns") {
            return Ok(set);
        }
        for part in trimmed.split([',', '+']) {
            set = set.with(part.parse()?);
        }
        Ok(set)
    }
}

impl fmt::Display for SemSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "NS");
        }
        let parts: Vec<String> = self.iter().map(|id| id.to_string()).collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// Syntactic classes of instructions, used by the trigger sets and the
/// syntactic-independence check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum InstrClass {
    Skip,
    Assign,
    CondAssign,
    Load,
    LoadPrv,
    Store,
    StorePrv,
    IndirectJmp,
    StaticJmp,
    Beqz,
    Spbarr,
    Call,
    Ret,
    Popret,
    Modret,
    VAssign,
}

impl InstrClass {
    pub fn of(instr: &Instr) -> InstrClass {
        match instr {
            Instr::Skip => InstrClass::Skip,
            Instr::Assign(..) => InstrClass::Assign,
            Instr::CondAssign(..) => InstrClass::CondAssign,
            Instr::Load(..) => InstrClass::Load,
            Instr::LoadPrv(..) => InstrClass::LoadPrv,
            Instr::Store(..) => InstrClass::Store,
            Instr::StorePrv(..) => InstrClass::StorePrv,
            Instr::Jmp(Expr::LabelRef(_)) => InstrClass::StaticJmp,
            Instr::Jmp(_) => InstrClass::IndirectJmp,
            Instr::Beqz(..) => InstrClass::Beqz,
            Instr::Spbarr => InstrClass::Spbarr,
            Instr::Call(_) => InstrClass::Call,
            Instr::Ret => InstrClass::Ret,
            Instr::Popret => InstrClass::Popret,
            Instr::Modret(_) => InstrClass::Modret,
            Instr::VAssign(..) => InstrClass::VAssign,
        }
    }
}

/// The instruction classes a semantics speculates on.
pub fn trigger_set(id: SemId) -> &'static [InstrClass] {
    match id {
        SemId::B => &[InstrClass::Beqz],
        SemId::J => &[InstrClass::IndirectJmp],
        SemId::S => &[InstrClass::Store, InstrClass::StorePrv],
        SemId::R => &[InstrClass::Call, InstrClass::Ret],
        SemId::Sls => &[InstrClass::Ret],
    }
}

/// The transaction an instance belongs to. The marker is emitted when the
/// instance first reaches the top of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Txn {
    pub id: SemId,
    pub ctr: u64,
    pub started: bool,
}

/// One speculative instance: a full program state, the remaining window
/// (`None` for the non-speculative bottom), its pc taint, the return stack
/// buffer when `R` is active, and the transaction it opened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecInstance {
    pub cfg: Configuration,
    pub window: Option<u32>,
    pub pc_taint: Taint,
    pub rsb: Vec<usize>,
    pub txn: Option<Txn>,
}

/// The engine state: the instance stack plus the global window bound and
/// the transaction counter.
#[derive(Debug, Clone)]
pub struct SpecState {
    pub stack: Vec<SpecInstance>,
    pub active: SemSet,
    pub omega: u32,
    pub next_ctr: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("sources {0} and {1} speculate on the same instruction and cannot combine")]
    IncompatibleSources(SemId, SemId),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

#[derive(Debug, Clone, Copy)]
pub struct SpecOptions {
    pub omega: u32,
    pub machine: MachineOptions,
}

impl Default for SpecOptions {
    fn default() -> Self {
        SpecOptions { omega: 20, machine: MachineOptions::default() }
    }
}

impl SpecState {
    pub fn initial(
        program: &Program,
        active: SemSet,
        opts: &SpecOptions,
    ) -> Result<SpecState, SpecError> {
        if !active.combinable() {
            return Err(SpecError::IncompatibleSources(SemId::R, SemId::Sls));
        }
        Ok(SpecState {
            stack: vec![SpecInstance {
                cfg: initial_state(program, &opts.machine),
                window: None,
                pc_taint: Taint::S,
                rsb: Vec::new(),
                txn: None,
            }],
            active,
            omega: opts.omega,
            next_ctr: 0,
        })
    }

    fn top(&self) -> &SpecInstance {
        self.stack.last().expect("instance stack never empties")
    }

    /// Open transactions enclosing the top of the stack, outermost first.
    fn open_stack(&self) -> Vec<(SemId, u64)> {
        self.stack
            .iter()
            .filter_map(|i| i.txn.filter(|t| t.started).map(|t| (t.id, t.ctr)))
            .collect()
    }
}

/// Compute the mispredicted configuration(s) for a trigger, given the
/// state before the architectural step and after it. The list is in
/// exploration order; empty when the source's preconditions fail.
pub fn mispredict(
    id: SemId,
    program: &Program,
    before: &Configuration,
    after: &Configuration,
    rsb_before: &[usize],
) -> Vec<Configuration> {
    let pc = match before.pc {
        Some(pc) => pc,
        None => return Vec::new(),
    };
    match id {
        SemId::B => {
            // The direction not taken architecturally.
            let target = match &program.lines[pc].instr {
                Instr::Beqz(_, l) => program.resolve_label(l).ok(),
                _ => None,
            };
            let Some(target) = target else { return Vec::new() };
            let wrong = if after.pc == Some(target) { program.succ(pc) } else { Some(target) };
            let mut cfg = after.clone();
            cfg.pc = wrong;
            vec![cfg]
        }
        SemId::J => {
            // One instance per component label, in layout order, skipping
            // the architecturally correct target.
            let mut out = Vec::new();
            for idx in program.component_line_indices() {
                if Some(idx) == after.pc {
                    continue;
                }
                let mut cfg = before.clone();
                cfg.pc = Some(idx);
                out.push(cfg);
            }
            out
        }
        SemId::S => {
            // Store skipped: pre-step memory, fall through.
            let mut cfg = before.clone();
            cfg.pc = program.succ(pc);
            vec![cfg]
        }
        SemId::R => {
            // Return speculatively taken to the stale prediction: the RSB
            // top as it stood when the return executed.
            let Some(&predicted) = rsb_before.last() else { return Vec::new() };
            let mut cfg = after.clone();
            cfg.pc = Some(predicted);
            vec![cfg]
        }
        SemId::Sls => {
            // Return bypassed: frames untouched, continue past the ret.
            let mut cfg = before.clone();
            cfg.pc = program.succ(pc);
            vec![cfg]
        }
    }
}

/// Which active source, if any, opens a transaction at `pc`.
fn trigger_for(program: &Program, state: &SpecState, pc: usize) -> Option<SemId> {
    if program.in_attacker(pc) {
        return None;
    }
    let class = InstrClass::of(&program.lines[pc].instr);
    for id in state.active.iter() {
        if !trigger_set(id).contains(&class) {
            continue;
        }
        match id {
            SemId::B | SemId::S => return Some(id),
            SemId::Sls => {
                if class == InstrClass::Ret {
                    return Some(id);
                }
            }
            SemId::J => {
                if class == InstrClass::IndirectJmp {
                    return Some(id);
                }
            }
            SemId::R => {
                // Calls feed the RSB but never open a transaction. Returns
                // speculate when the RSB top disagrees with the
                // architectural target and both sides are component code.
                if class != InstrClass::Ret {
                    continue;
                }
                let top = state.top();
                let predicted = *top.rsb.last()?;
                let target = peek_return(&top.cfg.frames)?;
                if target >= program.len() || program.in_attacker(target) {
                    return None;
                }
                if predicted != target {
                    return Some(id);
                }
                return None;
            }
        }
    }
    None
}

/// The return address the next `ret` will use, without mutating frames.
fn peek_return(frames: &[Vec<(usize, Taint)>]) -> Option<usize> {
    for frame in frames.iter().rev() {
        if let Some(&(addr, _)) = frame.last() {
            return Some(addr);
        }
    }
    None
}

enum StepOutcome {
    Events(Vec<Event>),
    Terminated(Vec<Event>),
    Fault(MachineError),
}

/// Result of one public engine step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    /// Events emitted by this dispatch (possibly none).
    Continue(Vec<Event>),
    /// The bottom instance terminated; the trailing events include the
    /// final `term`.
    Terminated(Vec<Event>),
}

/// One dispatch of the speculative engine: rollback, barrier, transaction
/// opening, or a plain architectural step on the top instance.
pub fn step_spec(
    program: &Program,
    state: &mut SpecState,
    opts: &SpecOptions,
) -> Result<StepResult, MachineError> {
    match engine_step(program, state, opts) {
        StepOutcome::Events(evs) => Ok(StepResult::Continue(evs)),
        StepOutcome::Terminated(evs) => Ok(StepResult::Terminated(evs)),
        StepOutcome::Fault(err) => Err(err),
    }
}

/// One dispatch of the engine: open a pending marker, roll back, step a
/// barrier, open a transaction, or take a plain step.
fn engine_step(program: &Program, state: &mut SpecState, opts: &SpecOptions) -> StepOutcome {
    let mut events = Vec::new();

    // A freshly pushed instance opens its transaction on first contact.
    if let Some(inst) = state.stack.last_mut() {
        if let Some(txn) = &mut inst.txn {
            if !txn.started {
                txn.started = true;
                let (id, ctr) = (txn.id, txn.ctr);
                events.push(Event {
                    kind: EventKind::Start(id, ctr),
                    taint: Taint::S,
                    spec_stack: state.open_stack(),
                });
            }
        }
    }

    let top = state.top().clone();
    let speculating = top.window.is_some();
    let finished = top.cfg.pc.map(|pc| pc >= program.len()).unwrap_or(true);

    if speculating && (top.window == Some(0) || finished) {
        events.extend(rollback(state));
        return StepOutcome::Events(events);
    }
    if !speculating && finished {
        events.push(Event { kind: EventKind::Terminate, taint: Taint::S, spec_stack: Vec::new() });
        return StepOutcome::Terminated(events);
    }

    let pc = top.cfg.pc.expect("checked above");

    // Speculation barriers end speculation; at the bottom they are skips.
    if matches!(program.lines[pc].instr, Instr::Spbarr) {
        let inst = state.stack.last_mut().unwrap();
        inst.cfg.pc = program.succ(pc);
        if speculating {
            inst.window = Some(0);
        }
        return StepOutcome::Events(events);
    }

    let trigger = trigger_for(program, state, pc);

    let (after, raw, effect) = match step_ns(program, &top.cfg, top.pc_taint, &opts.machine) {
        Ok(ok) => ok,
        Err(reason) => {
            if speculating {
                // A stuck speculative instance just rolls back.
                events.extend(rollback(state));
                return StepOutcome::Events(events);
            }
            return StepOutcome::Fault(MachineError::Stuck {
                label: program.lines[pc].label.clone(),
                reason,
            });
        }
    };

    // RSB bookkeeping: calls executed inside the component push their
    // return site; internal component returns consume the prediction.
    let mut rsb = top.rsb.clone();
    if state.active.contains(SemId::R) && !program.in_attacker(pc) {
        match effect {
            StepEffect::Call { ret_to, .. } => rsb.push(ret_to),
            StepEffect::Ret { target: Some(t) } if t < program.len() && !program.in_attacker(t) => {
                rsb.pop();
            }
            _ => {}
        }
    }

    if let Some(kind) = raw.kind {
        if let Some(kind) = filter_event(program, pc, after.pc, kind) {
            events.push(Event {
                kind,
                taint: raw.taint.meet(top.pc_taint),
                spec_stack: state.open_stack(),
            });
        }
    }

    let new_window = top.window.map(|w| w.saturating_sub(1));
    let wrongs = match trigger {
        Some(id) => mispredict(id, program, &top.cfg, &after, &top.rsb),
        None => Vec::new(),
    };

    {
        let inst = state.stack.last_mut().unwrap();
        inst.cfg = after;
        inst.window = new_window;
        inst.rsb = rsb.clone();
    }

    if let Some(id) = trigger {
        if !wrongs.is_empty() {
            let budget = new_window.unwrap_or(opts.omega).min(opts.omega);
            // Counters follow exploration order; the stack pushes in
            // reverse so the first target runs first.
            let ctrs: Vec<u64> = wrongs.iter().map(|_| {
                let c = state.next_ctr;
                state.next_ctr += 1;
                c
            }).collect();
            for (cfg, ctr) in wrongs.into_iter().zip(ctrs).rev() {
                state.stack.push(SpecInstance {
                    cfg,
                    window: Some(budget),
                    pc_taint: Taint::U,
                    rsb: rsb.clone(),
                    txn: Some(Txn { id, ctr, started: false }),
                });
            }
        }
    }

    StepOutcome::Events(events)
}

fn rollback(state: &mut SpecState) -> Vec<Event> {
    let inst = state.stack.pop().expect("rollback needs an instance");
    let txn = inst.txn.expect("only transactional instances roll back");
    debug_assert!(txn.started, "instances open their transaction before finishing");
    let mut spec_stack = state.open_stack();
    spec_stack.push((txn.id, txn.ctr));
    vec![Event {
        kind: EventKind::Rollback(txn.id, txn.ctr),
        taint: Taint::S,
        spec_stack,
    }]
}

/// Execute a whole program under the active sources until termination.
///
/// With an empty source set this is event-identical to
/// [`run_ns`](crate::machine::run_ns).
pub fn run_spec(program: &Program, active: SemSet, opts: &SpecOptions) -> Result<Trace, SpecError> {
    let mut state = SpecState::initial(program, active, opts)?;
    let mut trace = Vec::new();
    let mut steps: u64 = 0;
    loop {
        if steps >= opts.machine.fuel {
            return Err(SpecError::Machine(MachineError::FuelExhausted(steps)));
        }
        steps += 1;
        match engine_step(program, &mut state, opts) {
            StepOutcome::Events(evs) => trace.extend(evs),
            StepOutcome::Terminated(evs) => {
                trace.extend(evs);
                return Ok(Trace(trace));
            }
            StepOutcome::Fault(err) => return Err(SpecError::Machine(err)),
        }
    }
}
