//! Non-speculative semantics: paired value/taint execution, event emission,
//! and big-step runs.
//!
//! Every register and memory cell carries a value and a taint from the
//! two-point lattice `S < U`. Execution emits events whose taint is the meet
//! of the program-counter taint and the data taint of the step; at the
//! non-speculative level the pc taint is `S`, so every emitted event is
//! safe. Steps wholly inside attacker code are silenced.
//!
//! # Trace serialization
//!
//! One JSON object per line, stable field order:
//!
//! ```text
//! {"kind":"load","payload":-1,"taint":"U","spec_stack":[["B",0]]}
//! ```
//!
//! Kinds and payloads: `call?`/`call!` carry the callee name, `ret?`/`ret!`
//! carry null, `load`/`store` carry the address, `pc` carries the target
//! label, `op` carries both operands, `start`/`rollback` carry
//! `[semantics, counter]`, `term` carries null.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::lang::{Binop, Expr, Instr, Program, Unop};
use crate::spec::SemId;

/// Two-point taint lattice with `S < U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Taint {
    S,
    U,
}

impl Taint {
    pub fn join(self, other: Taint) -> Taint {
        self.max(other)
    }

    pub fn meet(self, other: Taint) -> Taint {
        self.min(other)
    }
}

impl fmt::Display for Taint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Taint::S => write!(f, "S"),
            Taint::U => write!(f, "U"),
        }
    }
}

/// Runtime values: integers, label values (as flat line indices), or the
/// undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Lab(usize),
    Bot,
}

impl Value {
    /// Branch/guard truthiness: zero is false, everything else (including
    /// labels) is true; the undefined value is false.
    pub fn truthy(self) -> bool {
        match self {
            Value::Int(n) => n != 0,
            Value::Lab(_) => true,
            Value::Bot => false,
        }
    }
}

/// A tainted value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tv {
    pub v: Value,
    pub t: Taint,
}

impl Tv {
    pub fn new(v: Value, t: Taint) -> Tv {
        Tv { v, t }
    }
}

/// Register file with a fixed default: unset registers read as `(0, S)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegisterFile {
    regs: BTreeMap<String, Tv>,
}

impl RegisterFile {
    pub fn get(&self, name: &str) -> Tv {
        self.regs.get(name).copied().unwrap_or(Tv::new(Value::Int(0), Taint::S))
    }

    pub fn set(&mut self, name: &str, tv: Tv) {
        self.regs.insert(name.to_string(), tv);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tv)> {
        self.regs.iter()
    }
}

/// Memory over bounded signed addresses. Unset public cells read `(0, S)`,
/// unset private cells `(0, U)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    cells: BTreeMap<i64, Tv>,
    pub bound: i64,
}

impl Memory {
    pub fn new(bound: i64) -> Memory {
        Memory { cells: BTreeMap::new(), bound }
    }

    pub fn in_range(&self, addr: i64) -> bool {
        addr.abs() <= self.bound
    }

    pub fn get(&self, addr: i64) -> Tv {
        self.cells.get(&addr).copied().unwrap_or_else(|| {
            let t = if addr < 0 { Taint::U } else { Taint::S };
            Tv::new(Value::Int(0), t)
        })
    }

    pub fn set(&mut self, addr: i64, tv: Tv) {
        self.cells.insert(addr, tv);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&i64, &Tv)> {
        self.cells.iter()
    }
}

/// One stack frame: return addresses (line indices past the end mean
/// "return halts") with the pc taint they were pushed under.
pub type Frame = Vec<(usize, Taint)>;

/// A program state: pc, registers, memory, and the frame stack. A fresh
/// inner frame is pushed exactly at cross-boundary calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    /// `None` is the halted pc.
    pub pc: Option<usize>,
    pub regs: RegisterFile,
    pub mem: Memory,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, Copy)]
pub struct MachineOptions {
    pub fuel: u64,
    pub mem_bound: i64,
    /// Compatibility switch: public stores write taint `S` into the cell
    /// instead of propagating the source register's taint.
    pub taint_store_paper: bool,
    /// Test-only sabotage: private loads do not mark their destination
    /// unsafe. Used as the negative control for the safety checkers.
    pub broken_taint: bool,
}

impl Default for MachineOptions {
    fn default() -> Self {
        MachineOptions { fuel: 100_000, mem_bound: 1 << 16, taint_store_paper: false, broken_taint: false }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MachineError {
    #[error("stuck state at {label}: {reason}")]
    Stuck { label: String, reason: StuckReason },
    #[error("fuel exhausted after {0} steps")]
    FuelExhausted(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StuckReason {
    #[error("arithmetic over a label or undefined value")]
    ArithmeticOnLabel,
    #[error("memory address is not an integer")]
    AddressNotInt,
    #[error("memory address out of range")]
    OutOfRangeAddress,
    #[error("attacker access to private memory")]
    AttackerPrivateAccess,
    #[error("private-memory instruction on a public address")]
    RegionViolation,
    #[error("private-memory or administrative instruction in attacker code")]
    AdministrativeInAttacker,
    #[error("jump target is not an internal label")]
    BadJumpTarget,
    #[error("call to undefined function `{0}`")]
    UnknownFunction(String),
    #[error("no return address to manipulate")]
    EmptyFrame,
    #[error("variable-latency operands must be integers")]
    NonNumericOperands,
}

// ---------------------------------------------------------------------------
// Events and traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum EventKind {
    /// Call into the component (`call?`).
    CallIn(String),
    /// Call out to the attacker (`call!`).
    CallOut(String),
    /// Return into the component (`ret?`).
    RetIn,
    /// Return out to the attacker (`ret!`).
    RetOut,
    Load(i64),
    Store(i64),
    /// Control transfer to a label (branch or jump target).
    Pc(String),
    /// Variable-latency operands.
    Op(i64, i64),
    Start(SemId, u64),
    Rollback(SemId, u64),
    Terminate,
}

impl EventKind {
    pub fn is_marker(&self) -> bool {
        matches!(self, EventKind::Start(..) | EventKind::Rollback(..))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub kind: EventKind,
    pub taint: Taint,
    /// Transactions open at emission, outermost first.
    pub spec_stack: Vec<(SemId, u64)>,
}

impl Event {
    pub fn json_line(&self) -> String {
        let (kind, payload) = match &self.kind {
            EventKind::CallIn(f) => ("call?", format!("\"{f}\"")),
            EventKind::CallOut(f) => ("call!", format!("\"{f}\"")),
            EventKind::RetIn => ("ret?", "null".into()),
            EventKind::RetOut => ("ret!", "null".into()),
            EventKind::Load(n) => ("load", n.to_string()),
            EventKind::Store(n) => ("store", n.to_string()),
            EventKind::Pc(l) => ("pc", format!("\"{l}\"")),
            EventKind::Op(a, b) => ("op", format!("[{a},{b}]")),
            EventKind::Start(id, c) => ("start", format!("[\"{id}\",{c}]")),
            EventKind::Rollback(id, c) => ("rollback", format!("[\"{id}\",{c}]")),
            EventKind::Terminate => ("term", "null".into()),
        };
        let stack: Vec<String> =
            self.spec_stack.iter().map(|(id, c)| format!("[\"{id}\",{c}]")).collect();
        format!(
            "{{\"kind\":\"{kind}\",\"payload\":{payload},\"taint\":\"{}\",\"spec_stack\":[{}]}}",
            self.taint,
            stack.join(",")
        )
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.json_line())
    }
}

/// A finite sequence of non-silent events; terminating traces end with
/// `term`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Trace(pub Vec<Event>);

impl Trace {
    pub fn events(&self) -> &[Event] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_safe(&self) -> bool {
        self.0.iter().all(|e| e.taint == Taint::S)
    }

    pub fn first_unsafe(&self) -> Option<(usize, &Event)> {
        self.0.iter().enumerate().find(|(_, e)| e.taint == Taint::U)
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.0 {
            out.push_str(&e.json_line());
            out.push('\n');
        }
        out
    }

    /// Index of the first position where two traces differ, if any.
    pub fn first_divergence(&self, other: &Trace) -> Option<usize> {
        let n = self.0.len().min(other.0.len());
        for i in 0..n {
            if self.0[i] != other.0[i] {
                return Some(i);
            }
        }
        (self.0.len() != other.0.len()).then_some(n)
    }
}

// ---------------------------------------------------------------------------
// Expression evaluation
// ---------------------------------------------------------------------------

/// Evaluate an expression: value per the evaluation rules, taint as the
/// join of all register taints read (literals are safe).
pub fn eval_expr(program: &Program, regs: &RegisterFile, e: &Expr) -> Result<Tv, StuckReason> {
    match e {
        Expr::Int(n) => Ok(Tv::new(Value::Int(*n), Taint::S)),
        Expr::Bot => Ok(Tv::new(Value::Bot, Taint::S)),
        Expr::LabelRef(name) => {
            let idx = program.resolve_label(name).map_err(|_| StuckReason::BadJumpTarget)?;
            Ok(Tv::new(Value::Lab(idx), Taint::S))
        }
        Expr::Reg(r) => Ok(regs.get(r)),
        Expr::Unop(op, a) => {
            let a = eval_expr(program, regs, a)?;
            let n = match a.v {
                Value::Int(n) => n,
                _ => return Err(StuckReason::ArithmeticOnLabel),
            };
            let v = match op {
                Unop::Not => i64::from(n == 0),
                Unop::Neg => n.wrapping_neg(),
            };
            Ok(Tv::new(Value::Int(v), a.t))
        }
        Expr::Binop(op, a, b) => {
            let a = eval_expr(program, regs, a)?;
            let b = eval_expr(program, regs, b)?;
            let (x, y) = match (a.v, b.v) {
                (Value::Int(x), Value::Int(y)) => (x, y),
                _ => return Err(StuckReason::ArithmeticOnLabel),
            };
            let v = match op {
                Binop::Add => x.wrapping_add(y),
                Binop::Sub => x.wrapping_sub(y),
                Binop::Mul => x.wrapping_mul(y),
                Binop::Lt => i64::from(x < y),
                Binop::Le => i64::from(x <= y),
                Binop::Eq => i64::from(x == y),
                Binop::Ne => i64::from(x != y),
                Binop::And => i64::from(x != 0 && y != 0),
                Binop::Or => i64::from(x != 0 || y != 0),
            };
            Ok(Tv::new(Value::Int(v), a.t.join(b.t)))
        }
    }
}

// ---------------------------------------------------------------------------
// Single steps
// ---------------------------------------------------------------------------

/// A raw step result before pc-taint combination and attacker filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub kind: Option<EventKind>,
    /// Data taint of the observation per the taint rules.
    pub taint: Taint,
}

impl RawEvent {
    fn eps() -> RawEvent {
        RawEvent { kind: None, taint: Taint::S }
    }

    fn new(kind: EventKind, taint: Taint) -> RawEvent {
        RawEvent { kind: Some(kind), taint }
    }
}

/// Build the initial state: all registers `(0, S)`, pc at `main`'s start,
/// one empty frame.
pub fn initial_state(program: &Program, opts: &MachineOptions) -> Configuration {
    let mut mem = Memory::new(opts.mem_bound);
    for (&addr, &(v, t)) in &program.init_memory {
        mem.set(addr, Tv::new(Value::Int(v), t));
    }
    Configuration {
        pc: Some(program.main_start()),
        regs: RegisterFile::default(),
        mem,
        frames: vec![Vec::new()],
    }
}

/// What a single architectural step did, for the speculative engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEffect {
    Plain,
    Call { internal: bool, ret_to: usize },
    Ret { target: Option<usize> },
    Halted,
}

/// Execute one instruction of the non-speculative semantics.
///
/// `pc_taint` is the caller's program-counter taint; it decorates pushed
/// return addresses and is combined into the emitted event by the caller.
pub fn step_ns(
    program: &Program,
    cfg: &Configuration,
    pc_taint: Taint,
    opts: &MachineOptions,
) -> Result<(Configuration, RawEvent, StepEffect), StuckReason> {
    let pc = match cfg.pc {
        Some(pc) if pc < program.len() => pc,
        _ => {
            // Terminate rule: no instruction at the pc.
            let mut next = cfg.clone();
            next.pc = None;
            return Ok((next, RawEvent::eps(), StepEffect::Halted));
        }
    };
    let line = &program.lines[pc];
    let in_attacker = program.in_attacker(pc);
    let mut next = cfg.clone();
    next.pc = program.succ(pc);

    let check_addr = |tv: Tv, private_only: bool| -> Result<(i64, Taint), StuckReason> {
        let n = match tv.v {
            Value::Int(n) => n,
            _ => return Err(StuckReason::AddressNotInt),
        };
        if !cfg.mem.in_range(n) {
            return Err(StuckReason::OutOfRangeAddress);
        }
        if private_only && n >= 0 {
            return Err(StuckReason::RegionViolation);
        }
        if in_attacker && n < 0 {
            return Err(StuckReason::AttackerPrivateAccess);
        }
        Ok((n, tv.t))
    };

    match &line.instr {
        Instr::Skip | Instr::Spbarr => Ok((next, RawEvent::eps(), StepEffect::Plain)),
        Instr::Assign(x, e) => {
            let tv = eval_expr(program, &cfg.regs, e)?;
            next.regs.set(x, tv);
            Ok((next, RawEvent::eps(), StepEffect::Plain))
        }
        Instr::CondAssign(x, e, g) => {
            let guard = eval_expr(program, &cfg.regs, g)?;
            if guard.v.truthy() {
                let tv = eval_expr(program, &cfg.regs, e)?;
                next.regs.set(x, tv);
            }
            Ok((next, RawEvent::eps(), StepEffect::Plain))
        }
        Instr::Load(x, e) => {
            let addr = eval_expr(program, &cfg.regs, e)?;
            let (n, t_addr) = check_addr(addr, false)?;
            let cell = cfg.mem.get(n);
            let cell_taint = if opts.broken_taint { Taint::S } else { cell.t };
            next.regs.set(x, Tv::new(cell.v, cell_taint));
            Ok((next, RawEvent::new(EventKind::Load(n), t_addr.join(cell_taint)), StepEffect::Plain))
        }
        Instr::LoadPrv(x, e) => {
            if in_attacker {
                return Err(StuckReason::AdministrativeInAttacker);
            }
            let addr = eval_expr(program, &cfg.regs, e)?;
            let (n, t_addr) = check_addr(addr, true)?;
            let cell = cfg.mem.get(n);
            let dest_taint = if opts.broken_taint { Taint::S } else { Taint::U };
            let cell_taint = if opts.broken_taint { Taint::S } else { cell.t };
            next.regs.set(x, Tv::new(cell.v, dest_taint));
            Ok((next, RawEvent::new(EventKind::Load(n), t_addr.join(cell_taint)), StepEffect::Plain))
        }
        Instr::Store(x, e) => {
            let addr = eval_expr(program, &cfg.regs, e)?;
            let (n, t_addr) = check_addr(addr, false)?;
            let src = cfg.regs.get(x);
            let cell_taint = if opts.taint_store_paper { Taint::S } else { src.t };
            next.mem.set(n, Tv::new(src.v, cell_taint));
            Ok((next, RawEvent::new(EventKind::Store(n), t_addr), StepEffect::Plain))
        }
        Instr::StorePrv(x, e) => {
            if in_attacker {
                return Err(StuckReason::AdministrativeInAttacker);
            }
            let addr = eval_expr(program, &cfg.regs, e)?;
            let (n, t_addr) = check_addr(addr, true)?;
            let src = cfg.regs.get(x);
            next.mem.set(n, src);
            Ok((next, RawEvent::new(EventKind::Store(n), t_addr), StepEffect::Plain))
        }
        Instr::Jmp(e) => {
            let tv = eval_expr(program, &cfg.regs, e)?;
            let target = match tv.v {
                Value::Lab(idx) => idx,
                _ => return Err(StuckReason::BadJumpTarget),
            };
            // Internal-jump judgement: both sides attacker or both component.
            if program.in_attacker(target) != in_attacker {
                return Err(StuckReason::BadJumpTarget);
            }
            next.pc = Some(target);
            let label = program.lines[target].label.clone();
            Ok((next, RawEvent::new(EventKind::Pc(label), tv.t), StepEffect::Plain))
        }
        Instr::Beqz(x, l) => {
            let tv = cfg.regs.get(x);
            let target = program.resolve_label(l).map_err(|_| StuckReason::BadJumpTarget)?;
            // A label value in the register counts as nonzero.
            let taken = tv.v == Value::Int(0);
            let dest = if taken { Some(target) } else { program.succ(pc) };
            next.pc = dest;
            let label = dest
                .map(|d| program.lines[d].label.clone())
                .unwrap_or_else(|| "<end>".to_string());
            Ok((next, RawEvent::new(EventKind::Pc(label), tv.t), StepEffect::Plain))
        }
        Instr::Call(fname) => {
            let target = program
                .fn_start(fname)
                .ok_or_else(|| StuckReason::UnknownFunction(fname.clone()))?;
            let callee_attacker = program.in_attacker(target);
            let ret_to = pc + 1;
            next.pc = Some(target);
            if callee_attacker == in_attacker {
                // Internal call: push onto the current frame, no event.
                next.frames.last_mut().ok_or(StuckReason::EmptyFrame)?.push((ret_to, pc_taint));
                Ok((next, RawEvent::eps(), StepEffect::Call { internal: true, ret_to }))
            } else {
                // Cross call: push onto the current frame, open a new one.
                next.frames.last_mut().ok_or(StuckReason::EmptyFrame)?.push((ret_to, pc_taint));
                next.frames.push(Vec::new());
                let kind = if in_attacker {
                    EventKind::CallIn(fname.clone())
                } else {
                    EventKind::CallOut(fname.clone())
                };
                Ok((next, RawEvent::new(kind, Taint::S), StepEffect::Call { internal: false, ret_to }))
            }
        }
        Instr::Ret => {
            // Pop from the top frame; an empty top frame is dropped first
            // (cross-boundary return). Nothing to pop means the program ends.
            let popped = pop_return(&mut next.frames);
            match popped {
                None => {
                    next.pc = None;
                    Ok((next, RawEvent::eps(), StepEffect::Ret { target: None }))
                }
                Some((ret_to, _t)) => {
                    let target_attacker = if ret_to < program.len() {
                        program.in_attacker(ret_to)
                    } else {
                        in_attacker
                    };
                    next.pc = if ret_to < program.len() { Some(ret_to) } else { None };
                    let ev = if target_attacker == in_attacker {
                        RawEvent::eps()
                    } else if in_attacker {
                        RawEvent::new(EventKind::RetIn, Taint::S)
                    } else {
                        RawEvent::new(EventKind::RetOut, Taint::S)
                    };
                    Ok((next, ev, StepEffect::Ret { target: Some(ret_to) }))
                }
            }
        }
        Instr::Popret => {
            if in_attacker {
                return Err(StuckReason::AdministrativeInAttacker);
            }
            let frame = next.frames.last_mut().ok_or(StuckReason::EmptyFrame)?;
            frame.pop().ok_or(StuckReason::EmptyFrame)?;
            Ok((next, RawEvent::eps(), StepEffect::Plain))
        }
        Instr::Modret(e) => {
            if in_attacker {
                return Err(StuckReason::AdministrativeInAttacker);
            }
            let tv = eval_expr(program, &cfg.regs, e)?;
            let target = match tv.v {
                Value::Lab(idx) => idx,
                _ => return Err(StuckReason::BadJumpTarget),
            };
            let frame = next.frames.last_mut().ok_or(StuckReason::EmptyFrame)?;
            let slot = frame.last_mut().ok_or(StuckReason::EmptyFrame)?;
            *slot = (target, tv.t);
            Ok((next, RawEvent::eps(), StepEffect::Plain))
        }
        Instr::VAssign(x, y, z) => {
            let a = cfg.regs.get(y);
            let b = cfg.regs.get(z);
            let (va, vb) = match (a.v, b.v) {
                (Value::Int(va), Value::Int(vb)) => (va, vb),
                _ => return Err(StuckReason::NonNumericOperands),
            };
            let t = a.t.join(b.t);
            next.regs.set(x, Tv::new(Value::Int(va.wrapping_mul(vb)), t));
            Ok((next, RawEvent::new(EventKind::Op(va, vb), t), StepEffect::Plain))
        }
    }
}

/// Pop the next return address: drop an empty top frame first, then pop
/// from the frame below. `None` when nothing is poppable.
fn pop_return(frames: &mut Vec<Frame>) -> Option<(usize, Taint)> {
    loop {
        let top = frames.last_mut()?;
        if let Some(entry) = top.pop() {
            return Some(entry);
        }
        if frames.len() == 1 {
            return None;
        }
        frames.pop();
    }
}

/// Filter an event per the big-step side condition: a step that starts and
/// ends inside the same attacker function is silent.
pub fn filter_event(
    program: &Program,
    pc_before: usize,
    pc_after: Option<usize>,
    kind: EventKind,
) -> Option<EventKind> {
    if kind.is_marker() || kind == EventKind::Terminate {
        return Some(kind);
    }
    let before = program.func_of(pc_before);
    let after = pc_after.and_then(|pc| program.func_of(pc));
    if let (Some(b), Some(a)) = (before, after) {
        if b.name == a.name && b.attacker_defined {
            return None;
        }
    }
    Some(kind)
}

/// Run the non-speculative semantics to termination.
///
/// This loop is deliberately independent of the speculative engine; the
/// engine with an empty source set must reproduce it event for event.
pub fn run_ns(program: &Program, opts: &MachineOptions) -> Result<Trace, MachineError> {
    let mut cfg = initial_state(program, opts);
    let mut trace = Vec::new();
    let mut steps: u64 = 0;
    loop {
        let pc = match cfg.pc {
            Some(pc) if pc < program.len() => pc,
            _ => {
                trace.push(Event {
                    kind: EventKind::Terminate,
                    taint: Taint::S,
                    spec_stack: Vec::new(),
                });
                return Ok(Trace(trace));
            }
        };
        if steps >= opts.fuel {
            return Err(MachineError::FuelExhausted(steps));
        }
        steps += 1;
        let (next, raw, _) = step_ns(program, &cfg, Taint::S, opts).map_err(|reason| {
            MachineError::Stuck { label: program.lines[pc].label.clone(), reason }
        })?;
        if let Some(kind) = raw.kind {
            if let Some(kind) = filter_event(program, pc, next.pc, kind) {
                trace.push(Event {
                    kind,
                    // Combine rule: the event taint is met with the pc
                    // taint, which is S at the non-speculative level.
                    taint: raw.taint.meet(Taint::S),
                    spec_stack: Vec::new(),
                });
            }
        }
        cfg = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{link, parse, Attacker};

    fn prog(component_src: &str) -> Program {
        let c = parse(component_src).unwrap().into_component().unwrap();
        link(&Attacker::empty(), &c).unwrap().program
    }

    fn linked(component_src: &str, attacker_src: &str) -> Program {
        let c = parse(component_src).unwrap().into_component().unwrap();
        let a = parse(attacker_src).unwrap().into_attacker().unwrap();
        link(&a, &c).unwrap().program
    }

    #[test]
    fn eval_taint_joins() {
        let p = prog("component\nfun main:\nl0: ret\n");
        let mut regs = RegisterFile::default();
        regs.set("x", Tv::new(Value::Int(3), Taint::S));
        let e = Expr::Binop(Binop::Add, Box::new(Expr::reg("x")), Box::new(Expr::Int(2)));
        let tv = eval_expr(&p, &regs, &e).unwrap();
        assert_eq!(tv, Tv::new(Value::Int(5), Taint::S));

        regs.set("x", Tv::new(Value::Int(3), Taint::U));
        let tv = eval_expr(&p, &regs, &e).unwrap();
        assert_eq!(tv, Tv::new(Value::Int(5), Taint::U));
    }

    #[test]
    fn eval_label_arithmetic_is_stuck() {
        let p = prog("component\nfun main:\nl0: ret\n");
        let regs = RegisterFile::default();
        let e = Expr::Binop(Binop::Add, Box::new(Expr::LabelRef("l0".into())), Box::new(Expr::Int(1)));
        assert_eq!(eval_expr(&p, &regs, &e).unwrap_err(), StuckReason::ArithmeticOnLabel);
    }

    #[test]
    fn load_public_cell() {
        let p = prog("component\nfun main:\nl0: load x, 5\nl1: ret\n");
        let opts = MachineOptions::default();
        let mut cfg = initial_state(&p, &opts);
        cfg.mem.set(5, Tv::new(Value::Int(7), Taint::S));
        let (next, raw, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
        assert_eq!(next.regs.get("x"), Tv::new(Value::Int(7), Taint::S));
        assert_eq!(raw.kind, Some(EventKind::Load(5)));
        assert_eq!(raw.taint, Taint::S);
    }

    #[test]
    fn loadprv_marks_destination_unsafe() {
        let p = prog("component\nmem -3 := 9 : U\nfun main:\nl0: loadprv x, -3\nl1: ret\n");
        let opts = MachineOptions::default();
        let cfg = initial_state(&p, &opts);
        let (next, raw, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
        assert_eq!(next.regs.get("x"), Tv::new(Value::Int(9), Taint::U));
        assert_eq!(raw.kind, Some(EventKind::Load(-3)));
        // Event taint carries the cell taint; run_ns meets it back to S.
        assert_eq!(raw.taint, Taint::U);
    }

    #[test]
    fn initial_state_defaults() {
        let p = prog("component\nfun main:\nl0: ret\n");
        let cfg = initial_state(&p, &MachineOptions::default());
        assert_eq!(cfg.pc, Some(p.main_start()));
        assert_eq!(cfg.regs.get("y"), Tv::new(Value::Int(0), Taint::S));
        assert_eq!(cfg.mem.get(-99), Tv::new(Value::Int(0), Taint::U));
        assert_eq!(cfg.mem.get(99), Tv::new(Value::Int(0), Taint::S));
    }

    #[test]
    fn run_minimal_terminates() {
        let p = prog("component\nfun main:\nl0: skip\nl1: ret\n");
        let t = run_ns(&p, &MachineOptions::default()).unwrap();
        assert_eq!(t.events().last().unwrap().kind, EventKind::Terminate);
    }

    #[test]
    fn fuel_exhaustion_reported() {
        let p = prog("component\nfun main:\nl0: jmp &l0\nl1: ret\n");
        let opts = MachineOptions { fuel: 50, ..Default::default() };
        assert_eq!(run_ns(&p, &opts).unwrap_err(), MachineError::FuelExhausted(50));
    }

    #[test]
    fn attacker_internal_events_are_silent() {
        // The attacker's own loads produce no events; the cross call does.
        let p = linked(
            "component\nfun gadget:\ng0: load y, 3\ng1: ret\n",
            "attacker\nfun main:\na0: load x, 5\na1: call gadget\na2: ret\n",
        );
        let t = run_ns(&p, &MachineOptions::default()).unwrap();
        let kinds: Vec<&EventKind> = t.events().iter().map(|e| &e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                &EventKind::CallIn("gadget".into()),
                &EventKind::Load(3),
                &EventKind::RetOut,
                &EventKind::Terminate
            ]
        );
    }

    #[test]
    fn frame_depth_restored_on_termination() {
        let p = linked(
            "component\nfun gadget:\ng0: call helper\ng1: ret\nfun helper:\nh0: skip\nh1: ret\n",
            "attacker\nfun main:\na0: call gadget\na1: ret\n",
        );
        let opts = MachineOptions::default();
        let mut cfg = initial_state(&p, &opts);
        let initial_depth = cfg.frames.len();
        while cfg.pc.is_some() {
            let (next, _, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
            cfg = next;
        }
        assert_eq!(cfg.frames.len(), initial_depth);
    }

    #[test]
    fn store_propagates_source_taint_by_default() {
        let p = prog(
            "component\nmem -1 := 7 : U\nfun main:\nl0: loadprv s, -1\nl1: store s, 4\nl2: ret\n",
        );
        let opts = MachineOptions::default();
        let mut cfg = initial_state(&p, &opts);
        for _ in 0..2 {
            let (next, _, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
            cfg = next;
        }
        assert_eq!(cfg.mem.get(4), Tv::new(Value::Int(7), Taint::U));

        // Compatibility switch restores the literal rule.
        let opts = MachineOptions { taint_store_paper: true, ..Default::default() };
        let mut cfg = initial_state(&p, &opts);
        for _ in 0..2 {
            let (next, _, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
            cfg = next;
        }
        assert_eq!(cfg.mem.get(4), Tv::new(Value::Int(7), Taint::S));
    }

    #[test]
    fn ret_with_no_frames_halts() {
        let p = prog("component\nfun main:\nl0: skip\nl1: ret\n");
        let t = run_ns(&p, &MachineOptions::default()).unwrap();
        assert_eq!(t.events().last().unwrap().kind, EventKind::Terminate);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn out_of_range_address_is_stuck() {
        let p = prog("component\nfun main:\nl0: load x, 200000\nl1: ret\n");
        let opts = MachineOptions::default();
        let cfg = initial_state(&p, &opts);
        assert_eq!(
            step_ns(&p, &cfg, Taint::S, &opts).unwrap_err(),
            StuckReason::OutOfRangeAddress
        );
    }

    #[test]
    fn beqz_on_label_value_falls_through() {
        let p = prog("component\nfun main:\nl0: t <- &l2\nl1: beqz t, l3\nl2: skip\nl3: ret\n");
        let opts = MachineOptions::default();
        let mut cfg = initial_state(&p, &opts);
        let (next, _, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
        cfg = next;
        let (next, raw, _) = step_ns(&p, &cfg, Taint::S, &opts).unwrap();
        // A label counts as nonzero: the branch is not taken.
        assert_eq!(next.pc, Some(p.resolve_label("l2").unwrap()));
        assert_eq!(raw.kind, Some(EventKind::Pc("l2".into())));
    }

    #[test]
    fn attacker_cannot_reach_private_memory() {
        let p = linked(
            "component\nfun gadget:\ng0: ret\n",
            "attacker\nfun main:\na0: load x, 0 - 5\na1: ret\n",
        );
        let opts = MachineOptions::default();
        let cfg = initial_state(&p, &opts);
        assert_eq!(
            step_ns(&p, &cfg, Taint::S, &opts).unwrap_err(),
            StuckReason::AttackerPrivateAccess
        );
    }

    #[test]
    fn json_line_format_is_stable() {
        let e = Event {
            kind: EventKind::Load(-1),
            taint: Taint::U,
            spec_stack: vec![(SemId::B, 0)],
        };
        assert_eq!(
            e.json_line(),
            "{\"kind\":\"load\",\"payload\":-1,\"taint\":\"U\",\"spec_stack\":[[\"B\",0]]}"
        );
    }
}
