//! The nine countermeasure compiler passes.
//!
//! Every pass is a pure `Component -> Component` rewrite. Inserted
//! instructions get fresh labels spliced between existing chain neighbours,
//! so the original labels (and therefore all static targets) survive
//! verbatim. Synthesized trampoline functions are laid out before the
//! source functions.
//!
//! Fence passes put a speculation barrier right after their trigger
//! instruction. Retpoline passes replace control transfers with a
//! call/trap-loop/return-address-edit trampoline. The load-hardening
//! passes thread a misprediction flag through every function and use it to
//! mask operands; they are the only passes that leave speculation running.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::lang::{Component, Expr, FnDef, Instr, LabelledInstr, Reg};
use crate::spec::{InstrClass, SemId};

/// Registers reserved by the load-hardening passes.
pub const RESERVED_REGS: [&str; 4] = ["r_slh", "r_slhC", "r_scr", "r_scr2"];

/// The misprediction flag: 0 while predictions are correct, nonzero inside
/// a mispredicted path.
const R_SLH: &str = "r_slh";
/// Flag save slot across calls and returns.
const R_SLHC: &str = "r_slhC";
/// Scratch registers for masked operands.
const R_SCR: &str = "r_scr";
const R_SCR2: &str = "r_scr2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PassId {
    FenceSls,
    RetpJ,
    RetpJFence,
    RetpR,
    FenceR,
    FenceS,
    UslhB,
    SslhB,
    FenceB,
}

impl PassId {
    pub const ALL: [PassId; 9] = [
        PassId::FenceSls,
        PassId::RetpJ,
        PassId::RetpJFence,
        PassId::RetpR,
        PassId::FenceR,
        PassId::FenceS,
        PassId::UslhB,
        PassId::SslhB,
        PassId::FenceB,
    ];

    pub fn descriptor(self) -> PassDescriptor {
        let (base, inserted): (SemId, &'static [InstrClass]) = match self {
            PassId::FenceSls => (SemId::Sls, FENCE_INSERTED),
            PassId::RetpJ | PassId::RetpJFence => (SemId::J, RETP_J_INSERTED),
            PassId::RetpR => (SemId::R, RETP_R_INSERTED),
            PassId::FenceR => (SemId::R, FENCE_INSERTED),
            PassId::FenceS => (SemId::S, FENCE_INSERTED),
            PassId::UslhB | PassId::SslhB => (SemId::B, SLH_INSERTED),
            PassId::FenceB => (SemId::B, FENCE_INSERTED),
        };
        PassDescriptor { id: self, base_semantics: base, inserted_instrs: inserted }
    }
}

impl fmt::Display for PassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PassId::FenceSls => "fence_sls",
            PassId::RetpJ => "retp_j",
            PassId::RetpJFence => "retp_j_fence",
            PassId::RetpR => "retp_r",
            PassId::FenceR => "fence_r",
            PassId::FenceS => "fence_s",
            PassId::UslhB => "uslh_b",
            PassId::SslhB => "sslh_b",
            PassId::FenceB => "fence_b",
        };
        write!(f, "{name}")
    }
}

impl FromStr for PassId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fence_sls" => Ok(PassId::FenceSls),
            "retp_j" => Ok(PassId::RetpJ),
            "retp_j_fence" => Ok(PassId::RetpJFence),
            "retp_r" => Ok(PassId::RetpR),
            "fence_r" => Ok(PassId::FenceR),
            "fence_s" => Ok(PassId::FenceS),
            "uslh_b" => Ok(PassId::UslhB),
            "sslh_b" => Ok(PassId::SslhB),
            "fence_b" => Ok(PassId::FenceB),
            other => Err(format!("unknown pass `{other}`")),
        }
    }
}

const FENCE_INSERTED: &[InstrClass] = &[InstrClass::Spbarr];
const RETP_J_INSERTED: &[InstrClass] = &[
    InstrClass::Call,
    InstrClass::Skip,
    InstrClass::Spbarr,
    InstrClass::Ret,
    InstrClass::Modret,
    InstrClass::StaticJmp,
];
const RETP_R_INSERTED: &[InstrClass] = &[
    InstrClass::Skip,
    InstrClass::Spbarr,
    InstrClass::Popret,
    InstrClass::Ret,
    InstrClass::Call,
    InstrClass::StaticJmp,
];
const SLH_INSERTED: &[InstrClass] = &[InstrClass::CondAssign, InstrClass::Assign];

/// A countermeasure pass with its base semantics and the set of
/// instruction classes it may insert.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PassDescriptor {
    pub id: PassId,
    pub base_semantics: SemId,
    pub inserted_instrs: &'static [InstrClass],
}

/// The instruction classes a pass inserts during compilation.
pub fn inserted_instrs(id: PassId) -> &'static [InstrClass] {
    id.descriptor().inserted_instrs
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PassError {
    #[error("program already uses reserved register `{0}`")]
    ReservedRegisterUsed(Reg),
    #[error("program already defines trampoline function `{0}`")]
    ReservedFunctionUsed(String),
    #[error("variable-latency extension is disabled but the program uses `<-op`")]
    ExtensionDisabled,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PassOptions {
    pub ext_vassign: bool,
}

/// Generator of labels that never collide with the program's own.
struct FreshLabels {
    taken: BTreeSet<String>,
    counter: usize,
}

impl FreshLabels {
    fn for_component(c: &Component) -> FreshLabels {
        let taken = c
            .functions
            .iter()
            .flat_map(|f| f.lines.iter().map(|l| l.label.clone()))
            .collect();
        FreshLabels { taken, counter: 0 }
    }

    fn next(&mut self) -> String {
        loop {
            let candidate = format!("q{}", self.counter);
            self.counter += 1;
            if self.taken.insert(candidate.clone()) {
                return candidate;
            }
        }
    }
}

/// Apply a countermeasure pass to a component.
pub fn compile(id: PassId, component: &Component, opts: &PassOptions) -> Result<Component, PassError> {
    if !opts.ext_vassign {
        let uses_vassign = component
            .functions
            .iter()
            .any(|f| f.lines.iter().any(|l| matches!(l.instr, Instr::VAssign(..))));
        if uses_vassign {
            return Err(PassError::ExtensionDisabled);
        }
    }
    match id {
        PassId::FenceSls => Ok(fence_after(component, |i| matches!(i, Instr::Ret))),
        PassId::FenceS => {
            Ok(fence_after(component, |i| matches!(i, Instr::Store(..) | Instr::StorePrv(..))))
        }
        PassId::FenceR => Ok(fence_after(component, |i| matches!(i, Instr::Call(_)))),
        PassId::FenceB => Ok(fence_after(component, |i| matches!(i, Instr::Beqz(..)))),
        PassId::RetpJ => retpoline_jumps(component, false),
        PassId::RetpJFence => retpoline_jumps(component, true),
        PassId::RetpR => retpoline_returns(component),
        PassId::SslhB => slh(component, false),
        PassId::UslhB => slh(component, true),
    }
}

/// Insert `spbarr` right after every instruction matching the predicate.
fn fence_after(component: &Component, hit: impl Fn(&Instr) -> bool) -> Component {
    let mut fresh = FreshLabels::for_component(component);
    let mut out = component.clone();
    for f in &mut out.functions {
        let mut lines = Vec::with_capacity(f.lines.len());
        for li in f.lines.drain(..) {
            let fence = hit(&li.instr);
            lines.push(li);
            if fence {
                lines.push(LabelledInstr { label: fresh.next(), instr: Instr::Spbarr });
            }
        }
        f.lines = lines;
    }
    out
}

fn is_indirect_jmp(i: &Instr) -> bool {
    matches!(i, Instr::Jmp(e) if !matches!(e, Expr::LabelRef(_)))
}

/// Replace every indirect jump with a call into a per-site trampoline that
/// edits its own return address, plus an inline trap loop that captures
/// mispredicted returns. With `fence` the trampoline's return is followed
/// by a barrier against straight-line bypasses.
fn retpoline_jumps(component: &Component, fence: bool) -> Result<Component, PassError> {
    let mut fresh = FreshLabels::for_component(component);
    let mut thunks: Vec<FnDef> = Vec::new();
    let existing: BTreeSet<&str> = component.functions.iter().map(|f| f.name.as_str()).collect();

    let mut out = component.clone();
    for f in &mut out.functions {
        let mut lines = Vec::with_capacity(f.lines.len());
        for li in f.lines.drain(..) {
            if !is_indirect_jmp(&li.instr) {
                lines.push(li);
                continue;
            }
            let Instr::Jmp(target) = li.instr else { unreachable!() };
            let thunk_name = format!("retpo_trg_{}", li.label);
            if existing.contains(thunk_name.as_str()) {
                return Err(PassError::ReservedFunctionUsed(thunk_name));
            }
            let loop_head = fresh.next();
            lines.push(LabelledInstr { label: li.label, instr: Instr::Call(thunk_name.clone()) });
            lines.push(LabelledInstr { label: loop_head.clone(), instr: Instr::Skip });
            lines.push(LabelledInstr { label: fresh.next(), instr: Instr::Spbarr });
            lines.push(LabelledInstr {
                label: fresh.next(),
                instr: Instr::Jmp(Expr::LabelRef(loop_head)),
            });
            let mut thunk_lines = vec![
                LabelledInstr { label: fresh.next(), instr: Instr::Modret(target) },
                LabelledInstr { label: fresh.next(), instr: Instr::Ret },
            ];
            if fence {
                thunk_lines.push(LabelledInstr { label: fresh.next(), instr: Instr::Spbarr });
            }
            thunks.push(FnDef { name: thunk_name, lines: thunk_lines });
        }
        f.lines = lines;
    }
    thunks.append(&mut out.functions);
    out.functions = thunks;
    Ok(out)
}

/// Replace every return with a call into one shared trampoline that drops
/// the trampoline's own return address and returns through the original
/// one; the inline trap loop catches the misprediction.
fn retpoline_returns(component: &Component) -> Result<Component, PassError> {
    let retpo = "Retpo".to_string();
    if component.functions.iter().any(|f| f.name == retpo) {
        return Err(PassError::ReservedFunctionUsed(retpo));
    }
    let mut fresh = FreshLabels::for_component(component);
    let mut out = component.clone();
    let mut any = false;
    for f in &mut out.functions {
        let mut lines = Vec::with_capacity(f.lines.len());
        for li in f.lines.drain(..) {
            if !matches!(li.instr, Instr::Ret) {
                lines.push(li);
                continue;
            }
            any = true;
            let loop_head = fresh.next();
            lines.push(LabelledInstr { label: li.label, instr: Instr::Call(retpo.clone()) });
            lines.push(LabelledInstr { label: loop_head.clone(), instr: Instr::Skip });
            lines.push(LabelledInstr { label: fresh.next(), instr: Instr::Spbarr });
            lines.push(LabelledInstr {
                label: fresh.next(),
                instr: Instr::Jmp(Expr::LabelRef(loop_head)),
            });
        }
        f.lines = lines;
    }
    if any {
        let thunk = FnDef {
            name: retpo,
            lines: vec![
                LabelledInstr { label: fresh.next(), instr: Instr::Popret },
                LabelledInstr { label: fresh.next(), instr: Instr::Ret },
            ],
        };
        let mut functions = vec![thunk];
        functions.append(&mut out.functions);
        out.functions = functions;
    }
    Ok(out)
}

/// Speculative load hardening. `ultimate` additionally masks the operands
/// of variable-latency assignments.
fn slh(component: &Component, ultimate: bool) -> Result<Component, PassError> {
    for f in &component.functions {
        for li in &f.lines {
            for reg in li.instr.registers() {
                if RESERVED_REGS.contains(&reg.as_str()) {
                    return Err(PassError::ReservedRegisterUsed(reg));
                }
            }
        }
    }

    let mut fresh = FreshLabels::for_component(component);
    let mut out = component.clone();

    for f in &mut out.functions {
        let source: Vec<LabelledInstr> = f.lines.drain(..).collect();
        let mut lines = Vec::with_capacity(source.len() * 3 + 1);
        // Prologue: recover the flag from its cross-call slot.
        lines.push(LabelledInstr {
            label: fresh.next(),
            instr: Instr::Assign(R_SLH.into(), Expr::reg(R_SLHC)),
        });
        for (pos, li) in source.iter().enumerate() {
            let next_source_label = source.get(pos + 1).map(|n| n.label.clone());
            rewrite_slh(li.clone(), next_source_label, ultimate, &mut fresh, &mut lines);
        }
        f.lines = lines;
    }
    Ok(out)
}

/// `r <?- 0, r_slh`: zero the scratch when the flag is raised.
fn mask(reg: &str) -> Instr {
    Instr::CondAssign(reg.into(), Expr::Int(0), Expr::reg(R_SLH))
}

fn rewrite_slh(
    li: LabelledInstr,
    next_source_label: Option<String>,
    ultimate: bool,
    fresh: &mut FreshLabels,
    out: &mut Vec<LabelledInstr>,
) {
    let label = li.label;
    let mut push = |label: String, instr: Instr| out.push(LabelledInstr { label, instr });
    match li.instr {
        Instr::Skip => push(label, Instr::Skip),
        Instr::Spbarr => push(label, Instr::Spbarr),
        // Masked scratch-copy forms: compute, zero under misprediction,
        // then perform the real operation on the scratch.
        Instr::Assign(x, e) => {
            push(label, Instr::Assign(R_SCR.into(), e));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), Instr::Assign(x, Expr::reg(R_SCR)));
        }
        Instr::CondAssign(x, e, g) => {
            push(label, Instr::Assign(R_SCR.into(), e));
            push(fresh.next(), Instr::Assign(R_SCR2.into(), g));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), mask(R_SCR2));
            push(fresh.next(), Instr::CondAssign(x, Expr::reg(R_SCR), Expr::reg(R_SCR2)));
        }
        Instr::Load(x, e) => {
            push(label, Instr::Assign(R_SCR.into(), e));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), Instr::Load(x, Expr::reg(R_SCR)));
        }
        Instr::LoadPrv(x, e) => {
            push(label, Instr::Assign(R_SCR.into(), e));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), Instr::LoadPrv(x, Expr::reg(R_SCR)));
        }
        Instr::Store(x, e) => {
            push(label, Instr::Assign(R_SCR.into(), e));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), Instr::Store(x, Expr::reg(R_SCR)));
        }
        Instr::StorePrv(x, e) => {
            push(label, Instr::Assign(R_SCR.into(), e));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), Instr::StorePrv(x, Expr::reg(R_SCR)));
        }
        Instr::Jmp(e) => {
            if matches!(e, Expr::LabelRef(_)) {
                // A static jump leaks nothing; keep it verbatim.
                push(label, Instr::Jmp(e));
            } else {
                // Poison the target under misprediction: the jump gets
                // stuck and the speculative instance dies.
                push(label, Instr::Assign(R_SCR.into(), e));
                push(fresh.next(), Instr::CondAssign(R_SCR.into(), Expr::Bot, Expr::reg(R_SLH)));
                push(fresh.next(), Instr::Jmp(Expr::reg(R_SCR)));
            }
        }
        Instr::Beqz(x, target) => {
            // Redirect both sides through flag updates: whichever side is
            // reached against the actual value of the scratch raises the
            // flag. The scratch copy at the head keeps the update local.
            let redirect = fresh.next();
            let join = fresh.next();
            push(label, Instr::Assign(R_SCR.into(), Expr::reg(&x)));
            push(fresh.next(), mask(R_SCR));
            push(fresh.next(), Instr::Beqz(R_SCR.into(), redirect.clone()));
            // Fallthrough side: mispredicted exactly when the scratch was
            // zero.
            push(
                fresh.next(),
                Instr::Assign(
                    R_SLH.into(),
                    Expr::Binop(
                        crate::lang::Binop::Or,
                        Box::new(Expr::reg(R_SLH)),
                        Box::new(Expr::Unop(crate::lang::Unop::Not, Box::new(Expr::reg(R_SCR)))),
                    ),
                ),
            );
            match &next_source_label {
                Some(next) => {
                    push(fresh.next(), Instr::Jmp(Expr::LabelRef(next.clone())));
                }
                None => {
                    push(fresh.next(), Instr::Jmp(Expr::LabelRef(join.clone())));
                }
            }
            // Taken side: mispredicted exactly when the scratch was
            // nonzero.
            push(
                redirect,
                Instr::Assign(
                    R_SLH.into(),
                    Expr::Binop(
                        crate::lang::Binop::Or,
                        Box::new(Expr::reg(R_SLH)),
                        Box::new(Expr::reg(R_SCR)),
                    ),
                ),
            );
            push(fresh.next(), Instr::Jmp(Expr::LabelRef(target)));
            if next_source_label.is_none() {
                // The branch ended the function; give the fallthrough a
                // landing site.
                push(join, Instr::Skip);
            }
        }
        Instr::Call(f) => {
            push(label, Instr::Assign(R_SLHC.into(), Expr::reg(R_SLH)));
            push(fresh.next(), Instr::Call(f));
            push(fresh.next(), Instr::Assign(R_SLH.into(), Expr::reg(R_SLHC)));
        }
        Instr::Ret => {
            push(label, Instr::Assign(R_SLHC.into(), Expr::reg(R_SLH)));
            push(fresh.next(), Instr::Ret);
        }
        Instr::VAssign(x, y, z) => {
            if ultimate {
                push(label, Instr::Assign(R_SCR.into(), Expr::Reg(y)));
                push(fresh.next(), Instr::Assign(R_SCR2.into(), Expr::Reg(z)));
                push(fresh.next(), mask(R_SCR));
                push(fresh.next(), mask(R_SCR2));
                push(fresh.next(), Instr::VAssign(x, R_SCR.into(), R_SCR2.into()));
            } else {
                push(label, Instr::VAssign(x, y, z));
            }
        }
        // Administrative instructions never occur in source components.
        other @ (Instr::Popret | Instr::Modret(_)) => push(label, other),
    }
}
