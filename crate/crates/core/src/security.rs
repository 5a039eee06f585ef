//! Speculative safety and speculative non-interference checkers, plus the
//! bounded robustness harnesses.
//!
//! Safety is a single-trace check: every event must carry taint `S`.
//! Non-interference is a two-trace check over low-equivalent programs
//! (identical code and public memory, re-randomized private memory): if
//! the non-speculative projections agree, the full traces must agree.
//! Robust variants quantify over a bounded attacker corpus instead of all
//! attackers; the corpus is an explicit under-approximation.

use serde::Serialize;
use thiserror::Error;

use crate::compose::nonspec_projection;
use crate::lang::{
    link, parse, validate_attacker, Attacker, Component, Expr, FnDef, Instr, LabelledInstr,
    LangError,
};
use crate::machine::{Event, Trace};
use crate::rng::SplitMix64;
use crate::spec::{run_spec, SemSet, SpecError, SpecOptions};

#[derive(Debug, Error)]
pub enum SecurityError {
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("projection failed: {0}")]
    Compose(#[from] crate::compose::ComposeError),
}

/// True iff every event in the trace is tainted safe.
pub fn is_safe_trace(t: &Trace) -> bool {
    t.all_safe()
}

/// Witness of a speculative-safety violation: the first unsafe event and
/// the transactions enclosing it.
#[derive(Debug, Clone, Serialize)]
pub struct UnsafeWitness {
    pub index: usize,
    pub event: Event,
    pub enclosing: Vec<(String, u64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SsVerdict {
    pub sources: String,
    pub safe: bool,
    pub witness: Option<UnsafeWitness>,
}

/// Run a whole program and check speculative safety of its trace.
pub fn check_ss(
    program: &crate::lang::Program,
    sources: SemSet,
    opts: &SpecOptions,
) -> Result<SsVerdict, SecurityError> {
    let trace = run_spec(program, sources, opts)?;
    Ok(ss_verdict_of_trace(sources, &trace))
}

pub fn ss_verdict_of_trace(sources: SemSet, trace: &Trace) -> SsVerdict {
    let witness = trace.first_unsafe().map(|(index, event)| UnsafeWitness {
        index,
        event: event.clone(),
        enclosing: event.spec_stack.iter().map(|(id, c)| (id.to_string(), *c)).collect(),
    });
    SsVerdict { sources: sources.to_string(), safe: witness.is_none(), witness }
}

/// Produce a low-equivalent variant: identical code and public memory,
/// private cells re-randomized (taints unchanged).
pub fn gen_low_equiv(component: &Component, seed: u64) -> Component {
    let mut rng = SplitMix64::new(seed);
    let mut out = component.clone();
    for (addr, cell) in out.init_memory.iter_mut() {
        debug_assert!(*addr < 0, "component init memory is private");
        cell.0 = rng.below(1 << 16) as i64;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SniVerdict {
    pub sources: String,
    pub pairs: u64,
    pub seed: u64,
    pub secure: bool,
    /// Seed of the variant and index of the first diverging event.
    pub witness: Option<(u64, usize)>,
}

/// Speculative non-interference over `pairs` low-equivalent variants.
///
/// For each variant with the same non-speculative projection, the full
/// traces (taints and markers included) must coincide.
pub fn check_sni(
    component: &Component,
    attacker: &Attacker,
    sources: SemSet,
    pairs: u64,
    seed: u64,
    opts: &SpecOptions,
) -> Result<SniVerdict, SecurityError> {
    let base = link(attacker, component)?;
    let base_trace = run_spec(&base.program, sources, opts)?;
    let base_nonspec = nonspec_projection(&base_trace)?;
    for k in 0..pairs {
        let variant_seed = seed.wrapping_add(k);
        let variant = gen_low_equiv(component, variant_seed);
        let linked = link(attacker, &variant)?;
        let trace = run_spec(&linked.program, sources, opts)?;
        if nonspec_projection(&trace)? != base_nonspec {
            continue;
        }
        if let Some(idx) = base_trace.first_divergence(&trace) {
            return Ok(SniVerdict {
                sources: sources.to_string(),
                pairs,
                seed,
                secure: false,
                witness: Some((variant_seed, idx)),
            });
        }
    }
    Ok(SniVerdict { sources: sources.to_string(), pairs, seed, secure: true, witness: None })
}

/// Explicit SNI check against hand-picked secret assignments: replaces
/// every private cell's value and compares the two runs.
pub fn check_sni_two_secrets(
    component: &Component,
    attacker: &Attacker,
    sources: SemSet,
    secrets: (i64, i64),
    opts: &SpecOptions,
) -> Result<SniVerdict, SecurityError> {
    let with_secret = |v: i64| {
        let mut c = component.clone();
        for cell in c.init_memory.values_mut() {
            cell.0 = v;
        }
        c
    };
    let t1 = run_spec(&link(attacker, &with_secret(secrets.0))?.program, sources, opts)?;
    let t2 = run_spec(&link(attacker, &with_secret(secrets.1))?.program, sources, opts)?;
    let same_nonspec = nonspec_projection(&t1)? == nonspec_projection(&t2)?;
    let divergence = t1.first_divergence(&t2);
    let violated = same_nonspec && divergence.is_some();
    Ok(SniVerdict {
        sources: sources.to_string(),
        pairs: 2,
        seed: 0,
        secure: !violated,
        witness: divergence.filter(|_| violated).map(|i| (0, i)),
    })
}

// ---------------------------------------------------------------------------
// Attacker corpus
// ---------------------------------------------------------------------------

/// A bounded stand-in for quantification over all valid attackers:
/// hand-written templates plus seeded random attackers.
#[derive(Debug, Clone)]
pub struct AttackerCorpus {
    pub attackers: Vec<(String, Attacker)>,
}

impl AttackerCorpus {
    /// The built-in ten-attacker corpus: callers with in-bounds and
    /// out-of-bounds arguments, public-memory priming, repeated entry, and
    /// seeded random callers. `api` is the component function to drive.
    ///
    /// None of the templates touch the registers reserved by the hardening
    /// passes: clobbering the flag slot is outside the attacker-visible
    /// guarantees.
    pub fn builtin(api: &str) -> AttackerCorpus {
        let mk = |name: &str, body: &str| {
            let src = format!("attacker\n{body}");
            let a = parse(&src).expect("builtin attacker parses").into_attacker().unwrap();
            debug_assert!(validate_attacker(&a).is_ok());
            (name.to_string(), a)
        };
        // Labels carry a `z` prefix so no template ever clashes with a
        // component's own labels. Every template defines `cb` so
        // components that call back out can link.
        let mut attackers = vec![
            mk(
                "call_inbounds",
                &format!("fun main:\nza0: r1 <- 3\nza1: call {api}\nza2: ret\nfun cb:\nzc0: ret\n"),
            ),
            mk(
                "call_oob_low",
                &format!("fun main:\nza0: r1 <- -17\nza1: call {api}\nza2: ret\nfun cb:\nzc0: ret\n"),
            ),
            mk(
                "call_oob_high",
                &format!("fun main:\nza0: r1 <- 9\nza1: call {api}\nza2: ret\nfun cb:\nzc0: ret\n"),
            ),
            mk(
                "prime_then_call",
                &format!(
                    "mem 8 := 5 : S\nfun main:\nza0: zx <- 1\nza1: store zx, 12\nza2: r1 <- 9\nza3: call {api}\nza4: ret\nfun cb:\nzc0: ret\n"
                ),
            ),
            mk(
                "call_twice",
                &format!(
                    "fun main:\nza0: r1 <- 2\nza1: call {api}\nza2: r1 <- 9\nza3: call {api}\nza4: ret\nfun cb:\nzc0: ret\n"
                ),
            ),
            mk(
                "branching_driver",
                &format!(
                    "fun main:\nza0: load zx, 4\nza1: beqz zx, za4\nza2: r1 <- 9\nza3: call {api}\nza4: ret\nfun cb:\nzc0: ret\n"
                ),
            ),
            mk(
                "reentrant_cb",
                // The recursive call is architecturally dead (cell 20 is
                // zero), so reentrancy stays bounded.
                &format!(
                    "fun main:\nza0: r1 <- 9\nza1: call {api}\nza2: ret\nfun cb:\nzc0: load zx, 20\nzc1: beqz zx, zc3\nzc2: call {api}\nzc3: ret\n"
                ),
            ),
        ];
        for seed in 0..3u64 {
            attackers.push((format!("random_{seed}"), random_attacker(api, seed)));
        }
        AttackerCorpus { attackers }
    }
}

/// Seeded random (but valid) attacker: a short main of public loads,
/// stores, arithmetic, and calls into the component.
pub fn random_attacker(api: &str, seed: u64) -> Attacker {
    let mut rng = SplitMix64::new(seed.wrapping_add(0xa77a));
    let mut lines = Vec::new();
    let mut n = 0usize;
    let mut push = |lines: &mut Vec<LabelledInstr>, instr: Instr| {
        lines.push(LabelledInstr { label: format!("zra{n}"), instr });
        n += 1;
    };
    let steps = 3 + rng.below(4);
    for _ in 0..steps {
        match rng.below(4) {
            0 => {
                let addr = rng.below(32) as i64;
                push(&mut lines, Instr::Load("zx".into(), Expr::Int(addr)));
            }
            1 => {
                let addr = rng.below(32) as i64;
                push(&mut lines, Instr::Store("zx".into(), Expr::Int(addr)));
            }
            2 => {
                let v = rng.below(16) as i64;
                push(&mut lines, Instr::Assign("r1".into(), Expr::Int(v)));
            }
            _ => {
                let v = rng.below(32) as i64 - 16;
                push(
                    &mut lines,
                    Instr::Assign(
                        "r1".into(),
                        Expr::Binop(
                            crate::lang::Binop::Add,
                            Box::new(Expr::reg("r1")),
                            Box::new(Expr::Int(v)),
                        ),
                    ),
                );
            }
        }
    }
    push(&mut lines, Instr::Call(api.into()));
    push(&mut lines, Instr::Ret);
    let a = Attacker {
        init_memory: Default::default(),
        functions: vec![
            FnDef { name: "main".into(), lines },
            FnDef {
                name: "cb".into(),
                lines: vec![LabelledInstr { label: format!("zra{n}"), instr: Instr::Ret }],
            },
        ],
    };
    debug_assert!(validate_attacker(&a).is_ok());
    a
}

// ---------------------------------------------------------------------------
// Robust harnesses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RobustProp {
    Ss,
    Sni,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustVerdict {
    pub prop: RobustProp,
    pub sources: String,
    pub attackers: usize,
    pub holds: bool,
    pub vacuous: bool,
    pub falsifier: Option<String>,
}

/// Conjunction of per-attacker verdicts over the corpus.
pub fn check_robust(
    prop: RobustProp,
    component: &Component,
    corpus: &AttackerCorpus,
    sources: SemSet,
    pairs: u64,
    seed: u64,
    opts: &SpecOptions,
) -> Result<RobustVerdict, SecurityError> {
    let mut falsifier = None;
    for (name, attacker) in &corpus.attackers {
        let ok = match prop {
            RobustProp::Ss => {
                let linked = link(attacker, component)?;
                check_ss(&linked.program, sources, opts)?.safe
            }
            RobustProp::Sni => {
                check_sni(component, attacker, sources, pairs, seed, opts)?.secure
            }
        };
        if !ok {
            falsifier = Some(name.clone());
            break;
        }
    }
    Ok(RobustVerdict {
        prop,
        sources: sources.to_string(),
        attackers: corpus.attackers.len(),
        holds: falsifier.is_none(),
        vacuous: corpus.attackers.is_empty(),
        falsifier,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SsImpliesSniReport {
    pub sources: String,
    pub pairs: u64,
    pub checked: bool,
    /// A program that is speculatively safe yet interferes would be an
    /// engine bug; this carries the diverging event index.
    pub counterexample: Option<usize>,
}

/// Safety over-approximates non-interference: when every trace of the
/// program is safe, no low-equivalent pair may diverge.
pub fn check_ss_implies_sni(
    component: &Component,
    attacker: &Attacker,
    sources: SemSet,
    pairs: u64,
    seed: u64,
    opts: &SpecOptions,
) -> Result<SsImpliesSniReport, SecurityError> {
    // Precondition: all generated variants run safe.
    for k in 0..=pairs {
        let variant = if k == 0 {
            component.clone()
        } else {
            gen_low_equiv(component, seed.wrapping_add(k - 1))
        };
        let linked = link(attacker, &variant)?;
        if !check_ss(&linked.program, sources, opts)?.safe {
            return Ok(SsImpliesSniReport {
                sources: sources.to_string(),
                pairs,
                checked: false,
                counterexample: None,
            });
        }
    }
    let sni = check_sni(component, attacker, sources, pairs, seed, opts)?;
    Ok(SsImpliesSniReport {
        sources: sources.to_string(),
        pairs,
        checked: true,
        counterexample: sni.witness.map(|(_, idx)| idx),
    })
}
