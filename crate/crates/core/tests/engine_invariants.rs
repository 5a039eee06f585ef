//! Cross-engine invariants: the speculative engine against the plain
//! non-speculative loop, trace well-formedness, and the projection laws.
//!
//! The non-speculative loop and the instance-stack engine are written
//! independently; the erasure and rollback-transparency checks here are
//! what ties them together.

use muasm_core::compose::{
    check_confluence, check_projection_preservation, nonspec_projection, source_projection,
    spec_projection,
};
use muasm_core::fixtures;
use muasm_core::lang::{link, parse, Attacker, Component, Program};
use muasm_core::machine::{run_ns, EventKind, MachineOptions, Taint};
use muasm_core::spec::{run_spec, SemId, SemSet, SpecOptions};
use proptest::prelude::*;

fn opts() -> SpecOptions {
    SpecOptions { omega: 8, machine: MachineOptions { fuel: 3_000_000, ..Default::default() } }
}

fn all_fixture_programs() -> Vec<(String, Program)> {
    fixtures::ALL
        .iter()
        .map(|f| (f.name.to_string(), f.linked().unwrap().program))
        .collect()
}

#[test]
fn ns_safety_over_the_corpus() {
    // Every non-speculative run of every fixture/attacker pairing emits
    // only safe events.
    let o = opts();
    for f in fixtures::ALL {
        let component = f.component();
        for (name, attacker) in &f.corpus().attackers {
            let Ok(w) = link(attacker, &component) else { continue };
            let t = run_ns(&w.program, &o.machine).unwrap();
            assert!(t.all_safe(), "{}/{name} emitted an unsafe NS event", f.name);
            assert_eq!(t.events().last().unwrap().kind, EventKind::Terminate);
        }
    }
}

#[test]
fn in_bounds_gadget_touches_public_memory_only() {
    // Architectural run of the bounds-check gadget with an in-bounds
    // index: every load event hits a public address and stays safe.
    let o = opts();
    let fx = fixtures::GADGET_PHT;
    let driver = fixtures::driver_for(fx.api, 3);
    let p = link(&driver, &fx.component()).unwrap().program;
    let t = run_ns(&p, &o.machine).unwrap();
    let mut loads = 0;
    for e in t.events() {
        if let EventKind::Load(addr) = e.kind {
            assert!(addr >= 0, "private load {addr} in the in-bounds run");
            loads += 1;
        }
        assert_eq!(e.taint, Taint::S);
    }
    assert!(loads >= 2, "both array accesses executed");
}

#[test]
fn run_ns_is_deterministic() {
    let o = opts();
    for (name, p) in all_fixture_programs() {
        let a = run_ns(&p, &o.machine).unwrap();
        let b = run_ns(&p, &o.machine).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn erasure_empty_sources_equal_run_ns() {
    let o = opts();
    for (name, p) in all_fixture_programs() {
        let spec = run_spec(&p, SemSet::EMPTY, &o).unwrap();
        let ns = run_ns(&p, &o.machine).unwrap();
        assert_eq!(spec, ns, "{name}");
    }
}

#[test]
fn rollback_transparency_for_every_combinable_set() {
    // Speculation never alters architectural state: the non-speculative
    // projection of any speculative run is the plain run.
    let o = opts();
    for (name, p) in all_fixture_programs() {
        let ns = run_ns(&p, &o.machine).unwrap();
        for set in SemSet::all_combinable() {
            let t = run_spec(&p, set, &o).unwrap();
            let proj = nonspec_projection(&t).unwrap();
            // Projection keeps pre-speculation bookkeeping identical.
            assert_eq!(
                proj.events().iter().map(|e| (&e.kind, e.taint)).collect::<Vec<_>>(),
                ns.events().iter().map(|e| (&e.kind, e.taint)).collect::<Vec<_>>(),
                "{name} under {set}"
            );
        }
    }
}

#[test]
fn traces_are_well_bracketed_and_window_bounded() {
    let o = opts();
    for (name, p) in all_fixture_programs() {
        for set in SemSet::all_combinable() {
            let t = run_spec(&p, set, &o).unwrap();
            let mut open: Vec<(SemId, u64)> = Vec::new();
            let mut counts: std::collections::BTreeMap<u64, u32> = Default::default();
            for e in t.events() {
                match e.kind {
                    EventKind::Start(id, c) => open.push((id, c)),
                    EventKind::Rollback(id, c) => {
                        assert_eq!(open.pop(), Some((id, c)), "{name} under {set}")
                    }
                    _ => {
                        if let Some(&(_, c)) = e.spec_stack.last() {
                            *counts.entry(c).or_default() += 1;
                        }
                    }
                }
            }
            assert!(open.is_empty(), "{name} under {set}: open transaction at termination");
            for (c, n) in counts {
                assert!(n <= o.omega, "{name} under {set}: txn {c} emitted {n} events");
            }
        }
    }
}

#[test]
fn spec_engine_is_deterministic_across_sets() {
    let o = opts();
    for (name, p) in all_fixture_programs() {
        for set in SemSet::all_combinable() {
            let a = run_spec(&p, set, &o).unwrap();
            let b = run_spec(&p, set, &o).unwrap();
            assert_eq!(a, b, "{name} under {set}");
        }
    }
}

#[test]
fn projection_laws_on_real_traces() {
    let o = opts();
    for (name, p) in all_fixture_programs() {
        let t = run_spec(&p, SemSet::of(&[SemId::B, SemId::S, SemId::J]), &o).unwrap();
        // Partition.
        let spec = spec_projection(&t).unwrap();
        let nonspec = nonspec_projection(&t).unwrap();
        assert_eq!(spec.len() + nonspec.len(), t.len(), "{name}");
        // Idempotence.
        assert_eq!(nonspec_projection(&nonspec).unwrap(), nonspec, "{name}");
        let pb = source_projection(&t, SemId::B).unwrap();
        assert_eq!(source_projection(&pb, SemId::B).unwrap(), pb, "{name}");
        // Commutation over distinct sources.
        let bs = source_projection(&source_projection(&t, SemId::B).unwrap(), SemId::S).unwrap();
        let sb = source_projection(&source_projection(&t, SemId::S).unwrap(), SemId::B).unwrap();
        assert_eq!(bs, sb, "{name}");
    }
}

#[test]
fn projection_preservation_and_confluence_smoke() {
    let o = opts();
    let fx = fixtures::GADGET_PHT.linked().unwrap().program;
    let r = check_projection_preservation(
        &fx,
        SemSet::of(&[SemId::B]),
        SemSet::of(&[SemId::S]),
        &o,
    )
    .unwrap();
    assert!(r.holds, "{:?}", r.mismatches);
    let c = check_confluence(&fx, SemSet::of(&[SemId::B, SemId::S]), 5, &o).unwrap();
    assert!(c.holds);
}

#[test]
fn relation_preservation_on_low_equivalent_pairs() {
    // Trace-level reading of relation preservation: for low-equivalent
    // programs with equal non-speculative projections, the full traces
    // agree up to the first unsafe event. (Pairs that already differ
    // architecturally are out of scope, exactly as for non-interference.)
    let o = opts();
    for f in fixtures::ALL {
        let c1 = f.component();
        let c2 = muasm_core::security::gen_low_equiv(&c1, 0xfeed);
        let a = f.driver();
        for set in [SemSet::of(&[SemId::B]), SemSet::of(&[SemId::B, SemId::S])] {
            let t1 = run_spec(&link(&a, &c1).unwrap().program, set, &o).unwrap();
            let t2 = run_spec(&link(&a, &c2).unwrap().program, set, &o).unwrap();
            if nonspec_projection(&t1).unwrap() != nonspec_projection(&t2).unwrap() {
                continue;
            }
            let k1 = t1.events().iter().position(|e| e.taint == Taint::U);
            let k2 = t2.events().iter().position(|e| e.taint == Taint::U);
            let k = k1.unwrap_or(t1.len()).min(k2.unwrap_or(t2.len()));
            assert_eq!(
                &t1.events()[..k],
                &t2.events()[..k],
                "{} under {set}: safe prefixes diverged",
                f.name
            );
        }
    }
}

#[test]
fn relation_preservation_at_step_level() {
    // The real property: two configurations that agree on every
    // safe-tainted register and cell step to configurations that still
    // agree, whenever the step's own observation is safe. Randomizing
    // unsafe-tainted values produces taint-equivalent pairs.
    use muasm_core::machine::{initial_state, step_ns, Tv, Value};
    use muasm_core::rng::SplitMix64;

    let o = opts();
    for f in fixtures::ALL {
        let w = f.linked().unwrap();
        let p = &w.program;
        let mut cfg = initial_state(p, &o.machine);
        let mut rng = SplitMix64::new(9);
        for _ in 0..400 {
            if cfg.pc.is_none() {
                break;
            }
            // Build a taint-equivalent twin: same taints everywhere, same
            // safe values, unsafe values re-randomized.
            let mut twin = cfg.clone();
            let cells: Vec<(i64, Tv)> =
                twin.mem.iter().map(|(a, c)| (*a, *c)).collect();
            for (addr, cell) in cells {
                if cell.t == Taint::U {
                    twin.mem.set(addr, Tv::new(Value::Int(rng.below(1 << 12) as i64), Taint::U));
                }
            }
            let regs: Vec<(String, Tv)> =
                twin.regs.iter().map(|(r, v)| (r.clone(), *v)).collect();
            for (reg, v) in regs {
                if v.t == Taint::U {
                    twin.regs.set(&reg, Tv::new(Value::Int(rng.below(1 << 12) as i64), Taint::U));
                }
            }

            let step_a = step_ns(p, &cfg, Taint::U, &o.machine);
            let step_b = step_ns(p, &twin, Taint::U, &o.machine);
            if let (Ok((next_a, ev_a, _)), Ok((next_b, ev_b, _))) = (&step_a, &step_b) {
                if ev_a.taint == Taint::S && ev_b.taint == Taint::S {
                    assert_eq!(ev_a.kind, ev_b.kind, "{}: safe observations diverged", f.name);
                    // Safe-tainted locations still agree.
                    for (reg, v) in next_a.regs.iter() {
                        if v.t == Taint::S {
                            let other = next_b.regs.get(reg);
                            assert_eq!(
                                (v.v, v.t),
                                (other.v, other.t),
                                "{}: register {reg} diverged on a safe step",
                                f.name
                            );
                        }
                    }
                }
            }
            match step_a {
                Ok((next, _, _)) => cfg = next,
                Err(_) => break,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Random programs
// ---------------------------------------------------------------------------

/// Small random components: straight-line arithmetic with forward
/// branches, public/private accesses, and an occasional helper call.
/// Forward-only control flow keeps every run terminating.
fn arb_component() -> impl Strategy<Value = Component> {
    let instr = prop_oneof![
        Just("skip".to_string()),
        (0..4u8, -8..8i64).prop_map(|(r, v)| format!("x{r} <- {v}")),
        (0..4u8, 0..4u8, 0..4u8).prop_map(|(a, b, c)| format!("x{a} <- x{b} + x{c}")),
        (0..4u8, 0..24i64).prop_map(|(r, v)| format!("load x{r}, {v}")),
        (0..4u8, 0..24i64).prop_map(|(r, v)| format!("store x{r}, {v}")),
        (0..4u8, 1..6i64).prop_map(|(r, v)| format!("loadprv x{r}, -{v}")),
        (0..4u8, 1..6i64).prop_map(|(r, v)| format!("storeprv x{r}, -{v}")),
    ];
    (proptest::collection::vec(instr, 1..10), 0..4usize, any::<bool>()).prop_map(
        |(body, branch_at, call_helper)| {
            let mut src = String::from("component\nmem -1 := 7 : U\nfun api:\n");
            let n = body.len();
            for (i, instr) in body.into_iter().enumerate() {
                src.push_str(&format!("k{i}: {instr}\n"));
                if i == branch_at.min(n - 1) {
                    // Forward branch to the return label.
                    src.push_str(&format!("kb{i}: beqz x0, kret\n"));
                }
            }
            if call_helper {
                src.push_str("kc: call helper\n");
            }
            src.push_str("kret: ret\nfun helper:\nh0: x1 <- 1\nh1: ret\n");
            parse(&src).unwrap().into_component().unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_programs_satisfy_core_invariants(c in arb_component()) {
        let o = opts();
        let a = fixtures::driver_for("api", 3);
        let p = link(&a, &c).unwrap().program;
        let ns = run_ns(&p, &o.machine).unwrap();
        // NS safety.
        prop_assert!(ns.all_safe());
        // Erasure and rollback transparency across a few sets.
        for set in [
            SemSet::EMPTY,
            SemSet::of(&[SemId::B]),
            SemSet::of(&[SemId::B, SemId::S, SemId::R]),
            SemSet::of(&[SemId::B, SemId::S, SemId::Sls]),
        ] {
            let t = run_spec(&p, set, &o).unwrap();
            let proj = nonspec_projection(&t).unwrap();
            prop_assert_eq!(
                proj.events().iter().map(|e| (&e.kind, e.taint)).collect::<Vec<_>>(),
                ns.events().iter().map(|e| (&e.kind, e.taint)).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn random_roundtrip_parse_print(c in arb_component()) {
        let unit = muasm_core::lang::Unit::Component(c);
        let printed = muasm_core::lang::pretty_print(&unit);
        let reparsed = parse(&printed).unwrap();
        prop_assert_eq!(unit, reparsed);
    }

    #[test]
    fn eval_taint_is_monotone(expr in arb_expr(), flip in 0..4u8, values in proptest::collection::vec(-50..50i64, 4)) {
        use muasm_core::machine::{eval_expr, RegisterFile, Tv, Value};
        let p = fixtures::SAFE_ARITH.linked().unwrap().program;
        let mut low = RegisterFile::default();
        for (i, v) in values.iter().enumerate() {
            low.set(&format!("x{i}"), Tv::new(Value::Int(*v), Taint::S));
        }
        let mut high = low.clone();
        high.set(&format!("x{flip}"), Tv::new(Value::Int(values[flip as usize]), Taint::U));
        let a = eval_expr(&p, &low, &expr);
        let b = eval_expr(&p, &high, &expr);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                // Raising an input taint never changes the value and never
                // lowers the output taint.
                prop_assert_eq!(a.v, b.v);
                prop_assert!(b.t >= a.t);
            }
            (Err(ea), Err(eb)) => prop_assert_eq!(ea, eb),
            (a, b) => prop_assert!(false, "divergent outcomes {a:?} vs {b:?}"),
        }
    }
}

/// Small random expressions over registers `x0..x3` and literals.
fn arb_expr() -> impl Strategy<Value = muasm_core::lang::Expr> {
    use muasm_core::lang::{Binop, Expr, Unop};
    let leaf = prop_oneof![
        (-20..20i64).prop_map(Expr::Int),
        (0..4u8).prop_map(|r| Expr::Reg(format!("x{r}"))),
    ];
    leaf.prop_recursive(3, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone(), prop_oneof![
                Just(Binop::Add), Just(Binop::Sub), Just(Binop::Mul),
                Just(Binop::Lt), Just(Binop::Le), Just(Binop::Eq),
                Just(Binop::Ne), Just(Binop::And), Just(Binop::Or),
            ])
                .prop_map(|(a, b, op)| Expr::Binop(op, Box::new(a), Box::new(b))),
            (inner, prop_oneof![Just(Unop::Not), Just(Unop::Neg)])
                .prop_map(|(a, op)| Expr::Unop(op, Box::new(a))),
        ]
    })
}

#[test]
fn frame_discipline_restored_on_termination() {
    // Indirectly: terminating runs end with a single terminate event and
    // the engine reports no stuck frames on any fixture.
    let o = opts();
    for (name, p) in all_fixture_programs() {
        let t = run_ns(&p, &o.machine).unwrap();
        let terms = t.events().iter().filter(|e| e.kind == EventKind::Terminate).count();
        assert_eq!(terms, 1, "{name}");
    }
}

#[test]
fn attacker_placeholder_links_reject_missing_imports() {
    let c = parse("component\nimport f\nfun gadget:\ng0: ret\n").unwrap().into_component().unwrap();
    assert!(link(&Attacker::empty(), &c).is_err());
}
