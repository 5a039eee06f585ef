//! The built-in demo corpus: one component per speculation source plus the
//! probes used by the lifting report, and canonical driving attackers.
//!
//! Components never define `main`; execution is driven by an attacker that
//! sets up registers and calls into the component, mirroring how the
//! countermeasures are attacked in practice. Every driving attacker also
//! defines the callback `cb` so components that call out can link.

use crate::lang::{link, parse_with, Attacker, Component, LangError, ParseOptions, WholeProgram};
use crate::machine::MachineOptions;
use crate::security::AttackerCorpus;
use crate::spec::SpecOptions;

/// Engine options for the demo corpus: a window deep enough for every
/// witness (the nesting probe needs eleven speculative steps) and fuel
/// sized for the exponential jump exploration.
pub fn demo_opts() -> SpecOptions {
    SpecOptions { omega: 12, machine: MachineOptions { fuel: 20_000_000, ..Default::default() } }
}

/// A named corpus entry: the component source and the function the
/// attacker drives.
#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    pub api: &'static str,
    /// Register `r1` value the canonical driver passes.
    pub arg: i64,
    pub source: &'static str,
    pub needs_vassign: bool,
}

pub const GADGET_PHT: Fixture = Fixture {
    name: "gadget_pht",
    api: "gadget",
    arg: -17,
    source: include_str!("../../../fixtures/gadget_pht.uasm"),
    needs_vassign: false,
};

pub const GADGET_STL: Fixture = Fixture {
    name: "gadget_stl",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/gadget_stl.uasm"),
    needs_vassign: false,
};

pub const GADGET_SLS: Fixture = Fixture {
    name: "gadget_sls",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/gadget_sls.uasm"),
    needs_vassign: false,
};

pub const GADGET_BTB: Fixture = Fixture {
    name: "gadget_btb",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/gadget_btb.uasm"),
    needs_vassign: false,
};

pub const GADGET_RSB: Fixture = Fixture {
    name: "gadget_rsb",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/gadget_rsb.uasm"),
    needs_vassign: false,
};

pub const SLH_JUMP_GAP: Fixture = Fixture {
    name: "slh_jump_gap",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/slh_jump_gap.uasm"),
    needs_vassign: false,
};

pub const NEST_PROBE: Fixture = Fixture {
    name: "nest_probe",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/nest_probe.uasm"),
    needs_vassign: false,
};

pub const RET_ADJACENT: Fixture = Fixture {
    name: "ret_adjacent",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/ret_adjacent.uasm"),
    needs_vassign: false,
};

pub const SAFE_ARITH: Fixture = Fixture {
    name: "safe_arith",
    api: "gadget",
    arg: 3,
    source: include_str!("../../../fixtures/safe_arith.uasm"),
    needs_vassign: false,
};

pub const SAFE_CALLS: Fixture = Fixture {
    name: "safe_calls",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/safe_calls.uasm"),
    needs_vassign: false,
};

pub const VASSIGN_PROBE: Fixture = Fixture {
    name: "vassign_probe",
    api: "gadget",
    arg: 0,
    source: include_str!("../../../fixtures/vassign_probe.uasm"),
    needs_vassign: true,
};

pub const THREE_FUNCS: Fixture = Fixture {
    name: "three_funcs",
    api: "main",
    arg: 0,
    source: include_str!("../../../fixtures/three_funcs.uasm"),
    needs_vassign: false,
};

/// Everything that runs under the sweeps.
pub const ALL: &[Fixture] = &[
    GADGET_PHT,
    GADGET_STL,
    GADGET_SLS,
    GADGET_BTB,
    GADGET_RSB,
    SLH_JUMP_GAP,
    NEST_PROBE,
    RET_ADJACENT,
    SAFE_ARITH,
    SAFE_CALLS,
];

pub fn by_name(name: &str) -> Option<Fixture> {
    ALL.iter().chain([&VASSIGN_PROBE, &THREE_FUNCS]).find(|f| f.name == name).copied()
}

impl Fixture {
    pub fn component(&self) -> Component {
        let opts = ParseOptions { ext_vassign: self.needs_vassign, ..Default::default() };
        parse_with(self.source, opts)
            .unwrap_or_else(|e| panic!("fixture {} must parse: {e}", self.name))
            .into_component()
            .expect("fixtures are components")
    }

    /// The canonical driver: sets `r1`, calls the api, and defines the
    /// callback `cb`.
    pub fn driver(&self) -> Attacker {
        driver_for(self.api, self.arg)
    }

    pub fn linked(&self) -> Result<WholeProgram, LangError> {
        link(&self.driver(), &self.component())
    }

    pub fn corpus(&self) -> AttackerCorpus {
        AttackerCorpus::builtin(self.api)
    }
}

/// The (component, attacker) corpus used by the lifting checks: every
/// fixture paired with its canonical driver.
pub fn lift_corpus() -> Vec<(String, Component, Attacker)> {
    ALL.iter().map(|f| (f.name.to_string(), f.component(), f.driver())).collect()
}

/// An attacker that passes `arg` in `r1` and calls `api` once.
pub fn driver_for(api: &str, arg: i64) -> Attacker {
    let src = format!(
        "attacker\nfun main:\nzz0: r1 <- {arg}\nzz1: call {api}\nzz2: ret\nfun cb:\nzz3: ret\n"
    );
    parse_with(&src, ParseOptions::default())
        .expect("driver parses")
        .into_attacker()
        .expect("driver is an attacker")
}
