//! Command-line front end: parse, run, compile, check, and lift.
//!
//! Exit codes: 0 success / verdict passed, 1 error or verdict failed,
//! 2 fuel exhausted, 3 check not applicable. All outputs are
//! byte-deterministic given the inputs, flags, and seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use muasm_core::compose::{check_confluence, check_projection_preservation};
use muasm_core::lang::{
    self, instantiate_labels, link, Attacker, Component, ParseOptions, Unit, WholeProgram,
};
use muasm_core::lift::{
    lift_report, render_report, safe_nesting, syntactic_independence, trapped_speculation,
};
use muasm_core::machine::{MachineError, MachineOptions};
use muasm_core::passes::{compile, PassId, PassOptions};
use muasm_core::security::{check_sni, check_ss};
use muasm_core::spec::{run_spec, SemSet, SpecError, SpecOptions};

#[derive(Parser)]
#[command(
    name = "muasm",
    about = "Speculative-execution laboratory: run muasm programs under \
             combinations of speculation sources, apply countermeasure \
             passes, and check the security and lifting conditions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EngineFlags {
    /// Active speculation sources, e.g. `B,J,S` (empty or `NS` for none).
    #[arg(long, default_value = "")]
    sources: String,
    /// Maximal speculation window.
    #[arg(long, default_value_t = 20)]
    omega: u32,
    /// Step budget for a run.
    #[arg(long, default_value_t = 100_000)]
    fuel: u64,
    /// Public stores write taint S into the cell (the literal rule)
    /// instead of propagating the source register's taint.
    #[arg(long)]
    taint_store_paper: bool,
    /// Enable the variable-latency assignment `x <-op y, z`.
    #[arg(long)]
    ext_vassign: bool,
}

impl EngineFlags {
    fn spec_options(&self) -> SpecOptions {
        SpecOptions {
            omega: self.omega,
            machine: MachineOptions {
                fuel: self.fuel,
                taint_store_paper: self.taint_store_paper,
                ..Default::default()
            },
        }
    }

    fn sources(&self) -> Result<SemSet, String> {
        SemSet::parse_list(&self.sources)
    }

    fn parse_options(&self, allow_administrative: bool) -> ParseOptions {
        ParseOptions { allow_administrative, ext_vassign: self.ext_vassign }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a source unit and report its shape.
    Parse {
        file: PathBuf,
        #[arg(long)]
        ext_vassign: bool,
        /// Accept administrative instructions (compiled output).
        #[arg(long)]
        allow_administrative: bool,
    },
    /// Run a program and write its trace as JSON lines.
    Run {
        /// Component (or attacker defining `main`) to execute.
        program: PathBuf,
        /// Attacker to link against a component.
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
        /// Trace output path (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a countermeasure pass to a component.
    Compile {
        #[arg(long)]
        pass: PassId,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ext_vassign: bool,
    },
    /// Security and well-formedness checks.
    Check {
        #[command(subcommand)]
        kind: CheckKind,
    },
    /// Lattice-wide lifting report for one pass.
    Lift {
        #[arg(long)]
        pass: PassId,
        /// Directory of corpus components; the built-in corpus when
        /// omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
    },
}

#[derive(Subcommand)]
enum CheckKind {
    /// Speculative safety of one program.
    Ss {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Speculative non-interference over low-equivalent variants.
    Sni {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        pairs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        engine: EngineFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Well-formedness of a composition: projection preservation and
    /// confluence.
    Wfc {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[command(flatten)]
        engine: EngineFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trapped speculation of a pass-compiled program.
    Trapped {
        #[arg(long)]
        pass: PassId,
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Safe nesting under a combined semantics (needs two sources or
    /// more).
    Nesting {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        attacker: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Syntactic independence of a pass against a source set.
    Si {
        #[arg(long)]
        pass: PassId,
        #[arg(long)]
        set: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn read_unit(path: &Path, opts: ParseOptions) -> Result<Unit, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    lang::parse_with(&text, opts).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_linked(
    program: &Path,
    attacker: Option<&Path>,
    opts: ParseOptions,
) -> Result<WholeProgram, String> {
    let unit = read_unit(program, opts)?;
    match unit {
        Unit::Component(c) => {
            let a = match attacker {
                Some(path) => read_unit(path, opts)?.into_attacker().map_err(|e| e.to_string())?,
                None => Attacker::empty(),
            };
            link(&a, &c).map_err(|e| e.to_string())
        }
        Unit::Attacker(a) => {
            let c = Component { init_memory: Default::default(), functions: vec![], imports: vec![] };
            link(&a, &c).map_err(|e| e.to_string())
        }
    }
}

fn load_component(path: &Path, opts: ParseOptions) -> Result<Component, String> {
    read_unit(path, opts)?.into_component().map_err(|e| e.to_string())
}

fn load_attacker(attacker: Option<&Path>, opts: ParseOptions) -> Result<Attacker, String> {
    match attacker {
        Some(path) => read_unit(path, opts)?.into_attacker().map_err(|e| e.to_string()),
        None => Ok(Attacker::empty()),
    }
}

fn write_output(out: Option<&Path>, contents: &str) -> Result<(), String> {
    match out {
        Some(path) => {
            // Write whole then rename, so readers never see a torn file.
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, contents).map_err(|e| format!("{}: {e}", path.display()))?;
            fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
        }
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn fuel_exit(err: &SpecError) -> Option<ExitCode> {
    matches!(err, SpecError::Machine(MachineError::FuelExhausted(_))).then(|| ExitCode::from(2))
}

fn dispatch(command: Command) -> Result<ExitCode, String> {
    match command {
        Command::Parse { file, ext_vassign, allow_administrative } => {
            let opts = ParseOptions { ext_vassign, allow_administrative };
            match read_unit(&file, opts)? {
                Unit::Component(c) => {
                    println!(
                        "component: {} functions, {} imports, {} private cells",
                        c.functions.len(),
                        c.imports.len(),
                        c.init_memory.len()
                    );
                }
                Unit::Attacker(a) => {
                    println!(
                        "attacker: {} functions, {} public cells",
                        a.functions.len(),
                        a.init_memory.len()
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { program, attacker, engine, out } => {
            let sources = engine.sources()?;
            let w = load_linked(&program, attacker.as_deref(), engine.parse_options(true))?;
            match run_spec(&w.program, sources, &engine.spec_options()) {
                Ok(trace) => {
                    write_output(out.as_deref(), &trace.to_json_lines())?;
                    Ok(ExitCode::SUCCESS)
                }
                Err(err) => {
                    if let Some(code) = fuel_exit(&err) {
                        eprintln!("error: {err}");
                        Ok(code)
                    } else {
                        Err(err.to_string())
                    }
                }
            }
        }
        Command::Compile { pass, input, out, ext_vassign } => {
            let opts = ParseOptions { ext_vassign, allow_administrative: false };
            let component = load_component(&input, opts)?;
            let compiled =
                compile(pass, &component, &PassOptions { ext_vassign }).map_err(|e| e.to_string())?;
            // Compiled output must re-instantiate without clashes.
            if let Ok(w) = link(&Attacker::empty(), &compiled) {
                let map = instantiate_labels(&w.program, 1);
                debug_assert_eq!(map.map.len(), w.program.len());
            }
            let text = lang::pretty_print(&Unit::Component(compiled));
            write_output(out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { kind } => check(kind),
        Command::Lift { pass, corpus, out, engine } => {
            let corpus = match corpus {
                None => muasm_core::fixtures::lift_corpus(),
                Some(dir) => load_corpus_dir(&dir, engine.parse_options(false))?,
            };
            let report = lift_report(
                pass,
                &corpus,
                &engine.spec_options(),
                &PassOptions { ext_vassign: engine.ext_vassign },
            )
            .map_err(|e| e.to_string())?;
            write_output(out.as_deref(), &json(&report))?;
            eprint!("{}", render_report(&report));
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// A corpus directory holds component files; each is paired with a driver
/// that calls its first function (callback `cb` included).
fn load_corpus_dir(
    dir: &Path,
    opts: ParseOptions,
) -> Result<Vec<(String, Component, Attacker)>, String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "uasm").unwrap_or(false))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        let component = load_component(&path, opts)?;
        let api = component
            .functions
            .first()
            .map(|f| f.name.clone())
            .ok_or_else(|| format!("{}: empty component", path.display()))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let driver = muasm_core::fixtures::driver_for(&api, 0);
        out.push((name, component, driver));
    }
    Ok(out)
}

fn check(kind: CheckKind) -> Result<ExitCode, String> {
    match kind {
        CheckKind::Ss { program, attacker, engine, out } => {
            let sources = engine.sources()?;
            let w = load_linked(&program, attacker.as_deref(), engine.parse_options(true))?;
            match check_ss(&w.program, sources, &engine.spec_options()) {
                Ok(verdict) => {
                    write_output(out.as_deref(), &json(&verdict))?;
                    Ok(if verdict.safe { ExitCode::SUCCESS } else { ExitCode::from(1) })
                }
                Err(muasm_core::security::SecurityError::Spec(err)) => match fuel_exit(&err) {
                    Some(code) => {
                        eprintln!("error: {err}");
                        Ok(code)
                    }
                    None => Err(err.to_string()),
                },
                Err(err) => Err(err.to_string()),
            }
        }
        CheckKind::Sni { program, attacker, pairs, seed, engine, out } => {
            let sources = engine.sources()?;
            let component = load_component(&program, engine.parse_options(true))?;
            let attacker = load_attacker(attacker.as_deref(), engine.parse_options(false))?;
            let verdict =
                check_sni(&component, &attacker, sources, pairs, seed, &engine.spec_options())
                    .map_err(|e| e.to_string())?;
            write_output(out.as_deref(), &json(&verdict))?;
            Ok(if verdict.secure { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        CheckKind::Wfc { program, attacker, x, y, trials, engine, out } => {
            let x = SemSet::parse_list(&x)?;
            let y = SemSet::parse_list(&y)?;
            let w = load_linked(&program, attacker.as_deref(), engine.parse_options(true))?;
            let opts = engine.spec_options();
            let projection =
                check_projection_preservation(&w.program, x, y, &opts).map_err(|e| e.to_string())?;
            let confluence = check_confluence(&w.program, x.union(y), trials, &opts)
                .map_err(|e| e.to_string())?;
            #[derive(serde::Serialize)]
            struct WfcReport {
                projection: muasm_core::compose::ProjectionReport,
                confluence: muasm_core::compose::ConfluenceReport,
            }
            let holds = projection.holds && confluence.holds;
            write_output(out.as_deref(), &json(&WfcReport { projection, confluence }))?;
            Ok(if holds { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        CheckKind::Trapped { pass, program, attacker, engine, out } => {
            let component = load_component(&program, engine.parse_options(false))?;
            let attacker = load_attacker(attacker.as_deref(), engine.parse_options(false))?;
            let verdict = trapped_speculation(
                pass,
                &component,
                &attacker,
                &engine.spec_options(),
                &PassOptions { ext_vassign: engine.ext_vassign },
            )
            .map_err(|e| e.to_string())?;
            write_output(out.as_deref(), &json(&verdict))?;
            Ok(if verdict.trapped { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        CheckKind::Nesting { program, attacker, engine, out } => {
            let sources = engine.sources()?;
            if sources.len() < 2 {
                eprintln!("not applicable: safe nesting needs at least two sources");
                return Ok(ExitCode::from(3));
            }
            let w = load_linked(&program, attacker.as_deref(), engine.parse_options(true))?;
            let verdict =
                safe_nesting(&w.program, sources, &engine.spec_options()).map_err(|e| e.to_string())?;
            write_output(out.as_deref(), &json(&verdict))?;
            Ok(if verdict.holds { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        CheckKind::Si { pass, set, out } => {
            let set = SemSet::parse_list(&set)?;
            if !set.combinable() {
                eprintln!("not applicable: set is not combinable");
                return Ok(ExitCode::from(3));
            }
            let holds = syntactic_independence(pass, set);
            #[derive(serde::Serialize)]
            struct SiReport {
                pass: String,
                set: String,
                syntactically_independent: bool,
            }
            write_output(
                out.as_deref(),
                &json(&SiReport {
                    pass: pass.to_string(),
                    set: set.to_string(),
                    syntactically_independent: holds,
                }),
            )?;
            Ok(if holds { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
