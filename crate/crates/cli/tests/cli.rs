//! End-to-end checks of the command-line interface: exit codes, file
//! outputs, and byte-determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn muasm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muasm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Sandbox {
    dir: PathBuf,
}

impl Sandbox {
    fn new(name: &str) -> Sandbox {
        let dir = std::env::temp_dir().join(format!("muasm-cli-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Sandbox { dir }
    }

    fn file(&self, name: &str, contents: &str) -> PathBuf {
        let path = self.dir.join(name);
        fs::write(&path, contents).unwrap();
        path
    }
}

const GADGET: &str = "component
mem -1 := 41 : U
fun gadget:
g0: chk <- (0 <= r1) & (r1 < 8)
g1: beqz chk, g5
g2: load y, 16 + r1
g3: load z, 32 + y
g4: skip
g5: ret
";

const DRIVER: &str = "attacker
fun main:
zz0: r1 <- -17
zz1: call gadget
zz2: ret
";

#[test]
fn run_writes_trace_and_exits_zero() {
    let sb = Sandbox::new("run");
    let p = sb.file("gadget.uasm", GADGET);
    let a = sb.file("a.uasm", DRIVER);
    let out_path = sb.dir.join("trace.jsonl");
    let out = muasm(
        &[
            "run",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--sources",
            "B",
            "--out",
            out_path.to_str().unwrap(),
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(&out_path).unwrap();
    assert!(trace.lines().next().unwrap().contains("\"call?\""));
    assert!(trace.contains("\"start\""));
    assert!(trace.lines().last().unwrap().contains("\"term\""));

    // Byte determinism across invocations.
    let again = sb.dir.join("trace2.jsonl");
    let out = muasm(
        &[
            "run",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--sources",
            "B",
            "--out",
            again.to_str().unwrap(),
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(trace, fs::read_to_string(&again).unwrap());
}

#[test]
fn run_without_attacker_fails_on_imports() {
    let sb = Sandbox::new("imports");
    let p = sb.file("c.uasm", "component\nimport f\nfun gadget:\ng0: ret\n");
    let out = muasm(&["run", p.to_str().unwrap()], &sb.dir);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("import"));
}

#[test]
fn run_rejects_incompatible_sources() {
    let sb = Sandbox::new("incompat");
    let p = sb.file("gadget.uasm", GADGET);
    let a = sb.file("a.uasm", DRIVER);
    let out = muasm(
        &["run", p.to_str().unwrap(), "--attacker", a.to_str().unwrap(), "--sources", "R,SLS"],
        &sb.dir,
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot combine"));
}

#[test]
fn run_reports_fuel_exhaustion_as_exit_two() {
    let sb = Sandbox::new("fuel");
    let p = sb.file(
        "loop.uasm",
        "component\nfun gadget:\ng0: jmp &g0\ng1: ret\n",
    );
    let a = sb.file("a.uasm", DRIVER);
    let out = muasm(
        &[
            "run",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--fuel",
            "100",
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn compile_is_deterministic_and_reloadable() {
    let sb = Sandbox::new("compile");
    let p = sb.file("gadget.uasm", GADGET);
    let out1 = sb.dir.join("cm1.uasm");
    let out2 = sb.dir.join("cm2.uasm");
    for out_path in [&out1, &out2] {
        let out = muasm(
            &[
                "compile",
                "--pass",
                "fence_b",
                "--in",
                p.to_str().unwrap(),
                "--out",
                out_path.to_str().unwrap(),
            ],
            &sb.dir,
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = fs::read_to_string(&out1).unwrap();
    assert_eq!(text, fs::read_to_string(&out2).unwrap());
    assert!(text.contains("spbarr"));

    // The compiled file runs and is now safe under B.
    let a = sb.file("a.uasm", DRIVER);
    let out = muasm(
        &[
            "check",
            "ss",
            "--program",
            out1.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--sources",
            "B",
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compile_retpoline_identity_without_indirect_jumps() {
    let sb = Sandbox::new("retp-id");
    let p = sb.file("gadget.uasm", GADGET);
    let out_path = sb.dir.join("cm.uasm");
    let out = muasm(
        &[
            "compile",
            "--pass",
            "retp_j",
            "--in",
            p.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 0);
    // Identity up to printing.
    let printed = fs::read_to_string(&out_path).unwrap();
    assert!(!printed.contains("retpo_trg"));
    assert!(!printed.contains("spbarr"));
}

#[test]
fn compile_vassign_requires_extension() {
    let sb = Sandbox::new("vassign");
    let p = sb.file(
        "v.uasm",
        "component\nfun gadget:\nu0: x <-op y, z\nu1: ret\n",
    );
    let out = muasm(&["compile", "--pass", "uslh_b", "--in", p.to_str().unwrap()], &sb.dir);
    assert_eq!(code(&out), 1);
    let out = muasm(
        &["compile", "--pass", "uslh_b", "--in", p.to_str().unwrap(), "--ext-vassign"],
        &sb.dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compile_golden_outputs() {
    let sb = Sandbox::new("golden");
    let sls = sb.file(
        "sls.uasm",
        "component\nmem -1 := 41 : U\nfun gadget:\np0: skip\np1: ret\nfun tail:\nt0: loadprv y, -1\nt1: load z, 32 + y\nt2: ret\n",
    );
    let out = muasm(&["compile", "--pass", "fence_sls", "--in", sls.to_str().unwrap()], &sb.dir);
    assert_eq!(code(&out), 0);
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "component\n\
         mem -1 := 41 : U\n\
         fun gadget:\n\
         p0: skip\n\
         p1: ret\n\
         q0: spbarr\n\
         fun tail:\n\
         t0: loadprv y, -1\n\
         t1: load z, (32 + y)\n\
         t2: ret\n\
         q1: spbarr\n"
    );

    let btb = sb.file(
        "btb.uasm",
        "component\nfun gadget:\nj0: t <- &j2\nj1: jmp t\nj2: ret\n",
    );
    let out = muasm(&["compile", "--pass", "retp_j", "--in", btb.to_str().unwrap()], &sb.dir);
    assert_eq!(code(&out), 0);
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "component\n\
         fun retpo_trg_j1:\n\
         q3: modret t\n\
         q4: ret\n\
         fun gadget:\n\
         j0: t <- &j2\n\
         j1: call retpo_trg_j1\n\
         q0: skip\n\
         q1: spbarr\n\
         q2: jmp &q0\n\
         j2: ret\n"
    );
}

#[test]
fn check_sni_detects_the_gadget_leak() {
    let sb = Sandbox::new("sni");
    let p = sb.file("gadget.uasm", GADGET);
    let a = sb.file("a.uasm", DRIVER);
    let report = sb.dir.join("sni.json");
    let out = muasm(
        &[
            "check",
            "sni",
            "--program",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--sources",
            "B",
            "--pairs",
            "20",
            "--seed",
            "5",
            "--out",
            report.to_str().unwrap(),
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"secure\": false"));
    assert!(text.contains("\"seed\": 5"));
}

#[test]
fn check_ss_fails_with_witness_report() {
    let sb = Sandbox::new("checkss");
    let p = sb.file("gadget.uasm", GADGET);
    let a = sb.file("a.uasm", DRIVER);
    let report = sb.dir.join("report.json");
    let out = muasm(
        &[
            "check",
            "ss",
            "--program",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--sources",
            "B",
            "--out",
            report.to_str().unwrap(),
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 1);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"safe\": false"));
    assert!(text.contains("\"witness\""));
}

#[test]
fn check_si_exit_codes() {
    let sb = Sandbox::new("si");
    let out = muasm(&["check", "si", "--pass", "fence_b", "--set", "B,J,S,R"], &sb.dir);
    assert_eq!(code(&out), 0);
    let out = muasm(&["check", "si", "--pass", "retp_j", "--set", "SLS"], &sb.dir);
    assert_eq!(code(&out), 1);
    let out = muasm(&["check", "si", "--pass", "fence_b", "--set", "R,SLS"], &sb.dir);
    assert_eq!(code(&out), 3);
}

#[test]
fn check_nesting_single_source_not_applicable() {
    let sb = Sandbox::new("nest");
    let p = sb.file("gadget.uasm", GADGET);
    let a = sb.file("a.uasm", DRIVER);
    let out = muasm(
        &[
            "check",
            "nesting",
            "--program",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--sources",
            "B",
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn check_wfc_passes_on_the_gadget() {
    let sb = Sandbox::new("wfc");
    let p = sb.file("gadget.uasm", GADGET);
    let a = sb.file("a.uasm", DRIVER);
    let out = muasm(
        &[
            "check",
            "wfc",
            "--program",
            p.to_str().unwrap(),
            "--attacker",
            a.to_str().unwrap(),
            "--x",
            "B",
            "--y",
            "S",
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"holds\": true"));
}

#[test]
fn lift_writes_matrix_report() {
    let sb = Sandbox::new("lift");
    let report = sb.dir.join("lift.json");
    let out = muasm(
        &[
            "lift",
            "--pass",
            "fence_sls",
            "--omega",
            "6",
            "--fuel",
            "2000000",
            "--out",
            report.to_str().unwrap(),
        ],
        &sb.dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"strongest\""));
    assert!(text.contains("B+J+S+SLS"));
    let rendered = String::from_utf8_lossy(&out.stderr);
    assert!(rendered.contains("strongest:"));
}
