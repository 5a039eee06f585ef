//! muasm syntax: programs, components, attackers, linking, and label
//! instantiation.
//!
//! Instruction labels are abstract identifiers; the textual order of lines
//! inside a function defines the successor relation. Linking lays the
//! attacker's functions out first, then the component's, and assigns every
//! line a flat index. Straight-line successors cross function boundaries in
//! that layout, which is what makes bypass-style speculation (and its
//! countermeasures) observable at all.
//!
//! # Program text format
//!
//! Line oriented, `#` starts a comment:
//!
//! ```text
//! component                  # or `attacker`
//! mem -1 := 41 : U           # initial memory cell (value : taint)
//! import f                   # component side only
//! fun main:
//! l0: x <- 1 + 2
//! l1: beqz x, l3
//! l2: load y, 16 + x
//! l3: ret
//! ```
//!
//! Mnemonics: `skip`, `x <- e`, `x <?- e, g` (assign when `g` is nonzero),
//! `load x, e`, `store x, e`, `loadprv x, e`, `storeprv x, e`, `jmp e`,
//! `beqz x, l`, `spbarr`, `call f`, `ret`, `popret`, `modret e`,
//! `x <-op y, z` (variable-latency op, extension-gated). Label values in
//! expressions are written `&l`; `bot` is the undefined value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::machine::Taint;

/// Register names are plain identifiers; `pc` is not addressable.
pub type Reg = String;
/// Function names.
pub type FnName = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Unop {
    /// Logical not: 0 becomes 1, anything else becomes 0.
    Not,
    /// Arithmetic negation (wrapping).
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Binop {
    Add,
    Sub,
    Mul,
    Lt,
    Le,
    Eq,
    Ne,
    And,
    Or,
}

/// Expressions over registers and values. Arithmetic applies to integers
/// only; label values may be read and moved but never combined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Expr {
    Int(i64),
    /// The undefined value.
    Bot,
    /// A label literal, written `&l` in source.
    LabelRef(String),
    Reg(Reg),
    Unop(Unop, Box<Expr>),
    Binop(Binop, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn reg(name: &str) -> Expr {
        Expr::Reg(name.to_string())
    }

    /// True when the expression reads at least one register. An indirect
    /// jump is exactly a jump whose target expression is not a bare label.
    pub fn reads_registers(&self) -> bool {
        match self {
            Expr::Int(_) | Expr::Bot | Expr::LabelRef(_) => false,
            Expr::Reg(_) => true,
            Expr::Unop(_, e) => e.reads_registers(),
            Expr::Binop(_, a, b) => a.reads_registers() || b.reads_registers(),
        }
    }

    fn registers(&self, out: &mut BTreeSet<Reg>) {
        match self {
            Expr::Int(_) | Expr::Bot | Expr::LabelRef(_) => {}
            Expr::Reg(r) => {
                out.insert(r.clone());
            }
            Expr::Unop(_, e) => e.registers(out),
            Expr::Binop(_, a, b) => {
                a.registers(out);
                b.registers(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Instr {
    Skip,
    Assign(Reg, Expr),
    /// `x <?- e, g`: assign `e` to `x` when the guard `g` is nonzero.
    CondAssign(Reg, Expr, Expr),
    Load(Reg, Expr),
    Store(Reg, Expr),
    LoadPrv(Reg, Expr),
    StorePrv(Reg, Expr),
    Jmp(Expr),
    Beqz(Reg, String),
    Spbarr,
    Call(FnName),
    Ret,
    /// Administrative: drop the most recent return address.
    Popret,
    /// Administrative: overwrite the most recent return address.
    Modret(Expr),
    /// Variable-latency op `x <-op y, z`; leaks both operands.
    VAssign(Reg, Reg, Reg),
}

impl Instr {
    pub fn is_administrative(&self) -> bool {
        matches!(self, Instr::Popret | Instr::Modret(_))
    }

    /// Registers read or written by the instruction, for static checks.
    pub fn registers(&self) -> BTreeSet<Reg> {
        let mut out = BTreeSet::new();
        match self {
            Instr::Skip | Instr::Spbarr | Instr::Ret | Instr::Popret | Instr::Call(_) => {}
            Instr::Assign(x, e) | Instr::Load(x, e) | Instr::LoadPrv(x, e) => {
                out.insert(x.clone());
                e.registers(&mut out);
            }
            Instr::CondAssign(x, e, g) => {
                out.insert(x.clone());
                e.registers(&mut out);
                g.registers(&mut out);
            }
            Instr::Store(x, e) | Instr::StorePrv(x, e) => {
                out.insert(x.clone());
                e.registers(&mut out);
            }
            Instr::Jmp(e) | Instr::Modret(e) => e.registers(&mut out),
            Instr::Beqz(x, _) => {
                out.insert(x.clone());
            }
            Instr::VAssign(x, y, z) => {
                out.insert(x.clone());
                out.insert(y.clone());
                out.insert(z.clone());
            }
        }
        out
    }
}

/// One labelled instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelledInstr {
    pub label: String,
    pub instr: Instr,
}

/// A function: name plus its code in program order. The line order is the
/// label chain; there is no other successor structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FnDef {
    pub name: FnName,
    pub lines: Vec<LabelledInstr>,
}

/// Initial memory: address to (value, taint).
pub type InitMemory = BTreeMap<i64, (i64, Taint)>;

/// A partial program: private memory, functions, imports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Component {
    pub init_memory: InitMemory,
    pub functions: Vec<FnDef>,
    pub imports: Vec<FnName>,
}

/// Attacker context: public memory and functions, no private accesses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attacker {
    pub init_memory: InitMemory,
    pub functions: Vec<FnDef>,
}

impl Attacker {
    /// An attacker defining nothing at all; links only against components
    /// without imports.
    pub fn empty() -> Attacker {
        Attacker { init_memory: BTreeMap::new(), functions: Vec::new() }
    }
}

/// A parsed source unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unit {
    Component(Component),
    Attacker(Attacker),
}

impl Unit {
    pub fn into_component(self) -> Result<Component, LangError> {
        match self {
            Unit::Component(c) => Ok(c),
            Unit::Attacker(_) => Err(LangError::WrongUnitKind { expected: "component" }),
        }
    }

    pub fn into_attacker(self) -> Result<Attacker, LangError> {
        match self {
            Unit::Attacker(a) => Ok(a),
            Unit::Component(_) => Err(LangError::WrongUnitKind { expected: "attacker" }),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LangError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: administrative instruction `{mnemonic}` is not legal in source")]
    AdministrativeInSource { line: usize, mnemonic: String },
    #[error("line {line}: variable-latency assignment requires the vassign extension")]
    ExtensionDisabled { line: usize },
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("component initial memory must live at negative addresses with taint U (address {0})")]
    InvalidComponentInit(i64),
    #[error("attacker defines private memory at address {0}")]
    PrivateInitInAttacker(i64),
    #[error("attacker uses a private-memory or administrative instruction in `{function}`")]
    PrivateAccessInAttacker { function: FnName },
    #[error("import `{0}` is not defined by the attacker")]
    MissingImport(FnName),
    #[error("function `{0}` is defined by both attacker and component")]
    NameClash(FnName),
    #[error("label `{0}` is defined by both attacker and component")]
    LabelClash(String),
    #[error("whole program has no `main`")]
    NoMain,
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("static jump or branch target `{target}` does not name a label of function `{function}`")]
    TargetOutsideFunction { function: FnName, target: String },
    #[error("expected a {expected} unit")]
    WrongUnitKind { expected: &'static str },
}

/// Parse options. Source text never contains administrative instructions;
/// compiled output read back by the CLI does.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub allow_administrative: bool,
    pub ext_vassign: bool,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parse a source unit with default options (administrative instructions
/// rejected, vassign extension off).
pub fn parse(text: &str) -> Result<Unit, LangError> {
    parse_with(text, ParseOptions::default())
}

pub fn parse_with(text: &str, opts: ParseOptions) -> Result<Unit, LangError> {
    let mut is_component: Option<bool> = None;
    let mut init_memory: InitMemory = BTreeMap::new();
    let mut imports: Vec<FnName> = Vec::new();
    let mut functions: Vec<FnDef> = Vec::new();
    let mut current: Option<FnDef> = None;
    let mut seen_labels: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if is_component.is_none() {
            is_component = Some(match line {
                "component" => true,
                "attacker" => false,
                other => {
                    return Err(LangError::Syntax {
                        line: lineno,
                        msg: format!("expected `component` or `attacker`, found `{other}`"),
                    })
                }
            });
            continue;
        }
        if let Some(rest) = line.strip_prefix("mem ") {
            let (addr, value, taint) = parse_mem_line(rest, lineno)?;
            init_memory.insert(addr, (value, taint));
            continue;
        }
        if let Some(rest) = line.strip_prefix("import ") {
            imports.push(parse_ident(rest.trim(), lineno)?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("fun ") {
            let name = rest.trim().strip_suffix(':').ok_or_else(|| LangError::Syntax {
                line: lineno,
                msg: "function header must end with `:`".into(),
            })?;
            if let Some(f) = current.take() {
                functions.push(f);
            }
            current = Some(FnDef { name: parse_ident(name.trim(), lineno)?, lines: Vec::new() });
            continue;
        }
        // Otherwise: `label: instruction`.
        let (label, body) = line.split_once(':').ok_or_else(|| LangError::Syntax {
            line: lineno,
            msg: "expected `label: instruction`".into(),
        })?;
        let label = parse_ident(label.trim(), lineno)?;
        if !seen_labels.insert(label.clone()) {
            return Err(LangError::DuplicateLabel(label));
        }
        let instr = parse_instr(body.trim(), lineno, opts)?;
        let f = current.as_mut().ok_or_else(|| LangError::Syntax {
            line: lineno,
            msg: "instruction outside a function".into(),
        })?;
        f.lines.push(LabelledInstr { label, instr });
    }
    if let Some(f) = current.take() {
        functions.push(f);
    }

    let is_component = is_component.ok_or(LangError::Syntax { line: 0, msg: "empty unit".into() })?;
    check_static_targets(&functions)?;

    if is_component {
        for (&addr, &(_, taint)) in &init_memory {
            if addr >= 0 || taint != Taint::U {
                return Err(LangError::InvalidComponentInit(addr));
            }
        }
        Ok(Unit::Component(Component { init_memory, functions, imports }))
    } else {
        for &addr in init_memory.keys() {
            if addr < 0 {
                return Err(LangError::PrivateInitInAttacker(addr));
            }
        }
        if !imports.is_empty() {
            return Err(LangError::Syntax { line: 0, msg: "attackers declare no imports".into() });
        }
        Ok(Unit::Attacker(Attacker { init_memory, functions }))
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_ident(s: &str, line: usize) -> Result<String, LangError> {
    let ok = !s.is_empty()
        && s.chars().next().map(|c| c.is_ascii_alphabetic() || c == '_').unwrap_or(false)
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if ok {
        Ok(s.to_string())
    } else {
        Err(LangError::Syntax { line, msg: format!("invalid identifier `{s}`") })
    }
}

fn parse_mem_line(rest: &str, line: usize) -> Result<(i64, i64, Taint), LangError> {
    // `<addr> := <int> : <S|U>`
    let (addr, rhs) = rest.split_once(":=").ok_or_else(|| LangError::Syntax {
        line,
        msg: "memory line must be `mem <addr> := <value> : <S|U>`".into(),
    })?;
    let (value, taint) = rhs.rsplit_once(':').ok_or_else(|| LangError::Syntax {
        line,
        msg: "memory line is missing a taint".into(),
    })?;
    let addr: i64 = addr.trim().parse().map_err(|_| LangError::Syntax {
        line,
        msg: format!("invalid address `{}`", addr.trim()),
    })?;
    let value: i64 = value.trim().parse().map_err(|_| LangError::Syntax {
        line,
        msg: format!("invalid value `{}`", value.trim()),
    })?;
    let taint = match taint.trim() {
        "S" => Taint::S,
        "U" => Taint::U,
        other => {
            return Err(LangError::Syntax { line, msg: format!("invalid taint `{other}`") })
        }
    };
    Ok((addr, value, taint))
}

fn parse_instr(body: &str, line: usize, opts: ParseOptions) -> Result<Instr, LangError> {
    let admin = |mnemonic: &str, instr: Instr| {
        if opts.allow_administrative {
            Ok(instr)
        } else {
            Err(LangError::AdministrativeInSource { line, mnemonic: mnemonic.into() })
        }
    };
    if body == "skip" {
        return Ok(Instr::Skip);
    }
    if body == "spbarr" {
        return Ok(Instr::Spbarr);
    }
    if body == "ret" {
        return Ok(Instr::Ret);
    }
    if body == "popret" {
        return admin("popret", Instr::Popret);
    }
    if let Some(rest) = body.strip_prefix("modret ") {
        return admin("modret", Instr::Modret(parse_expr(rest, line)?));
    }
    if let Some(rest) = body.strip_prefix("call ") {
        return Ok(Instr::Call(parse_ident(rest.trim(), line)?));
    }
    if let Some(rest) = body.strip_prefix("jmp ") {
        return Ok(Instr::Jmp(parse_expr(rest, line)?));
    }
    if let Some(rest) = body.strip_prefix("beqz ") {
        let (x, l) = split2(rest, line)?;
        return Ok(Instr::Beqz(parse_ident(&x, line)?, parse_ident(&l, line)?));
    }
    for (kw, private) in [("load ", false), ("loadprv ", true)] {
        if let Some(rest) = body.strip_prefix(kw) {
            let (x, e) = split2(rest, line)?;
            let x = parse_ident(&x, line)?;
            let e = parse_expr(&e, line)?;
            return Ok(if private { Instr::LoadPrv(x, e) } else { Instr::Load(x, e) });
        }
    }
    for (kw, private) in [("store ", false), ("storeprv ", true)] {
        if let Some(rest) = body.strip_prefix(kw) {
            let (x, e) = split2(rest, line)?;
            let x = parse_ident(&x, line)?;
            let e = parse_expr(&e, line)?;
            return Ok(if private { Instr::StorePrv(x, e) } else { Instr::Store(x, e) });
        }
    }
    // Assignment forms: `x <-op y, z`, `x <?- e, g`, `x <- e`.
    if let Some((lhs, rhs)) = body.split_once("<-op") {
        if !opts.ext_vassign {
            return Err(LangError::ExtensionDisabled { line });
        }
        let x = parse_ident(lhs.trim(), line)?;
        let (y, z) = split2(rhs, line)?;
        return Ok(Instr::VAssign(x, parse_ident(&y, line)?, parse_ident(&z, line)?));
    }
    if let Some((lhs, rhs)) = body.split_once("<?-") {
        let x = parse_ident(lhs.trim(), line)?;
        let (e, g) = split2_expr(rhs, line)?;
        return Ok(Instr::CondAssign(x, e, g));
    }
    if let Some((lhs, rhs)) = body.split_once("<-") {
        let x = parse_ident(lhs.trim(), line)?;
        return Ok(Instr::Assign(x, parse_expr(rhs, line)?));
    }
    Err(LangError::Syntax { line, msg: format!("unknown instruction `{body}`") })
}

fn split2(s: &str, line: usize) -> Result<(String, String), LangError> {
    let (a, b) = s.split_once(',').ok_or_else(|| LangError::Syntax {
        line,
        msg: "expected two comma-separated operands".into(),
    })?;
    Ok((a.trim().to_string(), b.trim().to_string()))
}

/// Split `e, g` at the top-level comma (expressions contain no commas).
fn split2_expr(s: &str, line: usize) -> Result<(Expr, Expr), LangError> {
    let (a, b) = split2(s, line)?;
    Ok((parse_expr(&a, line)?, parse_expr(&b, line)?))
}

// Expression grammar (precedence climbing):
//   or > and > cmp > add > mul > unary > atom
fn parse_expr(s: &str, line: usize) -> Result<Expr, LangError> {
    let tokens = tokenize_expr(s, line)?;
    let mut p = ExprParser { tokens, pos: 0, line };
    let e = p.parse_or()?;
    if p.pos != p.tokens.len() {
        return Err(LangError::Syntax { line, msg: format!("trailing tokens in expression `{s}`") });
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Ident(String),
    Label(String),
    Bot,
    Op(&'static str),
    LParen,
    RParen,
}

fn tokenize_expr(s: &str, line: usize) -> Result<Vec<Tok>, LangError> {
    let mut out = Vec::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        match c {
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '&' => {
                // `&label` is a label literal; a lone `&` is logical and.
                if i + 1 < chars.len() && (chars[i + 1].is_ascii_alphabetic() || chars[i + 1] == '_') {
                    let start = i + 1;
                    let mut j = start;
                    while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                        j += 1;
                    }
                    out.push(Tok::Label(chars[start..j].iter().collect()));
                    i = j;
                } else {
                    out.push(Tok::Op("&"));
                    i += 1;
                }
            }
            '|' => {
                out.push(Tok::Op("|"));
                i += 1;
            }
            '+' => {
                out.push(Tok::Op("+"));
                i += 1;
            }
            '-' => {
                out.push(Tok::Op("-"));
                i += 1;
            }
            '*' => {
                out.push(Tok::Op("*"));
                i += 1;
            }
            '!' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    out.push(Tok::Op("!="));
                    i += 2;
                } else {
                    out.push(Tok::Op("!"));
                    i += 1;
                }
            }
            '=' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    out.push(Tok::Op("=="));
                    i += 2;
                } else {
                    return Err(LangError::Syntax { line, msg: "lone `=` in expression".into() });
                }
            }
            '<' => {
                if i + 1 < chars.len() && chars[i + 1] == '=' {
                    out.push(Tok::Op("<="));
                    i += 2;
                } else {
                    out.push(Tok::Op("<"));
                    i += 1;
                }
            }
            _ if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let n = text.parse().map_err(|_| LangError::Syntax {
                    line,
                    msg: format!("invalid integer `{text}`"),
                })?;
                out.push(Tok::Int(n));
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                if text == "bot" {
                    out.push(Tok::Bot);
                } else {
                    out.push(Tok::Ident(text));
                }
            }
            other => {
                return Err(LangError::Syntax { line, msg: format!("unexpected `{other}`") })
            }
        }
    }
    Ok(out)
}

struct ExprParser {
    tokens: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl ExprParser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: &str) -> LangError {
        LangError::Syntax { line: self.line, msg: msg.into() }
    }

    fn parse_or(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.parse_and()?;
        while self.peek() == Some(&Tok::Op("|")) {
            self.bump();
            let rhs = self.parse_and()?;
            lhs = Expr::Binop(Binop::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.parse_cmp()?;
        while self.peek() == Some(&Tok::Op("&")) {
            self.bump();
            let rhs = self.parse_cmp()?;
            lhs = Expr::Binop(Binop::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_cmp(&mut self) -> Result<Expr, LangError> {
        let lhs = self.parse_add()?;
        let op = match self.peek() {
            Some(Tok::Op("<")) => Some(Binop::Lt),
            Some(Tok::Op("<=")) => Some(Binop::Le),
            Some(Tok::Op("==")) => Some(Binop::Eq),
            Some(Tok::Op("!=")) => Some(Binop::Ne),
            _ => None,
        };
        if let Some(op) = op {
            self.bump();
            let rhs = self.parse_add()?;
            Ok(Expr::Binop(op, Box::new(lhs), Box::new(rhs)))
        } else {
            Ok(lhs)
        }
    }

    fn parse_add(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.parse_mul()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op("+")) => Binop::Add,
                Some(Tok::Op("-")) => Binop::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_mul()?;
            lhs = Expr::Binop(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_mul(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.parse_unary()?;
        while self.peek() == Some(&Tok::Op("*")) {
            self.bump();
            let rhs = self.parse_unary()?;
            lhs = Expr::Binop(Binop::Mul, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, LangError> {
        match self.peek() {
            Some(Tok::Op("!")) => {
                self.bump();
                Ok(Expr::Unop(Unop::Not, Box::new(self.parse_unary()?)))
            }
            Some(Tok::Op("-")) => {
                self.bump();
                // Fold negated literals so printing round-trips cleanly.
                match self.parse_unary()? {
                    Expr::Int(n) => Ok(Expr::Int(n.wrapping_neg())),
                    e => Ok(Expr::Unop(Unop::Neg, Box::new(e))),
                }
            }
            _ => self.parse_atom(),
        }
    }

    fn parse_atom(&mut self) -> Result<Expr, LangError> {
        match self.bump() {
            Some(Tok::Int(n)) => Ok(Expr::Int(n)),
            Some(Tok::Bot) => Ok(Expr::Bot),
            Some(Tok::Ident(name)) => Ok(Expr::Reg(name)),
            Some(Tok::Label(name)) => Ok(Expr::LabelRef(name)),
            Some(Tok::LParen) => {
                let e = self.parse_or()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(self.err("unclosed parenthesis")),
                }
            }
            other => Err(self.err(&format!("unexpected token {other:?} in expression"))),
        }
    }
}

/// Static jump and branch targets must name a label of the same function.
fn check_static_targets(functions: &[FnDef]) -> Result<(), LangError> {
    for f in functions {
        let labels: BTreeSet<&str> = f.lines.iter().map(|l| l.label.as_str()).collect();
        for li in &f.lines {
            let target = match &li.instr {
                Instr::Beqz(_, l) => Some(l),
                Instr::Jmp(Expr::LabelRef(l)) => Some(l),
                _ => None,
            };
            if let Some(t) = target {
                if !labels.contains(t.as_str()) {
                    return Err(LangError::TargetOutsideFunction {
                        function: f.name.clone(),
                        target: t.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pretty printing
// ---------------------------------------------------------------------------

pub fn pretty_print(unit: &Unit) -> String {
    match unit {
        Unit::Component(c) => {
            let mut out = String::from("component\n");
            print_memory(&mut out, &c.init_memory);
            for i in &c.imports {
                out.push_str(&format!("import {i}\n"));
            }
            print_functions(&mut out, &c.functions);
            out
        }
        Unit::Attacker(a) => {
            let mut out = String::from("attacker\n");
            print_memory(&mut out, &a.init_memory);
            print_functions(&mut out, &a.functions);
            out
        }
    }
}

fn print_memory(out: &mut String, mem: &InitMemory) {
    for (addr, (v, t)) in mem {
        out.push_str(&format!("mem {addr} := {v} : {t}\n"));
    }
}

fn print_functions(out: &mut String, functions: &[FnDef]) {
    for f in functions {
        out.push_str(&format!("fun {}:\n", f.name));
        for li in &f.lines {
            out.push_str(&format!("{}: {}\n", li.label, print_instr(&li.instr)));
        }
    }
}

pub fn print_instr(i: &Instr) -> String {
    match i {
        Instr::Skip => "skip".into(),
        Instr::Assign(x, e) => format!("{x} <- {}", print_expr(e)),
        Instr::CondAssign(x, e, g) => format!("{x} <?- {}, {}", print_expr(e), print_expr(g)),
        Instr::Load(x, e) => format!("load {x}, {}", print_expr(e)),
        Instr::Store(x, e) => format!("store {x}, {}", print_expr(e)),
        Instr::LoadPrv(x, e) => format!("loadprv {x}, {}", print_expr(e)),
        Instr::StorePrv(x, e) => format!("storeprv {x}, {}", print_expr(e)),
        Instr::Jmp(e) => format!("jmp {}", print_expr(e)),
        Instr::Beqz(x, l) => format!("beqz {x}, {l}"),
        Instr::Spbarr => "spbarr".into(),
        Instr::Call(f) => format!("call {f}"),
        Instr::Ret => "ret".into(),
        Instr::Popret => "popret".into(),
        Instr::Modret(e) => format!("modret {}", print_expr(e)),
        Instr::VAssign(x, y, z) => format!("{x} <-op {y}, {z}"),
    }
}

fn print_expr(e: &Expr) -> String {
    // Parenthesize every compound expression so reparsing is structural.
    match e {
        Expr::Int(n) => n.to_string(),
        Expr::Bot => "bot".into(),
        Expr::LabelRef(l) => format!("&{l}"),
        Expr::Reg(r) => r.clone(),
        Expr::Unop(op, a) => {
            let sym = match op {
                Unop::Not => "!",
                Unop::Neg => "-",
            };
            format!("{sym}({})", print_expr(a))
        }
        Expr::Binop(op, a, b) => {
            let sym = match op {
                Binop::Add => "+",
                Binop::Sub => "-",
                Binop::Mul => "*",
                Binop::Lt => "<",
                Binop::Le => "<=",
                Binop::Eq => "==",
                Binop::Ne => "!=",
                Binop::And => "&",
                Binop::Or => "|",
            };
            format!("({} {sym} {})", print_expr(a), print_expr(b))
        }
    }
}

// ---------------------------------------------------------------------------
// Attacker validity
// ---------------------------------------------------------------------------

/// An attacker is valid when it defines no private memory and contains no
/// private-memory or administrative instructions.
pub fn validate_attacker(a: &Attacker) -> Result<(), LangError> {
    for &addr in a.init_memory.keys() {
        if addr < 0 {
            return Err(LangError::PrivateInitInAttacker(addr));
        }
    }
    for f in &a.functions {
        for li in &f.lines {
            match li.instr {
                Instr::LoadPrv(..) | Instr::StorePrv(..) | Instr::Popret | Instr::Modret(_) => {
                    return Err(LangError::PrivateAccessInAttacker { function: f.name.clone() })
                }
                _ => {}
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linking and the runtime program
// ---------------------------------------------------------------------------

/// A linked whole program, flattened for execution. Layout: attacker
/// functions first (source order), then component functions. Straight-line
/// successors follow this layout across function ends; the final line's
/// successor is a halt.
#[derive(Debug, Clone)]
pub struct Program {
    pub lines: Vec<ProgLine>,
    pub functions: Vec<FnInfo>,
    pub init_memory: InitMemory,
    /// Names of attacker-defined functions (the rewritten import list).
    pub imports: BTreeSet<FnName>,
    label_index: BTreeMap<String, usize>,
    fn_index: BTreeMap<FnName, usize>,
    main_start: usize,
}

#[derive(Debug, Clone)]
pub struct ProgLine {
    pub label: String,
    pub instr: Instr,
    /// Index into `functions`.
    pub func: usize,
}

#[derive(Debug, Clone)]
pub struct FnInfo {
    pub name: FnName,
    pub start: usize,
    pub end: usize,
    pub attacker_defined: bool,
}

/// The merged source-level view produced by `link`, kept so compiled
/// programs can be re-linked and re-instantiated.
#[derive(Debug, Clone)]
pub struct WholeProgram {
    pub attacker: Attacker,
    pub component: Component,
    pub program: Program,
}

/// Link an attacker against a component.
///
/// The attacker must be valid and define every import; function names and
/// labels must not clash. The import list of the result is the full set of
/// attacker-defined names. `main` may live on either side; execution starts
/// at its first line.
pub fn link(attacker: &Attacker, component: &Component) -> Result<WholeProgram, LangError> {
    validate_attacker(attacker)?;

    let attacker_names: BTreeSet<FnName> =
        attacker.functions.iter().map(|f| f.name.clone()).collect();
    let component_names: BTreeSet<FnName> =
        component.functions.iter().map(|f| f.name.clone()).collect();
    for imp in &component.imports {
        if !attacker_names.contains(imp) {
            return Err(LangError::MissingImport(imp.clone()));
        }
    }
    if let Some(clash) = attacker_names.intersection(&component_names).next() {
        return Err(LangError::NameClash(clash.clone()));
    }

    let mut init_memory = component.init_memory.clone();
    for (&addr, &cell) in &attacker.init_memory {
        init_memory.insert(addr, cell);
    }

    let mut lines = Vec::new();
    let mut functions = Vec::new();
    let mut label_index = BTreeMap::new();
    let mut fn_index = BTreeMap::new();

    let mut push_fns = |fns: &[FnDef], attacker_defined: bool| -> Result<(), LangError> {
        for f in fns {
            let start = lines.len();
            let func_idx = functions.len();
            for li in &f.lines {
                if label_index.insert(li.label.clone(), lines.len()).is_some() {
                    return Err(LangError::LabelClash(li.label.clone()));
                }
                lines.push(ProgLine { label: li.label.clone(), instr: li.instr.clone(), func: func_idx });
            }
            functions.push(FnInfo {
                name: f.name.clone(),
                start,
                end: lines.len(),
                attacker_defined,
            });
            fn_index.insert(f.name.clone(), func_idx);
        }
        Ok(())
    };
    push_fns(&attacker.functions, true)?;
    push_fns(&component.functions, false)?;

    let main_start = functions
        .iter()
        .find(|f| f.name == "main")
        .map(|f| f.start)
        .ok_or(LangError::NoMain)?;

    Ok(WholeProgram {
        attacker: attacker.clone(),
        component: component.clone(),
        program: Program {
            lines,
            functions,
            init_memory,
            imports: attacker_names,
            label_index,
            fn_index,
            main_start,
        },
    })
}

impl Program {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn main_start(&self) -> usize {
        self.main_start
    }

    pub fn resolve_label(&self, name: &str) -> Result<usize, LangError> {
        self.label_index.get(name).copied().ok_or_else(|| LangError::UnknownLabel(name.into()))
    }

    pub fn fn_start(&self, name: &str) -> Option<usize> {
        self.fn_index.get(name).map(|&i| self.functions[i].start)
    }

    /// Owning function of a line index.
    pub fn func_of(&self, idx: usize) -> Option<&FnInfo> {
        self.lines.get(idx).map(|l| &self.functions[l.func])
    }

    /// True when the line belongs to an attacker-defined function.
    pub fn in_attacker(&self, idx: usize) -> bool {
        self.func_of(idx).map(|f| f.attacker_defined).unwrap_or(false)
    }

    /// Name of the function owning a label, for diagnostics and checks.
    pub fn function_of(&self, label: &str) -> Result<&FnName, LangError> {
        let idx = self.resolve_label(label)?;
        Ok(&self.functions[self.lines[idx].func].name)
    }

    /// Straight-line successor: the next line in layout, crossing function
    /// boundaries; `None` past the end of the program.
    pub fn succ(&self, idx: usize) -> Option<usize> {
        let next = idx + 1;
        (next < self.lines.len()).then_some(next)
    }

    /// Line indices of component-defined code, in layout order. These are
    /// the candidate targets for speculative indirect jumps.
    pub fn component_line_indices(&self) -> Vec<usize> {
        (0..self.lines.len()).filter(|&i| !self.in_attacker(i)).collect()
    }
}

// ---------------------------------------------------------------------------
// Label instantiation
// ---------------------------------------------------------------------------

/// A bijection from labels onto an initial segment of the naturals,
/// consecutive along each function chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelMap {
    pub seed: u64,
    pub map: BTreeMap<String, u64>,
}

impl LabelMap {
    pub fn get(&self, label: &str) -> Option<u64> {
        self.map.get(label).copied()
    }
}

/// Assign consecutive numbers starting at `seed`, walking functions in
/// layout order and each function's chain from its least label.
pub fn instantiate_labels(program: &Program, seed: u64) -> LabelMap {
    let mut map = BTreeMap::new();
    let mut n = seed;
    for f in &program.functions {
        for idx in f.start..f.end {
            map.insert(program.lines[idx].label.clone(), n);
            n += 1;
        }
    }
    LabelMap { seed, map }
}

impl fmt::Display for LabelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (label, n) in &self.map {
            writeln!(f, "{label} -> {n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn component(src: &str) -> Component {
        parse(src).unwrap().into_component().unwrap()
    }

    fn attacker(src: &str) -> Attacker {
        parse(src).unwrap().into_attacker().unwrap()
    }

    #[test]
    fn parse_minimal_component() {
        let c = component("component\nfun main:\nl0: skip\nl1: ret\n");
        assert_eq!(c.functions.len(), 1);
        assert_eq!(c.functions[0].lines.len(), 2);
        assert_eq!(c.functions[0].lines[0].label, "l0");
        assert_eq!(c.functions[0].lines[1].instr, Instr::Ret);
    }

    #[test]
    fn administrative_rejected_in_source() {
        let err = parse("component\nfun main:\nl0: popret\n").unwrap_err();
        assert!(matches!(err, LangError::AdministrativeInSource { .. }));
        let err = parse("component\nfun main:\nl0: modret x\n").unwrap_err();
        assert!(matches!(err, LangError::AdministrativeInSource { .. }));
    }

    #[test]
    fn administrative_allowed_for_compiled_output() {
        let opts = ParseOptions { allow_administrative: true, ..Default::default() };
        let unit = parse_with("component\nfun main:\nl0: popret\nl1: ret\n", opts).unwrap();
        let c = unit.into_component().unwrap();
        assert_eq!(c.functions[0].lines[0].instr, Instr::Popret);
    }

    #[test]
    fn duplicate_label_rejected() {
        let err = parse("component\nfun main:\nl0: skip\nl0: ret\n").unwrap_err();
        assert_eq!(err, LangError::DuplicateLabel("l0".into()));
    }

    #[test]
    fn vassign_needs_extension() {
        let err = parse("component\nfun main:\nl0: x <-op y, z\n").unwrap_err();
        assert!(matches!(err, LangError::ExtensionDisabled { .. }));
        let opts = ParseOptions { ext_vassign: true, ..Default::default() };
        let unit = parse_with("component\nfun main:\nl0: x <-op y, z\nl1: ret\n", opts).unwrap();
        assert!(matches!(
            unit.into_component().unwrap().functions[0].lines[0].instr,
            Instr::VAssign(..)
        ));
    }

    #[test]
    fn component_init_must_be_private_and_unsafe() {
        let err = parse("component\nmem 3 := 1 : U\nfun main:\nl0: ret\n").unwrap_err();
        assert_eq!(err, LangError::InvalidComponentInit(3));
        let err = parse("component\nmem -3 := 1 : S\nfun main:\nl0: ret\n").unwrap_err();
        assert_eq!(err, LangError::InvalidComponentInit(-3));
    }

    #[test]
    fn attacker_validity() {
        let a = attacker("attacker\nmem 5 := 7 : S\nfun main:\na0: load x, 5\na1: ret\n");
        assert!(validate_attacker(&a).is_ok());
        let a = attacker("attacker\nfun main:\na0: loadprv x, -1\na1: ret\n");
        let err = validate_attacker(&a).unwrap_err();
        assert!(matches!(err, LangError::PrivateAccessInAttacker { .. }));
        let err = parse("attacker\nmem -1 := 0 : S\nfun main:\na0: ret\n").unwrap_err();
        assert_eq!(err, LangError::PrivateInitInAttacker(-1));
    }

    #[test]
    fn link_rewrites_imports_to_all_attacker_functions() {
        let c = component("component\nimport f\nfun gadget:\ng0: ret\n");
        let a = attacker("attacker\nfun main:\na0: call gadget\na1: ret\nfun f:\nb0: ret\nfun g:\nc0: ret\n");
        let w = link(&a, &c).unwrap();
        let names: Vec<&str> = w.program.imports.iter().map(|s| s.as_str()).collect();
        assert_eq!(names, vec!["f", "g", "main"]);
    }

    #[test]
    fn link_missing_import() {
        let c = component("component\nimport f\nfun gadget:\ng0: ret\n");
        let a = attacker("attacker\nfun main:\na0: ret\n");
        assert_eq!(link(&a, &c).unwrap_err(), LangError::MissingImport("f".into()));
    }

    #[test]
    fn link_detects_clashes_and_missing_main() {
        let c = component("component\nfun f:\ng0: ret\n");
        let a = attacker("attacker\nfun f:\na0: ret\n");
        assert_eq!(link(&a, &c).unwrap_err(), LangError::NameClash("f".into()));

        let c = component("component\nfun g:\nl0: ret\n");
        let a = attacker("attacker\nfun f:\na0: ret\n");
        assert_eq!(link(&a, &c).unwrap_err(), LangError::NoMain);

        let c = component("component\nfun g:\nl0: ret\n");
        let a = attacker("attacker\nfun f:\nl0: ret\n");
        assert_eq!(link(&a, &c).unwrap_err(), LangError::LabelClash("l0".into()));
    }

    #[test]
    fn function_of_resolves_owner() {
        let c = component("component\nfun gadget:\ng0: skip\ng1: ret\n");
        let a = attacker("attacker\nfun main:\na0: call gadget\na1: ret\n");
        let w = link(&a, &c).unwrap();
        assert_eq!(w.program.function_of("g0").unwrap(), "gadget");
        assert_eq!(w.program.function_of("a0").unwrap(), "main");
        assert!(matches!(w.program.function_of("zz"), Err(LangError::UnknownLabel(_))));
    }

    #[test]
    fn instantiate_single_chain() {
        let c = component("component\nfun main:\nl0: skip\nl1: skip\nl2: ret\n");
        let w = link(&Attacker::empty(), &c).unwrap();
        let m = instantiate_labels(&w.program, 1);
        assert_eq!(m.get("l0"), Some(1));
        assert_eq!(m.get("l1"), Some(2));
        assert_eq!(m.get("l2"), Some(3));
    }

    #[test]
    fn instantiate_two_chains_contiguous_disjoint() {
        let c = component("component\nfun main:\nl0: skip\nl1: ret\nfun g:\nm0: skip\nm1: ret\n");
        let w = link(&Attacker::empty(), &c).unwrap();
        let m = instantiate_labels(&w.program, 1);
        let all: BTreeSet<u64> = m.map.values().copied().collect();
        assert_eq!(all, (1..=4).collect());
        assert_eq!(m.get("l1").unwrap(), m.get("l0").unwrap() + 1);
        assert_eq!(m.get("m1").unwrap(), m.get("m0").unwrap() + 1);
    }

    #[test]
    fn instantiate_empty_program() {
        let c = Component { init_memory: BTreeMap::new(), functions: vec![], imports: vec![] };
        let a = attacker("attacker\nfun main:\na0: ret\n");
        let w = link(&a, &c).unwrap();
        let m = instantiate_labels(&w.program, 1);
        assert_eq!(m.map.len(), 1); // only the attacker's line
    }

    #[test]
    fn static_targets_must_stay_in_function() {
        let err = parse("component\nfun main:\nl0: beqz x, m0\nl1: ret\nfun g:\nm0: ret\n").unwrap_err();
        assert!(matches!(err, LangError::TargetOutsideFunction { .. }));
        let err = parse("component\nfun main:\nl0: jmp &m0\nl1: ret\nfun g:\nm0: ret\n").unwrap_err();
        assert!(matches!(err, LangError::TargetOutsideFunction { .. }));
    }

    #[test]
    fn roundtrip_pretty_print() {
        let src = "component\nmem -1 := 41 : U\nfun main:\nl0: x <- (1 + (2 * 3))\nl1: y <?- (x < 8), x\nl2: load z, (16 + x)\nl3: beqz z, l5\nl4: jmp &l5\nl5: t <- &l0\nl6: jmp t\nl7: store z, 9\nl8: call g\nl9: ret\nfun g:\nm0: w <- !(x == 2)\nm1: spbarr\nm2: ret\n";
        let unit = parse(src).unwrap();
        let printed = pretty_print(&unit);
        let reparsed = parse(&printed).unwrap();
        assert_eq!(unit, reparsed);
    }
}
