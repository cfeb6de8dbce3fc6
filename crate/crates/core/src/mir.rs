//! A compact SSA mini-IR ("MIR") standing in for the LLVM IR of an outlined
//! parallel region.
//!
//! Grammar (whitespace separated, ASCII, LF line endings):
//!
//! ```text
//! module  := func+
//! func    := "func" "@" ident "{" block+ "}"
//! block   := "block" "%" ident ":" instr+
//! instr   := ["%" ident "="] opcode [operand ("," operand)*]
//! operand := "%" ident | "@" ident | integer | "%%" blocklabel
//! ```
//!
//! The first function of a module is the region entry (the outlined
//! function); any further functions are callees reachable from it.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MirError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown opcode `{name}` at {line}:{col}")]
    UnknownOpcode { name: String, line: usize, col: usize },
    #[error("SSA violation in @{function}: {msg} `%{name}`")]
    Ssa { function: String, name: String, msg: &'static str },
    #[error("undefined block label `%%{label}` in @{function}")]
    UndefinedLabel { function: String, label: String },
    #[error("bad operands for `{opcode}` in @{function}: {msg}")]
    Arity { function: String, opcode: Opcode, msg: String },
    #[error("malformed structure in @{function}: {msg}")]
    Structure { function: String, msg: String },
    #[error("module has no functions")]
    Empty,
    #[error("unknown region family `{0}`")]
    UnknownFamily(String),
    #[error("region size must be at least 1")]
    ZeroSize,
}

/// The closed opcode set. Declaration order is the vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Load,
    Store,
    Alloca,
    Add,
    Sub,
    Mul,
    Div,
    Fma,
    Cmp,
    Phi,
    Index,
    Br,
    CondBr,
    Call,
    Ret,
}

impl Opcode {
    pub const ALL: [Opcode; 15] = [
        Opcode::Load,
        Opcode::Store,
        Opcode::Alloca,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Div,
        Opcode::Fma,
        Opcode::Cmp,
        Opcode::Phi,
        Opcode::Index,
        Opcode::Br,
        Opcode::CondBr,
        Opcode::Call,
        Opcode::Ret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Alloca => "alloca",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Div => "div",
            Opcode::Fma => "fma",
            Opcode::Cmp => "cmp",
            Opcode::Phi => "phi",
            Opcode::Index => "index",
            Opcode::Br => "br",
            Opcode::CondBr => "condbr",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
        }
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.name() == name)
    }

    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Br | Opcode::CondBr | Opcode::Ret)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Local(String),
    Global(String),
    Int(i64),
    Label(String),
}

impl Operand {
    fn is_value(&self) -> bool {
        !matches!(self, Operand::Label(_))
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Local(n) => write!(f, "%{n}"),
            Operand::Global(n) => write!(f, "@{n}"),
            Operand::Int(v) => write!(f, "{v}"),
            Operand::Label(l) => write!(f, "%%{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirInstruction {
    pub result: Option<String>,
    pub opcode: Opcode,
    pub operands: Vec<Operand>,
}

impl MirInstruction {
    /// Block labels this instruction may transfer control to.
    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.operands.iter().filter_map(|op| match op {
            Operand::Label(l) if self.opcode.is_terminator() => Some(l.as_str()),
            _ => None,
        })
    }

    /// Callee name for `call`.
    pub fn callee(&self) -> Option<&str> {
        match (self.opcode, self.operands.first()) {
            (Opcode::Call, Some(Operand::Global(name))) => Some(name),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirBlock {
    pub label: String,
    pub instructions: Vec<MirInstruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirFunction {
    pub name: String,
    pub blocks: Vec<MirBlock>,
}

impl MirFunction {
    pub fn instructions(&self) -> impl Iterator<Item = &MirInstruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirModule {
    pub source_name: String,
    pub functions: Vec<MirFunction>,
}

impl MirModule {
    /// Builds a module and checks every structural invariant.
    pub fn new(source_name: impl Into<String>, functions: Vec<MirFunction>) -> Result<Self, MirError> {
        let module = MirModule { source_name: source_name.into(), functions };
        module.validate()?;
        Ok(module)
    }

    pub fn function(&self, name: &str) -> Option<&MirFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn instructions(&self) -> impl Iterator<Item = &MirInstruction> {
        self.functions.iter().flat_map(|f| f.instructions())
    }

    /// Canonical text form; `parse_named(&m.to_text(), &m.source_name) == m`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn validate(&self) -> Result<(), MirError> {
        if self.functions.is_empty() {
            return Err(MirError::Empty);
        }
        let mut names = HashSet::new();
        for f in &self.functions {
            if !names.insert(f.name.as_str()) {
                return Err(MirError::Structure {
                    function: f.name.clone(),
                    msg: "duplicate function name".into(),
                });
            }
            validate_function(f)?;
        }
        // Every non-entry function must be reachable from the entry through calls.
        let mut reached = HashSet::from([self.functions[0].name.as_str()]);
        let mut stack = vec![&self.functions[0]];
        while let Some(f) = stack.pop() {
            for callee in f.instructions().filter_map(|i| i.callee()) {
                if let Some(g) = self.function(callee) {
                    if reached.insert(g.name.as_str()) {
                        stack.push(g);
                    }
                }
            }
        }
        if let Some(f) = self.functions.iter().find(|f| !reached.contains(f.name.as_str())) {
            return Err(MirError::Structure {
                function: f.name.clone(),
                msg: "function is never called from the region entry".into(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for MirModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, func) in self.functions.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            writeln!(f, "func @{} {{", func.name)?;
            for block in &func.blocks {
                writeln!(f, "  block %{}:", block.label)?;
                for inst in &block.instructions {
                    f.write_str("    ")?;
                    if let Some(r) = &inst.result {
                        write!(f, "%{r} = ")?;
                    }
                    f.write_str(inst.opcode.name())?;
                    for (i, op) in inst.operands.iter().enumerate() {
                        f.write_str(if i == 0 { " " } else { ", " })?;
                        write!(f, "{op}")?;
                    }
                    writeln!(f)?;
                }
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

fn validate_function(f: &MirFunction) -> Result<(), MirError> {
    let structure = |msg: String| MirError::Structure { function: f.name.clone(), msg };
    if f.blocks.is_empty() {
        return Err(structure("function has no blocks".into()));
    }
    let mut labels = HashMap::new();
    for (k, b) in f.blocks.iter().enumerate() {
        if labels.insert(b.label.as_str(), k).is_some() {
            return Err(structure(format!("duplicate block label %{}", b.label)));
        }
        let Some(last) = b.instructions.last() else {
            return Err(structure(format!("block %{} is empty", b.label)));
        };
        if !last.opcode.is_terminator() {
            return Err(structure(format!("block %{} does not end with br/condbr/ret", b.label)));
        }
        if b.instructions[..b.instructions.len() - 1].iter().any(|i| i.opcode.is_terminator()) {
            return Err(structure(format!("terminator in the middle of block %{}", b.label)));
        }
    }

    let mut defined = HashSet::new();
    for inst in f.instructions() {
        check_arity(f, inst)?;
        if let Some(r) = &inst.result {
            if !defined.insert(r.as_str()) {
                return Err(MirError::Ssa { function: f.name.clone(), name: r.clone(), msg: "value defined twice" });
            }
        }
        for op in &inst.operands {
            if let Operand::Label(l) = op {
                if !labels.contains_key(l.as_str()) {
                    return Err(MirError::UndefinedLabel { function: f.name.clone(), label: l.clone() });
                }
            }
        }
    }
    for inst in f.instructions() {
        for op in &inst.operands {
            if let Operand::Local(name) = op {
                if !defined.contains(name.as_str()) {
                    return Err(MirError::Ssa { function: f.name.clone(), name: name.clone(), msg: "use of undefined value" });
                }
            }
        }
    }

    // Reachability from the entry block, and no single-instruction self loops.
    let mut seen = vec![false; f.blocks.len()];
    seen[0] = true;
    let mut stack = vec![0usize];
    while let Some(k) = stack.pop() {
        let block = &f.blocks[k];
        let term = block.instructions.last().expect("checked non-empty");
        for t in term.targets() {
            let j = labels[t];
            if j == k && block.instructions.len() == 1 {
                return Err(structure(format!("block %{} branches to itself with no body", block.label)));
            }
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(structure(format!("block %{} is unreachable", f.blocks[k].label)));
    }
    Ok(())
}

fn check_arity(f: &MirFunction, inst: &MirInstruction) -> Result<(), MirError> {
    let err = |msg: &str| MirError::Arity { function: f.name.clone(), opcode: inst.opcode, msg: msg.to_string() };
    let ops = &inst.operands;
    let all_values = |ops: &[Operand]| ops.iter().all(Operand::is_value);
    let needs_result = !matches!(inst.opcode, Opcode::Store | Opcode::Br | Opcode::CondBr | Opcode::Ret | Opcode::Call);
    if needs_result && inst.result.is_none() {
        return Err(err("instruction must define a value"));
    }
    if matches!(inst.opcode, Opcode::Store | Opcode::Br | Opcode::CondBr | Opcode::Ret) && inst.result.is_some() {
        return Err(err("instruction cannot define a value"));
    }
    match inst.opcode {
        Opcode::Load => {
            if ops.len() != 1 || !matches!(ops[0], Operand::Local(_) | Operand::Global(_)) {
                return Err(err("expects one address operand"));
            }
        }
        Opcode::Alloca => {
            if ops.len() != 1 || !matches!(ops[0], Operand::Int(n) if n > 0) {
                return Err(err("expects one positive integer size"));
            }
        }
        Opcode::Store | Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Div | Opcode::Cmp | Opcode::Index => {
            if ops.len() != 2 || !all_values(ops) {
                return Err(err("expects two value operands"));
            }
        }
        Opcode::Fma => {
            if ops.len() != 3 || !all_values(ops) {
                return Err(err("expects three value operands"));
            }
        }
        Opcode::Phi => {
            let pairs_ok = ops.len() >= 2
                && ops.len().is_multiple_of(2)
                && ops.chunks(2).all(|p| p[0].is_value() && matches!(p[1], Operand::Label(_)));
            if !pairs_ok {
                return Err(err("expects (value, %%label) pairs"));
            }
        }
        Opcode::Br => {
            if ops.len() != 1 || !matches!(ops[0], Operand::Label(_)) {
                return Err(err("expects one block label"));
            }
        }
        Opcode::CondBr => {
            let ok = ops.len() == 3
                && ops[0].is_value()
                && matches!(ops[1], Operand::Label(_))
                && matches!(ops[2], Operand::Label(_));
            if !ok {
                return Err(err("expects a condition and two block labels"));
            }
        }
        Opcode::Call => {
            if ops.is_empty() || !matches!(ops[0], Operand::Global(_)) || !all_values(&ops[1..]) {
                return Err(err("expects @callee followed by value arguments"));
            }
        }
        Opcode::Ret => {
            if ops.len() > 1 || !all_values(ops) {
                return Err(err("expects at most one value operand"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Local(String),
    Global(String),
    Label(String),
    Int(i64),
    LBrace,
    RBrace,
    Colon,
    Eq,
    Comma,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => f.write_str(w),
            Tok::Local(n) => write!(f, "%{n}"),
            Tok::Global(n) => write!(f, "@{n}"),
            Tok::Label(n) => write!(f, "%%{n}"),
            Tok::Int(v) => write!(f, "{v}"),
            Tok::LBrace => f.write_str("{"),
            Tok::RBrace => f.write_str("}"),
            Tok::Colon => f.write_str(":"),
            Tok::Eq => f.write_str("="),
            Tok::Comma => f.write_str(","),
        }
    }
}

struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'.'
}

fn lex(text: &str) -> Result<Vec<Spanned>, MirError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut line_start) = (0usize, 1usize, 0usize);
    while i < bytes.len() {
        let c = bytes[i];
        let col = i - line_start + 1;
        let syntax = |msg: String| MirError::Syntax { line, col, msg };
        if c == b'\n' {
            line += 1;
            line_start = i + 1;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if !c.is_ascii() {
            return Err(syntax("non-ASCII character".into()));
        }
        let ident_from = |start: usize| {
            let mut end = start;
            while end < bytes.len() && is_ident_char(bytes[end]) {
                end += 1;
            }
            end
        };
        let tok = match c {
            b'{' => {
                i += 1;
                Tok::LBrace
            }
            b'}' => {
                i += 1;
                Tok::RBrace
            }
            b':' => {
                i += 1;
                Tok::Colon
            }
            b'=' => {
                i += 1;
                Tok::Eq
            }
            b',' => {
                i += 1;
                Tok::Comma
            }
            b'%' | b'@' => {
                let label = c == b'%' && bytes.get(i + 1) == Some(&b'%');
                let start = if label { i + 2 } else { i + 1 };
                let end = ident_from(start);
                if end == start {
                    return Err(syntax(format!("expected identifier after `{}`", &text[i..start])));
                }
                let name = text[start..end].to_string();
                i = end;
                match (c, label) {
                    (b'@', _) => Tok::Global(name),
                    (_, true) => Tok::Label(name),
                    _ => Tok::Local(name),
                }
            }
            b'-' | b'0'..=b'9' => {
                let start = i;
                let mut end = if c == b'-' { i + 1 } else { i };
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
                if end < bytes.len() && is_ident_char(bytes[end]) || end == start + 1 && c == b'-' {
                    return Err(syntax(format!("malformed integer `{}`", &text[start..ident_from(end).max(end)])));
                }
                let v = text[start..end]
                    .parse::<i64>()
                    .map_err(|e| syntax(format!("integer `{}`: {e}", &text[start..end])))?;
                i = end;
                Tok::Int(v)
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let end = ident_from(i);
                let w = text[i..end].to_string();
                i = end;
                Tok::Word(w)
            }
            _ => return Err(syntax(format!("unexpected character `{}`", c as char))),
        };
        out.push(Spanned { tok, line, col });
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|s| &s.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.eof, |s| (s.line, s.col))
    }

    fn error(&self, msg: String) -> MirError {
        let (line, col) = self.here();
        MirError::Syntax { line, col, msg }
    }

    fn unexpected(&self, what: &str) -> MirError {
        match self.peek() {
            Some(t) => self.error(format!("expected {what}, found `{t}`")),
            None => self.error(format!("expected {what}, found end of input")),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), MirError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(what))
        }
    }

    fn module(&mut self, source_name: &str) -> Result<MirModule, MirError> {
        let mut functions = Vec::new();
        while self.peek().is_some() {
            functions.push(self.function()?);
        }
        if functions.is_empty() {
            return Err(self.error("expected `func`".into()));
        }
        MirModule::new(source_name, functions)
    }

    fn function(&mut self) -> Result<MirFunction, MirError> {
        self.expect(Tok::Word("func".into()), "`func`")?;
        let name = match self.peek() {
            Some(Tok::Global(n)) => n.clone(),
            _ => return Err(self.unexpected("@name")),
        };
        self.pos += 1;
        self.expect(Tok::LBrace, "`{`")?;
        let mut blocks = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::Word(w)) if w == "block" => blocks.push(self.block()?),
                Some(Tok::RBrace) if !blocks.is_empty() => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(self.unexpected("`block`")),
            }
        }
        Ok(MirFunction { name, blocks })
    }

    fn block(&mut self) -> Result<MirBlock, MirError> {
        self.pos += 1; // `block`
        let label = match self.peek() {
            Some(Tok::Local(n)) => n.clone(),
            _ => return Err(self.unexpected("%label")),
        };
        self.pos += 1;
        self.expect(Tok::Colon, "`:`")?;
        let mut instructions = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::RBrace) if !instructions.is_empty() => break,
                Some(Tok::Word(w)) if w == "block" && !instructions.is_empty() => break,
                _ => instructions.push(self.instruction()?),
            }
        }
        Ok(MirBlock { label, instructions })
    }

    fn instruction(&mut self) -> Result<MirInstruction, MirError> {
        let mut result = None;
        if let (Some(Tok::Local(n)), Some(Tok::Eq)) = (self.peek(), self.peek_at(1)) {
            result = Some(n.clone());
            self.pos += 2;
        }
        let (line, col) = self.here();
        let opcode = match self.peek() {
            Some(Tok::Word(w)) => match Opcode::from_name(w) {
                Some(op) => op,
                None => return Err(MirError::UnknownOpcode { name: w.clone(), line, col }),
            },
            _ => return Err(self.unexpected("opcode")),
        };
        self.pos += 1;
        let mut operands = Vec::new();
        if self.at_operand() {
            operands.push(self.operand()?);
            while self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
                operands.push(self.operand()?);
            }
        }
        Ok(MirInstruction { result, opcode, operands })
    }

    /// True when the next token starts an operand rather than the next instruction.
    fn at_operand(&self) -> bool {
        match self.peek() {
            Some(Tok::Local(_)) => self.peek_at(1) != Some(&Tok::Eq),
            Some(Tok::Global(_) | Tok::Label(_) | Tok::Int(_)) => true,
            _ => false,
        }
    }

    fn operand(&mut self) -> Result<Operand, MirError> {
        let op = match self.peek() {
            Some(Tok::Local(n)) => Operand::Local(n.clone()),
            Some(Tok::Global(n)) => Operand::Global(n.clone()),
            Some(Tok::Label(n)) => Operand::Label(n.clone()),
            Some(Tok::Int(v)) => Operand::Int(*v),
            _ => return Err(self.unexpected("operand")),
        };
        self.pos += 1;
        Ok(op)
    }
}

/// Parses and validates MIR text.
pub fn parse_mir(text: &str) -> Result<MirModule, MirError> {
    parse_named(text, "")
}

pub fn parse_named(text: &str, source_name: &str) -> Result<MirModule, MirError> {
    let toks = lex(text)?;
    let lines = text.split('\n').count();
    let last_col = text.rsplit('\n').next().map_or(1, |l| l.len() + 1);
    let mut p = Parser { toks, pos: 0, eof: (lines, last_col) };
    p.module(source_name)
}

/// The outlined region function (always the first function of a module).
pub fn region_entry(module: &MirModule) -> &MirFunction {
    &module.functions[0]
}

// ---------------------------------------------------------------------------
// Synthetic region generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Doall,
    Nested,
    Reduction,
    Streaming,
    Compute,
    Branchy,
    Calls,
    Mixed,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Doall,
        Family::Nested,
        Family::Reduction,
        Family::Streaming,
        Family::Compute,
        Family::Branchy,
        Family::Calls,
        Family::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Doall => "doall",
            Family::Nested => "nested",
            Family::Reduction => "reduction",
            Family::Streaming => "streaming",
            Family::Compute => "compute",
            Family::Branchy => "branchy",
            Family::Calls => "calls",
            Family::Mixed => "mixed",
        }
    }
}

impl FromStr for Family {
    type Err = MirError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| MirError::UnknownFamily(s.to_string()))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionFamily {
    pub family: Family,
    pub size: u32,
    pub seed: u64,
}

impl RegionFamily {
    pub fn new(family: Family, size: u32, seed: u64) -> Self {
        RegionFamily { family, size, seed }
    }

    pub fn name(&self) -> String {
        format!("{}_s{}", self.family, self.size)
    }
}

struct FnBuilder {
    name: String,
    blocks: Vec<MirBlock>,
    next: usize,
}

impl FnBuilder {
    fn new(name: impl Into<String>) -> Self {
        FnBuilder { name: name.into(), blocks: Vec::new(), next: 0 }
    }

    fn block(&mut self, label: impl Into<String>) {
        self.blocks.push(MirBlock { label: label.into(), instructions: Vec::new() });
    }

    fn fresh(&mut self) -> String {
        let n = self.next.to_string();
        self.next += 1;
        n
    }

    fn push(&mut self, result: Option<String>, opcode: Opcode, operands: Vec<Operand>) {
        self.blocks
            .last_mut()
            .expect("block opened before emitting")
            .instructions
            .push(MirInstruction { result, opcode, operands });
    }

    fn value(&mut self, opcode: Opcode, operands: Vec<Operand>) -> Operand {
        let r = self.fresh();
        self.push(Some(r.clone()), opcode, operands);
        Operand::Local(r)
    }

    fn effect(&mut self, opcode: Opcode, operands: Vec<Operand>) {
        self.push(None, opcode, operands);
    }

    fn finish(self) -> MirFunction {
        MirFunction { name: self.name, blocks: self.blocks }
    }
}

fn label(l: &str) -> Operand {
    Operand::Label(l.to_string())
}

fn global(g: &str) -> Operand {
    Operand::Global(g.to_string())
}

fn int(v: i64) -> Operand {
    Operand::Int(v)
}

const ARITH: [Opcode; 4] = [Opcode::Add, Opcode::Sub, Opcode::Mul, Opcode::Div];

/// Generates one synthetic region. A pure function of `(family, size, seed)`.
///
/// Every region is a counted loop (`entry -> loop ... latch -> exit`) whose body
/// repeats a family motif `size` times. Motifs fix the instruction mix:
/// `compute` emits at least six arithmetic ops per one load/store pair,
/// `streaming` is load/store dominated, `branchy` adds one diamond (one
/// `condbr`) per unit, `calls` routes work through callee functions placed
/// after the entry function.
pub fn generate_region(region: &RegionFamily) -> Result<MirModule, MirError> {
    if region.size == 0 {
        return Err(MirError::ZeroSize);
    }
    let tag = region.family as u64 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(region.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let name = region.name();
    let mut b = FnBuilder::new(name.clone());
    let mut callees = Vec::new();

    b.block("entry");
    let scratch = b.value(Opcode::Alloca, vec![int(rng.random_range(4..64))]);
    b.effect(Opcode::Br, vec![label("loop")]);

    b.block("loop");
    let iv_name = b.fresh();
    let iv = Operand::Local(iv_name.clone());
    // Placeholder; patched below once the increment name is known.
    b.push(Some(iv_name), Opcode::Phi, Vec::new());
    let mut acc_phis: Vec<String> = Vec::new();

    let size = region.size as usize;
    let mut units: Vec<Family> = Vec::with_capacity(size);
    for _ in 0..size {
        units.push(match region.family {
            Family::Mixed => [Family::Doall, Family::Compute, Family::Branchy, Family::Streaming][rng.random_range(0..4)],
            f => f,
        });
    }

    for (u, unit) in units.iter().enumerate() {
        match unit {
            Family::Doall => {
                let src = format!("A{}", u % 3);
                let a = b.value(Opcode::Index, vec![global(&src), iv.clone()]);
                let v = b.value(Opcode::Load, vec![a]);
                let op = ARITH[rng.random_range(0..3)];
                let mut w = b.value(op, vec![v, int(rng.random_range(2..9))]);
                if rng.random_bool(0.5) {
                    w = b.value(Opcode::Add, vec![w, iv.clone()]);
                }
                let dst = b.value(Opcode::Index, vec![global("B"), iv.clone()]);
                b.effect(Opcode::Store, vec![w, dst]);
            }
            Family::Nested => {
                let head = format!("inner{u}");
                let latch = format!("inner{u}.latch");
                b.effect(Opcode::Br, vec![label(&head)]);
                b.block(head.clone());
                let j_name = b.fresh();
                let j = Operand::Local(j_name.clone());
                let phi_at = (b.blocks.len() - 1, 0);
                b.push(Some(j_name), Opcode::Phi, Vec::new());
                let row = b.value(Opcode::Mul, vec![iv.clone(), int(rng.random_range(16..128))]);
                let at = b.value(Opcode::Add, vec![row, j.clone()]);
                let addr = b.value(Opcode::Index, vec![global("M"), at]);
                let v = b.value(Opcode::Load, vec![addr.clone()]);
                let w = b.value(Opcode::Fma, vec![v, int(rng.random_range(2..5)), j.clone()]);
                b.effect(Opcode::Store, vec![w, addr]);
                b.effect(Opcode::Br, vec![label(&latch)]);
                b.block(latch.clone());
                let jn = b.value(Opcode::Add, vec![j.clone(), int(1)]);
                let c = b.value(Opcode::Cmp, vec![jn.clone(), int(rng.random_range(8..256))]);
                let after = format!("inner{u}.exit");
                b.effect(Opcode::CondBr, vec![c, label(&head), label(&after)]);
                let prev = if u == 0 { "loop".to_string() } else { format!("inner{}.exit", u - 1) };
                b.blocks[phi_at.0].instructions[phi_at.1].operands =
                    vec![int(0), label(&prev), jn, label(&latch)];
                b.block(after);
            }
            Family::Reduction => {
                let acc_name = b.fresh();
                let acc = Operand::Local(acc_name.clone());
                // accumulator phi lives in the loop header
                b.blocks[1].instructions.insert(1, MirInstruction {
                    result: Some(acc_name),
                    opcode: Opcode::Phi,
                    operands: Vec::new(),
                });
                let a = b.value(Opcode::Index, vec![global("R"), iv.clone()]);
                let v = b.value(Opcode::Load, vec![a]);
                let sq = if rng.random_bool(0.5) {
                    b.value(Opcode::Mul, vec![v.clone(), v])
                } else {
                    b.value(Opcode::Fma, vec![v.clone(), int(rng.random_range(2..7)), int(1)])
                };
                let next = b.value(Opcode::Add, vec![acc, sq]);
                let Operand::Local(next_name) = next else { unreachable!() };
                acc_phis.push(next_name);
            }
            Family::Streaming => {
                let a = b.value(Opcode::Index, vec![global("S"), iv.clone()]);
                let x = b.value(Opcode::Load, vec![a.clone()]);
                let c = b.value(Opcode::Index, vec![global("T"), iv.clone()]);
                let y = b.value(Opcode::Load, vec![c.clone()]);
                let s = b.value(Opcode::Add, vec![x.clone(), y]);
                b.effect(Opcode::Store, vec![s, a.clone()]);
                b.effect(Opcode::Store, vec![x.clone(), c]);
                for k in 0..rng.random_range(1..3) {
                    let extra = b.value(Opcode::Load, vec![global(&format!("U{k}"))]);
                    b.effect(Opcode::Store, vec![extra, a.clone()]);
                }
            }
            Family::Compute => {
                let a = b.value(Opcode::Index, vec![global("X"), iv.clone()]);
                let mut v = b.value(Opcode::Load, vec![a.clone()]);
                let chain = 6 + rng.random_range(0..4);
                for _ in 0..chain {
                    v = match rng.random_range(0..5) {
                        0 => b.value(Opcode::Fma, vec![v.clone(), v, int(rng.random_range(1..9))]),
                        k => b.value(ARITH[k - 1], vec![v, int(rng.random_range(2..17))]),
                    };
                }
                b.effect(Opcode::Store, vec![v, a]);
            }
            Family::Branchy => {
                let (then_l, else_l, join_l) = (format!("then{u}"), format!("else{u}"), format!("join{u}"));
                let a = b.value(Opcode::Index, vec![global("D"), iv.clone()]);
                let v = b.value(Opcode::Load, vec![a.clone()]);
                let c = b.value(Opcode::Cmp, vec![v.clone(), int(rng.random_range(0..100))]);
                b.effect(Opcode::CondBr, vec![c, label(&then_l), label(&else_l)]);
                b.block(then_l.clone());
                let x = b.value(Opcode::Mul, vec![v.clone(), int(rng.random_range(2..9))]);
                b.effect(Opcode::Br, vec![label(&join_l)]);
                b.block(else_l.clone());
                let y = b.value(Opcode::Sub, vec![v, int(rng.random_range(1..9))]);
                b.effect(Opcode::Br, vec![label(&join_l)]);
                b.block(join_l);
                let z = b.value(Opcode::Phi, vec![x, label(&then_l), y, label(&else_l)]);
                b.effect(Opcode::Store, vec![z, a]);
            }
            Family::Calls => {
                let callee = format!("{name}.f{}", u % 3);
                if u < 3 {
                    callees.push(callee_function(&callee, &mut rng));
                }
                let a = b.value(Opcode::Index, vec![global("C"), iv.clone()]);
                let v = b.value(Opcode::Load, vec![a.clone()]);
                let r = b.value(Opcode::Call, vec![global(&callee), v]);
                b.effect(Opcode::Store, vec![r, a]);
            }
            Family::Mixed => unreachable!("mixed units are resolved above"),
        }
    }

    b.effect(Opcode::Br, vec![label("latch")]);
    b.block("latch");
    let next = b.value(Opcode::Add, vec![iv.clone(), int(1)]);
    let trip = rng.random_range(64..4096);
    let c = b.value(Opcode::Cmp, vec![next.clone(), int(trip)]);
    b.effect(Opcode::CondBr, vec![c, label("loop"), label("exit")]);
    b.blocks[1].instructions[0].operands = vec![int(0), label("entry"), next, label("latch")];
    // Accumulator phis were inserted at the head of the loop block, newest first.
    let n = acc_phis.len();
    b.blocks[1].instructions[1..1 + n].reverse();
    for (slot, next_name) in acc_phis.iter().enumerate() {
        b.blocks[1].instructions[1 + slot].operands =
            vec![int(0), label("entry"), Operand::Local(next_name.clone()), label("latch")];
    }

    b.block("exit");
    for next_name in &acc_phis {
        b.effect(Opcode::Store, vec![Operand::Local(next_name.clone()), global("out")]);
    }
    let v = b.value(Opcode::Load, vec![scratch]);
    b.effect(Opcode::Ret, vec![v]);

    let mut functions = vec![b.finish()];
    functions.extend(callees);
    MirModule::new(name, functions)
}

fn callee_function(name: &str, rng: &mut ChaCha8Rng) -> MirFunction {
    let mut f = FnBuilder::new(name);
    f.block("entry");
    let p = f.value(Opcode::Load, vec![global("P")]);
    let mut v = f.value(Opcode::Mul, vec![p, int(rng.random_range(2..9))]);
    for _ in 0..rng.random_range(1..4) {
        v = f.value(ARITH[rng.random_range(0..4)], vec![v, int(rng.random_range(1..9))]);
    }
    f.effect(Opcode::Ret, vec![v]);
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOALL: &str = include_str!("../fixtures/doall.mir");

    fn opcodes(m: &MirModule) -> Vec<Opcode> {
        m.instructions().map(|i| i.opcode).collect()
    }

    #[test]
    fn minimal_program() {
        let m = parse_mir("func @r { block %e: ret }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert_eq!(m.functions[0].instruction_count(), 1);
    }

    #[test]
    fn double_definition_is_ssa_error() {
        let err = parse_mir("func @r { block %e: %0 = add 1, 2\n %0 = mul %0, 3\n ret }").unwrap_err();
        match err {
            MirError::Ssa { name, .. } => assert_eq!(name, "0"),
            other => panic!("expected SSA error, got {other:?}"),
        }
        assert!(err_text("func @r { block %e: %0 = add 1, 2\n %0 = mul %0, 3\n ret }").contains("%0"));
    }

    fn err_text(src: &str) -> String {
        parse_mir(src).unwrap_err().to_string()
    }

    #[test]
    fn doall_fixture_opcodes() {
        let m = parse_mir(DOALL).unwrap();
        use Opcode::*;
        assert_eq!(opcodes(&m), vec![Load, Mul, Add, Store, Add, Cmp, CondBr]);
    }

    #[test]
    fn diagnostics_name_the_token() {
        let e = parse_mir("func @r { block %e: %0 = frob 1\n ret }").unwrap_err();
        assert!(matches!(&e, MirError::UnknownOpcode { name, line: 1, col: 26 } if name == "frob"), "{e:?}");
        let e = parse_mir("func @r { block %e: br %%nowhere }").unwrap_err();
        assert!(e.to_string().contains("%%nowhere"), "{e}");
        let e = parse_mir("func @r { block %e: ret %1 }").unwrap_err();
        assert!(e.to_string().contains("%1"), "{e}");
        let e = parse_mir("func @r { block %e: ret ").unwrap_err();
        assert!(matches!(e, MirError::Syntax { .. }));
        let e = parse_mir("func @r {\n block %e:\n  %0 = add 1 2\n ret }").unwrap_err();
        assert!(matches!(e, MirError::Syntax { line: 3, .. }), "{e:?}");
        let e = parse_mir("").unwrap_err();
        assert!(matches!(e, MirError::Syntax { .. }));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(parse_mir("func @r { block %e: %0 = add 1, 2 }"), Err(MirError::Structure { .. })));
        assert!(matches!(parse_mir("func @r { block %e: ret\n ret }"), Err(MirError::Structure { .. })));
        assert!(matches!(parse_mir("func @r { block %e: store 1 ret }"), Err(MirError::Arity { .. })));
        assert!(matches!(parse_mir("func @r { block %e: %0 = store 1, @a\n ret }"), Err(MirError::Arity { .. })));
        assert!(matches!(parse_mir("func @r { block %e: ret } func @r { block %e: ret }"), Err(MirError::Structure { .. })));
        assert!(matches!(parse_mir("func @r { block %e: ret\n block %dead: ret }"), Err(MirError::Structure { .. })));
        assert!(matches!(parse_mir("func @r { block %e: br %%e }"), Err(MirError::Structure { .. })));
        assert!(matches!(parse_mir("func @r { block %e: ret } func @g { block %e: ret }"), Err(MirError::Structure { .. })));
    }

    #[test]
    fn entry_is_first_function() {
        let m = parse_mir("func @only { block %e: ret }").unwrap();
        assert_eq!(region_entry(&m).name, "only");
        let m = parse_mir("func @kernel { block %e: %0 = call @helper\n ret %0 }\nfunc @helper { block %b: ret 1 }").unwrap();
        assert_eq!(region_entry(&m).name, "kernel");
        let m = generate_region(&RegionFamily::new(Family::Calls, 2, 3)).unwrap();
        assert!(m.functions.len() > 1);
        let entry = region_entry(&m);
        assert!(entry.instructions().any(|i| i.opcode == Opcode::Call));
        assert_eq!(entry.name, "calls_s2");
    }

    #[test]
    fn generation_is_deterministic() {
        let r = RegionFamily::new(Family::Doall, 1, 7);
        assert_eq!(generate_region(&r).unwrap().to_text(), generate_region(&r).unwrap().to_text());
    }

    #[test]
    fn compute_family_is_arithmetic_heavy() {
        let m = generate_region(&RegionFamily::new(Family::Compute, 4, 1)).unwrap();
        let count = |ops: &[Opcode]| m.instructions().filter(|i| ops.contains(&i.opcode)).count();
        let arith = count(&[Opcode::Add, Opcode::Sub, Opcode::Mul, Opcode::Div, Opcode::Fma]);
        let mem = count(&[Opcode::Load, Opcode::Store]);
        assert!(arith > 2 * mem, "arith={arith} mem={mem}");
    }

    #[test]
    fn branchy_family_has_condbr_per_unit() {
        let m = generate_region(&RegionFamily::new(Family::Branchy, 4, 1)).unwrap();
        let condbr = m.instructions().filter(|i| i.opcode == Opcode::CondBr).count();
        assert!(condbr >= 4, "{condbr}");
    }

    #[test]
    fn bad_family_and_size() {
        assert_eq!("bogus".parse::<Family>(), Err(MirError::UnknownFamily("bogus".into())));
        assert_eq!(generate_region(&RegionFamily::new(Family::Doall, 0, 1)), Err(MirError::ZeroSize));
    }

    #[test]
    fn negative_literals_round_trip() {
        let m = parse_mir("func @r { block %e: %x = add -3, 4\n ret %x }").unwrap();
        assert_eq!(parse_mir(&m.to_text()).unwrap(), m);
    }
}
