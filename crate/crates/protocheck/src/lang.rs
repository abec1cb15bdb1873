//! Surface syntax for protocol descriptions.
//!
//! A protocol file declares constants, shared integer variables, mutexes,
//! condition variables, invariants and thread programs. Thread bodies are
//! lists of guarded commands, one per line:
//!
//! ```text
//! const learners = 1
//! var pushCnt[learners] = 0
//! mutex pushMtx[learners]
//! cond pushEmpty[learners]
//! invariant binary: forall l: pushCnt[l] >= 0 && pushCnt[l] <= 1
//!
//! thread train[learners]
//!   reg k = 0
//! top:
//!   lock pushMtx[self]                      @104
//!   if pushCnt[self] == 0 goto free         @105
//!   wait pushEmpty[self] pushMtx[self]      @106
//!   ...
//! end
//! ```
//!
//! A trailing `@NNN` tags a statement with a site number that is echoed in
//! counterexample traces and shared with the runtime engine's instrumentation.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Mul,
    Div,
    Rem,
    Add,
    Sub,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne => 3,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 4,
            BinOp::Add | BinOp::Sub => 5,
            BinOp::Mul | BinOp::Div | BinOp::Rem => 6,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Num(i64),
    Name(String),
    Index(String, Box<Expr>),
    Sum(String),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Name(n) => write!(f, "{n}"),
            Expr::Index(n, i) => write!(f, "{n}[{i}]"),
            Expr::Sum(n) => write!(f, "sum({n})"),
            Expr::Unary(UnOp::Neg, e) => write!(f, "-{e}"),
            Expr::Unary(UnOp::Not, e) => write!(f, "!{e}"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

/// A reference to one element of a declared array (or a scalar when
/// `index` is absent).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ref {
    pub name: String,
    pub index: Option<Expr>,
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.index {
            Some(i) => write!(f, "{}[{}]", self.name, i),
            None => write!(f, "{}", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StmtKind {
    Lock(Ref),
    Unlock(Ref),
    Wait { cond: Ref, mutex: Ref },
    Signal(Ref),
    Broadcast(Ref),
    Await(Expr),
    If(Expr, String),
    Goto(String),
    Assign(Ref, Expr),
    Produce(Expr),
    Consume(Expr),
    Assert(Expr),
    Halt,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub site: Option<u16>,
    pub line: usize,
    /// Source text without label, comment or site tag.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstDecl {
    pub name: String,
    pub value: Expr,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDecl {
    pub name: String,
    pub size: Option<Expr>,
    pub init: i64,
    pub access: Option<AccessDecl>,
    pub line: usize,
}

/// Declared access discipline of a variable, checked during exploration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessDecl {
    /// `guarded_by m`: every access holds the matching element of `m`.
    GuardedBy(String),
    /// `writes_guarded_by m`: writes hold the matching element of `m`,
    /// reads may be unsynchronized.
    WritesGuardedBy(String),
    /// `owned_by t`: element `i` is only touched by thread instance `t[i]`.
    OwnedBy(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncDecl {
    pub name: String,
    pub size: Option<Expr>,
    /// For conditions: `guarded_by m`, the mutex every wait and signal holds.
    pub guard: Option<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantDecl {
    pub name: String,
    /// Bound variable of a `forall v:` prefix; ranges over `0..learners`.
    pub forall: Option<String>,
    pub expr: Expr,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadDecl {
    pub name: String,
    pub count: Option<Expr>,
    pub regs: Vec<(String, i64)>,
    pub body: Vec<Stmt>,
    pub labels: HashMap<String, usize>,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub consts: Vec<ConstDecl>,
    pub tokens: Option<Expr>,
    pub vars: Vec<VarDecl>,
    pub mutexes: Vec<SyncDecl>,
    pub conds: Vec<SyncDecl>,
    pub invariants: Vec<InvariantDecl>,
    pub threads: Vec<ThreadDecl>,
}

impl Program {
    pub fn parse(src: &str) -> Result<Program, ParseError> {
        Parser::new(src).program()
    }

    /// Returns the site-tagged statements of every thread as
    /// `(thread, site, text)` triples in source order.
    pub fn sites(&self) -> Vec<(&str, u16, &str)> {
        self.threads
            .iter()
            .flat_map(|t| {
                t.body
                    .iter()
                    .filter_map(move |s| s.site.map(|site| (t.name.as_str(), site, s.text.as_str())))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(i64),
    Sym(&'static str),
}

fn lex(line: &str, lineno: usize) -> Result<Vec<Tok>, ParseError> {
    const SYMS: [&str; 21] = [
        ":=", "<=", ">=", "==", "!=", "&&", "||", "<", ">", "+", "-", "*", "/", "%", "(", ")",
        "[", "]", ":", "!", "=",
    ];
    let mut out = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                i += 1;
            }
            let n = line[start..i]
                .parse()
                .map_err(|_| ParseError::new(lineno, format!("bad number `{}`", &line[start..i])))?;
            out.push(Tok::Num(n));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Ident(line[start..i].to_string()));
        } else if let Some(sym) = SYMS.iter().find(|s| line[i..].starts_with(**s)) {
            out.push(Tok::Sym(sym));
            i += sym.len();
        } else {
            return Err(ParseError::new(lineno, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Toks {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Toks {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, msg)
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            other => Err(self.err(format!("expected identifier, found {other:?}"))),
        }
    }

    fn sym(&mut self, s: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(Tok::Sym(x)) if x == s => Ok(()),
            other => Err(self.err(format!("expected `{s}`, found {other:?}"))),
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) if s == kw => Ok(()),
            other => Err(self.err(format!("expected `{kw}`, found {other:?}"))),
        }
    }

    fn done(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(self.err(format!("unexpected trailing token {t:?}"))),
        }
    }

    fn integer(&mut self) -> Result<i64, ParseError> {
        let neg = self.eat_sym("-");
        match self.next() {
            Some(Tok::Num(n)) => Ok(if neg { -n } else { n }),
            other => Err(self.err(format!("expected integer, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary(0)
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym(s)) => match *s {
                    "*" => BinOp::Mul,
                    "/" => BinOp::Div,
                    "%" => BinOp::Rem,
                    "+" => BinOp::Add,
                    "-" => BinOp::Sub,
                    "<" => BinOp::Lt,
                    "<=" => BinOp::Le,
                    ">" => BinOp::Gt,
                    ">=" => BinOp::Ge,
                    "==" => BinOp::Eq,
                    "!=" => BinOp::Ne,
                    "&&" => BinOp::And,
                    "||" => BinOp::Or,
                    _ => break,
                },
                _ => break,
            };
            if op.precedence() <= min_prec {
                break;
            }
            self.pos += 1;
            let rhs = self.binary(op.precedence())?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_sym("-") {
            return Ok(Expr::Unary(UnOp::Neg, Box::new(self.unary()?)));
        }
        if self.eat_sym("!") {
            return Ok(Expr::Unary(UnOp::Not, Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(Expr::Num(n)),
            Some(Tok::Sym("(")) => {
                let e = self.expr()?;
                self.sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) if name == "sum" && self.eat_sym("(") => {
                let arr = self.ident()?;
                self.sym(")")?;
                Ok(Expr::Sum(arr))
            }
            Some(Tok::Ident(name)) => {
                if self.eat_sym("[") {
                    let idx = self.expr()?;
                    self.sym("]")?;
                    Ok(Expr::Index(name, Box::new(idx)))
                } else {
                    Ok(Expr::Name(name))
                }
            }
            other => Err(self.err(format!("expected expression, found {other:?}"))),
        }
    }

    fn reference(&mut self) -> Result<Ref, ParseError> {
        let name = self.ident()?;
        let index = if self.eat_sym("[") {
            let e = self.expr()?;
            self.sym("]")?;
            Some(e)
        } else {
            None
        };
        Ok(Ref { name, index })
    }

    fn opt_size(&mut self) -> Result<Option<Expr>, ParseError> {
        if self.eat_sym("[") {
            let e = self.expr()?;
            self.sym("]")?;
            Ok(Some(e))
        } else {
            Ok(None)
        }
    }
}

// ---------------------------------------------------------------------------
// parser

struct Parser<'a> {
    lines: Vec<(usize, &'a str, Option<u16>)>,
}

/// Strips comments and the trailing site tag.
fn split_line(raw: &str, lineno: usize) -> Result<(&str, Option<u16>), ParseError> {
    let code = match raw.find('#') {
        Some(i) => &raw[..i],
        None => raw,
    };
    match code.rfind('@') {
        Some(i) => {
            let tag = code[i + 1..].trim();
            let site = tag
                .parse::<u16>()
                .map_err(|_| ParseError::new(lineno, format!("bad site tag `@{tag}`")))?;
            Ok((code[..i].trim(), Some(site)))
        }
        None => Ok((code.trim(), None)),
    }
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        let lines = src
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l, None))
            .collect();
        Parser { lines }
    }

    fn program(mut self) -> Result<Program, ParseError> {
        let mut prog = Program::default();
        let mut cleaned = Vec::with_capacity(self.lines.len());
        for &(no, raw, _) in &self.lines {
            let (code, site) = split_line(raw, no)?;
            if !code.is_empty() {
                cleaned.push((no, code, site));
            } else if site.is_some() {
                return Err(ParseError::new(no, "site tag without a statement"));
            }
        }
        self.lines = cleaned;

        let mut i = 0;
        while i < self.lines.len() {
            let (no, code, site) = self.lines[i];
            let mut t = Toks {
                toks: lex(code, no)?,
                pos: 0,
                line: no,
            };
            if site.is_some() {
                return Err(t.err("site tags are only allowed on thread statements"));
            }
            let kw = t.ident()?;
            match kw.as_str() {
                "const" => {
                    let name = t.ident()?;
                    t.sym("=")?;
                    let value = t.expr()?;
                    t.done()?;
                    prog.consts.push(ConstDecl { name, value, line: no });
                }
                "tokens" => {
                    if prog.tokens.is_some() {
                        return Err(t.err("duplicate `tokens` declaration"));
                    }
                    let e = t.expr()?;
                    t.done()?;
                    prog.tokens = Some(e);
                }
                "var" => {
                    let name = t.ident()?;
                    let size = t.opt_size()?;
                    let init = if t.eat_sym("=") { t.integer()? } else { 0 };
                    let access = match t.peek() {
                        None => None,
                        Some(_) => {
                            let kw = t.ident()?;
                            let target = t.ident()?;
                            Some(match kw.as_str() {
                                "guarded_by" => AccessDecl::GuardedBy(target),
                                "writes_guarded_by" => AccessDecl::WritesGuardedBy(target),
                                "owned_by" => AccessDecl::OwnedBy(target),
                                other => return Err(t.err(format!("unknown access annotation `{other}`"))),
                            })
                        }
                    };
                    t.done()?;
                    prog.vars.push(VarDecl {
                        name,
                        size,
                        init,
                        access,
                        line: no,
                    });
                }
                "mutex" | "cond" => {
                    let name = t.ident()?;
                    let size = t.opt_size()?;
                    let guard = if kw == "cond" && matches!(t.peek(), Some(Tok::Ident(s)) if s == "guarded_by") {
                        t.pos += 1;
                        Some(t.ident()?)
                    } else {
                        None
                    };
                    t.done()?;
                    let d = SyncDecl {
                        name,
                        size,
                        guard,
                        line: no,
                    };
                    if kw == "mutex" {
                        prog.mutexes.push(d);
                    } else {
                        prog.conds.push(d);
                    }
                }
                "invariant" => {
                    let name = t.ident()?;
                    t.sym(":")?;
                    let forall = if matches!(t.peek(), Some(Tok::Ident(s)) if s == "forall") {
                        t.pos += 1;
                        let v = t.ident()?;
                        t.sym(":")?;
                        Some(v)
                    } else {
                        None
                    };
                    let expr = t.expr()?;
                    t.done()?;
                    prog.invariants.push(InvariantDecl {
                        name,
                        forall,
                        expr,
                        line: no,
                    });
                }
                "thread" => {
                    let name = t.ident()?;
                    let count = t.opt_size()?;
                    t.done()?;
                    let (thread, next) = self.thread_body(i + 1, name, count, no)?;
                    prog.threads.push(thread);
                    i = next;
                    continue;
                }
                other => return Err(t.err(format!("unknown declaration `{other}`"))),
            }
            i += 1;
        }
        if prog.threads.is_empty() {
            let last = self.lines.last().map_or(1, |l| l.0);
            return Err(ParseError::new(last, "protocol declares no threads"));
        }
        Ok(prog)
    }

    fn thread_body(
        &self,
        mut i: usize,
        name: String,
        count: Option<Expr>,
        header_line: usize,
    ) -> Result<(ThreadDecl, usize), ParseError> {
        let mut thread = ThreadDecl {
            name,
            count,
            regs: Vec::new(),
            body: Vec::new(),
            labels: HashMap::new(),
            line: header_line,
        };
        while i < self.lines.len() {
            let (no, code, site) = self.lines[i];
            i += 1;
            let mut rest = code;
            // Labels: `name:` prefixes (but not `:=`).
            while let Some(colon) = rest.find(':') {
                if rest[colon..].starts_with(":=") {
                    break;
                }
                let label = rest[..colon].trim();
                if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    break;
                }
                if thread
                    .labels
                    .insert(label.to_string(), thread.body.len())
                    .is_some()
                {
                    return Err(ParseError::new(no, format!("duplicate label `{label}`")));
                }
                rest = rest[colon + 1..].trim();
            }
            if rest.is_empty() {
                if site.is_some() {
                    return Err(ParseError::new(no, "site tag on a bare label"));
                }
                continue;
            }
            let mut t = Toks {
                toks: lex(rest, no)?,
                pos: 0,
                line: no,
            };
            let first = match t.peek() {
                Some(Tok::Ident(s)) => s.clone(),
                _ => return Err(t.err("expected a statement")),
            };
            if first == "end" && t.toks.len() == 1 {
                return self.finish_thread(thread, i);
            }
            if first == "reg" {
                t.pos += 1;
                if !thread.body.is_empty() {
                    return Err(t.err("`reg` declarations must precede statements"));
                }
                let r = t.ident()?;
                let init = if t.eat_sym("=") { t.integer()? } else { 0 };
                t.done()?;
                thread.regs.push((r, init));
                continue;
            }
            let kind = statement(&mut t)?;
            thread.body.push(Stmt {
                kind,
                site,
                line: no,
                text: rest.to_string(),
            });
        }
        Err(ParseError::new(
            header_line,
            format!("thread `{}` is missing its `end`", thread.name),
        ))
    }

    fn finish_thread(&self, thread: ThreadDecl, next: usize) -> Result<(ThreadDecl, usize), ParseError> {
        for s in &thread.body {
            let target = match &s.kind {
                StmtKind::If(_, l) | StmtKind::Goto(l) => l,
                _ => continue,
            };
            if !thread.labels.contains_key(target) {
                return Err(ParseError::new(s.line, format!("unknown label `{target}`")));
            }
        }
        Ok((thread, next))
    }
}

fn statement(t: &mut Toks) -> Result<StmtKind, ParseError> {
    // Assignment is the only form whose first identifier is not a keyword.
    if t.toks.contains(&Tok::Sym(":=")) {
        let target = t.reference()?;
        t.sym(":=")?;
        let e = t.expr()?;
        t.done()?;
        return Ok(StmtKind::Assign(target, e));
    }
    let kw = t.ident()?;
    let kind = match kw.as_str() {
        "lock" => StmtKind::Lock(t.reference()?),
        "unlock" => StmtKind::Unlock(t.reference()?),
        "wait" => {
            let cond = t.reference()?;
            let mutex = t.reference()?;
            StmtKind::Wait { cond, mutex }
        }
        "signal" => StmtKind::Signal(t.reference()?),
        "broadcast" => StmtKind::Broadcast(t.reference()?),
        "await" => StmtKind::Await(t.expr()?),
        "if" => {
            let e = t.expr()?;
            t.keyword("goto")?;
            StmtKind::If(e, t.ident()?)
        }
        "goto" => StmtKind::Goto(t.ident()?),
        "produce" => StmtKind::Produce(t.expr()?),
        "consume" => StmtKind::Consume(t.expr()?),
        "assert" => StmtKind::Assert(t.expr()?),
        "halt" => StmtKind::Halt,
        "skip" => StmtKind::Skip,
        other => return Err(t.err(format!("unknown statement `{other}`"))),
    };
    t.done()?;
    Ok(kind)
}
