//! Compiled protocol models.
//!
//! [`Model::build`] resolves names, folds constants, instantiates thread
//! templates (`thread push[learners]` becomes `push[0]`, `push[1]`, ...) and
//! fixes the flat layout of [`State`].

use std::collections::HashMap;
use std::fmt;

pub(crate) type Cells = smallvec::SmallVec<[usize; 8]>;

use thiserror::Error;

use crate::lang::{AccessDecl, BinOp, Expr, ParseError, Program, Ref, Stmt, StmtKind, UnOp};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("line {line}: {message}")]
    Resolve { line: usize, message: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

fn resolve_err(line: usize, message: impl Into<String>) -> ModelError {
    ModelError::Resolve {
        line,
        message: message.into(),
    }
}

/// Thread status codes stored in the state vector.
pub(crate) const RUNNING: i16 = 0;
pub(crate) const WAITING: i16 = 1;
pub(crate) const REACQUIRING: i16 = 2;
pub(crate) const DONE: i16 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ArrayInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub scalar: bool,
}

/// Resolved access discipline of a variable array. Mutex and thread
/// references are array indices into `Model::mutexes` / `Model::templates`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Access {
    Shared,
    Guarded(usize),
    WriteGuarded(usize),
    Owned(usize),
}

#[derive(Debug, Clone)]
pub(crate) enum CExpr {
    Const(i64),
    Reg(usize),
    SelfId,
    Bound,
    Var(usize),
    VarAt { base: usize, len: usize, idx: Box<CExpr> },
    Sum { base: usize, len: usize },
    Un(UnOp, Box<CExpr>),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
}

impl CExpr {
    /// True when evaluation never touches shared variables.
    pub fn is_local(&self) -> bool {
        match self {
            CExpr::Const(_) | CExpr::Reg(_) | CExpr::SelfId | CExpr::Bound => true,
            CExpr::Var(_) | CExpr::VarAt { .. } | CExpr::Sum { .. } => false,
            CExpr::Un(_, e) => e.is_local(),
            CExpr::Bin(_, a, b) => a.is_local() && b.is_local(),
        }
    }

    /// True when the value depends only on constants and `self`.
    pub fn is_static(&self) -> bool {
        match self {
            CExpr::Const(_) | CExpr::SelfId => true,
            CExpr::Reg(_) | CExpr::Bound | CExpr::Var(_) | CExpr::VarAt { .. } | CExpr::Sum { .. } => false,
            CExpr::Un(_, e) => e.is_static(),
            CExpr::Bin(_, a, b) => a.is_static() && b.is_static(),
        }
    }

}

#[derive(Debug, Clone)]
pub(crate) struct CRef {
    pub base: usize,
    pub len: usize,
    pub idx: CExpr,
}

#[derive(Debug, Clone)]
pub(crate) enum Instr {
    Lock(CRef),
    Unlock(CRef),
    Wait { cond: CRef, mutex: CRef },
    Signal(CRef),
    Broadcast(CRef),
    Await(CExpr),
    Jump { cond: Option<CExpr>, target: usize },
    SetReg(usize, CExpr),
    SetVar(CRef, CExpr),
    Produce(CExpr),
    Consume(CExpr),
    Assert(CExpr),
    Halt,
    Skip,
}

impl Instr {
    /// Local instructions touch only thread-private state and are folded
    /// into the preceding visible step during exploration.
    pub fn is_local(&self) -> bool {
        match self {
            Instr::Jump { cond, .. } => cond.as_ref().is_none_or(CExpr::is_local),
            Instr::SetReg(_, e) => e.is_local(),
            Instr::Skip | Instr::Halt => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Template {
    pub name: String,
    pub regs: Vec<String>,
    pub reg_init: Vec<i64>,
    pub code: Vec<Instr>,
    /// Source statement per instruction; the implicit trailing halt has none.
    pub stmts: Vec<Option<Stmt>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Instance {
    pub template: usize,
    pub self_id: i64,
    pub name: String,
    /// Offset of this thread's `[pc, status, arg, regs...]` block.
    pub base: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CInvariant {
    pub name: String,
    pub forall: bool,
    pub expr: CExpr,
}

/// A thread-instance identifier: index into [`Model::thread_names`].
pub type ThreadId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadStatus {
    Running,
    Waiting,
    Reacquiring,
    Done,
}

/// Flat, hashable protocol state: shared variables, mutex owners, per-thread
/// control blocks and the produced/consumed token counts.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct State(pub(crate) Box<[i16]>);

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "State{:?}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) consts: HashMap<String, i64>,
    pub(crate) vars: Vec<ArrayInfo>,
    pub(crate) var_init: Vec<i16>,
    pub(crate) mutexes: Vec<ArrayInfo>,
    pub(crate) conds: Vec<ArrayInfo>,
    pub(crate) tokens: usize,
    pub(crate) templates: Vec<Template>,
    pub(crate) threads: Vec<Instance>,
    pub(crate) invariants: Vec<CInvariant>,
    /// Per variable array.
    pub(crate) access: Vec<Access>,
    /// Per variable cell: index of its array in `vars`.
    pub(crate) cell_array: Vec<u16>,
    /// Per condition array: index of its guarding mutex array.
    pub(crate) cond_guard: Vec<Option<usize>>,
    pub(crate) learners: i64,
    pub(crate) mutex_off: usize,
    /// First condition id in the object space used for footprints: variable
    /// cells, then mutexes (both at their state offsets), then conditions.
    pub(crate) cond_obj: usize,
    pub(crate) prod_off: usize,
    pub(crate) cons_off: usize,
    pub(crate) state_len: usize,
}

#[derive(Debug)]
pub(crate) struct EvalError(pub String);

pub(crate) struct Ctx<'a> {
    pub state: &'a [i16],
    pub regs: &'a [i16],
    pub self_id: i64,
    pub bound: i64,
}

impl Ctx<'_> {
    pub fn eval(&self, e: &CExpr) -> Result<i64, EvalError> {
        Ok(match e {
            CExpr::Const(c) => *c,
            CExpr::Reg(r) => self.regs[*r] as i64,
            CExpr::SelfId => self.self_id,
            CExpr::Bound => self.bound,
            CExpr::Var(o) => self.state[*o] as i64,
            CExpr::VarAt { base, len, idx } => {
                let i = self.eval(idx)?;
                if i < 0 || i as usize >= *len {
                    return Err(EvalError(format!("index {i} out of bounds (length {len})")));
                }
                self.state[base + i as usize] as i64
            }
            CExpr::Sum { base, len } => self.state[*base..base + len].iter().map(|&v| v as i64).sum(),
            CExpr::Un(UnOp::Neg, a) => -self.eval(a)?,
            CExpr::Un(UnOp::Not, a) => (self.eval(a)? == 0) as i64,
            CExpr::Bin(op, a, b) => {
                let x = self.eval(a)?;
                // Short-circuit so guards like `i < n && a[i] == 0` stay in bounds.
                match op {
                    BinOp::And if x == 0 => return Ok(0),
                    BinOp::Or if x != 0 => return Ok(1),
                    _ => {}
                }
                let y = self.eval(b)?;
                binop(*op, x, y)?
            }
        })
    }

    /// Collects the variable cells `e` reads, following the same
    /// short-circuit rules as [`Ctx::eval`].
    pub fn reads(&self, e: &CExpr, out: &mut Cells) -> Result<(), EvalError> {
        match e {
            CExpr::Var(o) => out.push(*o),
            CExpr::VarAt { base, idx, .. } => {
                self.reads(idx, out)?;
                let i = self.eval(idx)?;
                out.push(base + i as usize);
            }
            CExpr::Sum { base, len } => out.extend(*base..base + len),
            CExpr::Un(_, a) => self.reads(a, out)?,
            CExpr::Bin(op, a, b) => {
                self.reads(a, out)?;
                let x = self.eval(a)?;
                let skip = matches!(op, BinOp::And if x == 0) || matches!(op, BinOp::Or if x != 0);
                if !skip {
                    self.reads(b, out)?;
                }
            }
            CExpr::Const(_) | CExpr::Reg(_) | CExpr::SelfId | CExpr::Bound => {}
        }
        Ok(())
    }

    pub fn index(&self, r: &CRef) -> Result<usize, EvalError> {
        let i = self.eval(&r.idx)?;
        if i < 0 || i as usize >= r.len {
            return Err(EvalError(format!("index {i} out of bounds (length {})", r.len)));
        }
        Ok(r.base + i as usize)
    }
}

fn binop(op: BinOp, x: i64, y: i64) -> Result<i64, EvalError> {
    Ok(match op {
        BinOp::Mul => x * y,
        BinOp::Div | BinOp::Rem if y == 0 => return Err(EvalError("division by zero".into())),
        BinOp::Div => x.div_euclid(y),
        BinOp::Rem => x.rem_euclid(y),
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Lt => (x < y) as i64,
        BinOp::Le => (x <= y) as i64,
        BinOp::Gt => (x > y) as i64,
        BinOp::Ge => (x >= y) as i64,
        BinOp::Eq => (x == y) as i64,
        BinOp::Ne => (x != y) as i64,
        BinOp::And => (x != 0 && y != 0) as i64,
        BinOp::Or => (x != 0 || y != 0) as i64,
    })
}

struct Scope<'a> {
    model: &'a Model,
    regs: &'a [String],
    bound: Option<&'a str>,
    in_thread: bool,
    line: usize,
}

impl Scope<'_> {
    fn array<'m>(&self, list: &'m [ArrayInfo], name: &str, what: &str) -> Result<&'m ArrayInfo, ModelError> {
        list.iter()
            .find(|a| a.name == name)
            .ok_or_else(|| resolve_err(self.line, format!("unknown {what} `{name}`")))
    }

    fn expr(&self, e: &Expr) -> Result<CExpr, ModelError> {
        let c = match e {
            Expr::Num(n) => CExpr::Const(*n),
            Expr::Name(n) => {
                if let Some(r) = self.regs.iter().position(|x| x == n) {
                    CExpr::Reg(r)
                } else if n == "self" {
                    if !self.in_thread {
                        return Err(resolve_err(self.line, "`self` outside a thread"));
                    }
                    CExpr::SelfId
                } else if Some(n.as_str()) == self.bound {
                    CExpr::Bound
                } else if let Some(v) = self.model.consts.get(n) {
                    CExpr::Const(*v)
                } else {
                    let a = self.array(&self.model.vars, n, "name")?;
                    if !a.scalar {
                        return Err(resolve_err(self.line, format!("array `{n}` used without an index")));
                    }
                    CExpr::Var(a.offset)
                }
            }
            Expr::Index(n, i) => {
                let a = self.array(&self.model.vars, n, "variable")?;
                CExpr::VarAt {
                    base: a.offset,
                    len: a.len,
                    idx: Box::new(self.expr(i)?),
                }
            }
            Expr::Sum(n) => {
                let a = self.array(&self.model.vars, n, "variable")?;
                CExpr::Sum {
                    base: a.offset,
                    len: a.len,
                }
            }
            Expr::Unary(op, a) => CExpr::Un(*op, Box::new(self.expr(a)?)),
            Expr::Binary(op, a, b) => CExpr::Bin(*op, Box::new(self.expr(a)?), Box::new(self.expr(b)?)),
        };
        Ok(fold(c))
    }

    fn reference(&self, list: &[ArrayInfo], r: &Ref, what: &str) -> Result<CRef, ModelError> {
        let a = self.array(list, &r.name, what)?;
        let idx = match &r.index {
            Some(i) => self.expr(i)?,
            None if a.scalar => CExpr::Const(0),
            None => return Err(resolve_err(self.line, format!("array `{}` used without an index", r.name))),
        };
        Ok(CRef {
            base: a.offset,
            len: a.len,
            idx,
        })
    }
}

fn fold(e: CExpr) -> CExpr {
    match e {
        CExpr::Un(op, a) => match *a {
            CExpr::Const(x) => CExpr::Const(match op {
                UnOp::Neg => -x,
                UnOp::Not => (x == 0) as i64,
            }),
            a => CExpr::Un(op, Box::new(a)),
        },
        CExpr::Bin(op, a, b) => match (*a, *b) {
            (CExpr::Const(x), CExpr::Const(y)) => match binop(op, x, y) {
                Ok(v) => CExpr::Const(v),
                Err(_) => CExpr::Bin(op, Box::new(CExpr::Const(x)), Box::new(CExpr::Const(y))),
            },
            (a, b) => CExpr::Bin(op, Box::new(a), Box::new(b)),
        },
        e => e,
    }
}

fn const_eval(e: &Expr, consts: &HashMap<String, i64>, line: usize) -> Result<i64, ModelError> {
    let bad = |m: String| resolve_err(line, m);
    Ok(match e {
        Expr::Num(n) => *n,
        Expr::Name(n) => *consts
            .get(n)
            .ok_or_else(|| bad(format!("`{n}` is not a constant")))?,
        Expr::Unary(UnOp::Neg, a) => -const_eval(a, consts, line)?,
        Expr::Unary(UnOp::Not, a) => (const_eval(a, consts, line)? == 0) as i64,
        Expr::Binary(op, a, b) => binop(*op, const_eval(a, consts, line)?, const_eval(b, consts, line)?)
            .map_err(|err| bad(err.0))?,
        Expr::Index(..) | Expr::Sum(_) => return Err(bad("constant expression expected".into())),
    })
}

fn size_of(e: &Option<Expr>, consts: &HashMap<String, i64>, line: usize) -> Result<(usize, bool), ModelError> {
    match e {
        None => Ok((1, true)),
        Some(e) => {
            let n = const_eval(e, consts, line)?;
            if n < 1 {
                return Err(resolve_err(line, format!("array size must be positive, got {n}")));
            }
            Ok((n as usize, false))
        }
    }
}

impl Model {
    /// Compiles `program`, overriding `const` declarations by name.
    pub fn build(program: &Program, overrides: &[(&str, i64)]) -> Result<Model, ModelError> {
        for (k, _) in overrides {
            if !program.consts.iter().any(|c| c.name == *k) {
                return Err(ModelError::UnknownParameter(k.to_string()));
            }
        }
        let mut consts = HashMap::new();
        for c in &program.consts {
            let v = match overrides.iter().find(|(k, _)| *k == c.name) {
                Some((_, v)) => *v,
                None => const_eval(&c.value, &consts, c.line)?,
            };
            consts.insert(c.name.clone(), v);
        }

        let mut names: HashMap<String, usize> = HashMap::new();
        let mut check_unique = |name: &str, line: usize| -> Result<(), ModelError> {
            if consts.contains_key(name) || names.insert(name.to_string(), line).is_some() {
                return Err(resolve_err(line, format!("`{name}` declared twice")));
            }
            Ok(())
        };

        let mut vars = Vec::new();
        let mut var_init = Vec::new();
        for v in &program.vars {
            check_unique(&v.name, v.line)?;
            let (len, scalar) = size_of(&v.size, &consts, v.line)?;
            vars.push(ArrayInfo {
                name: v.name.clone(),
                offset: var_init.len(),
                len,
                scalar,
            });
            let init = i16::try_from(v.init).map_err(|_| resolve_err(v.line, "initial value out of range"))?;
            var_init.extend(std::iter::repeat_n(init, len));
        }
        let mut layout = |decls: &[crate::lang::SyncDecl]| -> Result<Vec<ArrayInfo>, ModelError> {
            let mut out = Vec::new();
            let mut off = 0;
            for d in decls {
                check_unique(&d.name, d.line)?;
                let (len, scalar) = size_of(&d.size, &consts, d.line)?;
                out.push(ArrayInfo {
                    name: d.name.clone(),
                    offset: off,
                    len,
                    scalar,
                });
                off += len;
            }
            Ok(out)
        };
        let mutexes = layout(&program.mutexes)?;
        let conds = layout(&program.conds)?;
        let n_mutex: usize = mutexes.iter().map(|m| m.len).sum();

        let tokens = match &program.tokens {
            Some(e) => const_eval(e, &consts, 0)?.max(0) as usize,
            None => 0,
        };
        let learners = consts.get("learners").copied().unwrap_or(1);

        let mut model = Model {
            consts,
            vars,
            var_init,
            mutexes,
            conds,
            tokens,
            templates: Vec::new(),
            threads: Vec::new(),
            invariants: Vec::new(),
            access: Vec::new(),
            cell_array: Vec::new(),
            cond_guard: Vec::new(),
            learners,
            mutex_off: 0,
            cond_obj: 0,
            prod_off: 0,
            cons_off: 0,
            state_len: 0,
        };
        model.mutex_off = model.var_init.len();

        for inv in &program.invariants {
            let scope = Scope {
                model: &model,
                regs: &[],
                bound: inv.forall.as_deref(),
                in_thread: false,
                line: inv.line,
            };
            let expr = scope.expr(&inv.expr)?;
            model.invariants.push(CInvariant {
                name: inv.name.clone(),
                forall: inv.forall.is_some(),
                expr,
            });
        }

        let mut templates = Vec::new();
        for t in &program.threads {
            let regs: Vec<String> = t.regs.iter().map(|r| r.0.clone()).collect();
            let mut code = Vec::with_capacity(t.body.len() + 1);
            for s in &t.body {
                let scope = Scope {
                    model: &model,
                    regs: &regs,
                    bound: None,
                    in_thread: true,
                    line: s.line,
                };
                code.push(compile_stmt(&scope, s, &t.labels)?);
            }
            code.push(Instr::Halt);
            let mut stmts: Vec<Option<Stmt>> = t.body.iter().cloned().map(Some).collect();
            stmts.push(None);
            templates.push(Template {
                name: t.name.clone(),
                regs,
                reg_init: t.regs.iter().map(|r| r.1).collect(),
                code,
                stmts,
            });
        }

        model.cond_obj = model.mutex_off + n_mutex;
        let mut base = model.mutex_off + n_mutex;
        let mut threads = Vec::new();
        for (ti, t) in program.threads.iter().enumerate() {
            let count = match &t.count {
                Some(e) => const_eval(e, &model.consts, t.line)?,
                None => 1,
            };
            for i in 0..count {
                let name = if t.count.is_some() {
                    format!("{}[{}]", t.name, i)
                } else {
                    t.name.clone()
                };
                threads.push(Instance {
                    template: ti,
                    self_id: i,
                    name,
                    base,
                });
                base += 3 + templates[ti].regs.len();
            }
        }
        model.templates = templates;
        model.threads = threads;
        model.resolve_access(program)?;
        model.prod_off = base;
        model.cons_off = base + model.tokens;
        model.state_len = base + 2 * model.tokens;
        Ok(model)
    }

    fn resolve_access(&mut self, program: &Program) -> Result<(), ModelError> {
        let mutex_index = |name: &str, len: usize, line: usize| -> Result<usize, ModelError> {
            let m = self
                .mutexes
                .iter()
                .position(|a| a.name == name)
                .ok_or_else(|| resolve_err(line, format!("unknown mutex `{name}`")))?;
            if !len.is_multiple_of(self.mutexes[m].len) {
                return Err(resolve_err(
                    line,
                    format!("size {len} is not a multiple of the size of mutex `{name}`"),
                ));
            }
            Ok(m)
        };
        for (i, v) in program.vars.iter().enumerate() {
            let len = self.vars[i].len;
            let a = match &v.access {
                None => Access::Shared,
                Some(AccessDecl::GuardedBy(m)) => Access::Guarded(mutex_index(m, len, v.line)?),
                Some(AccessDecl::WritesGuardedBy(m)) => Access::WriteGuarded(mutex_index(m, len, v.line)?),
                Some(AccessDecl::OwnedBy(t)) => {
                    let tpl = self
                        .templates
                        .iter()
                        .position(|x| x.name == *t)
                        .ok_or_else(|| resolve_err(v.line, format!("unknown thread `{t}`")))?;
                    let count = self.threads.iter().filter(|x| x.template == tpl).count();
                    if count != len {
                        return Err(resolve_err(
                            v.line,
                            format!("`{}` has {len} elements but `{t}` has {count} instances", v.name),
                        ));
                    }
                    Access::Owned(tpl)
                }
            };
            self.access.push(a);
            self.cell_array.extend(std::iter::repeat_n(i as u16, len));
        }
        for (i, c) in program.conds.iter().enumerate() {
            let g = match &c.guard {
                None => None,
                Some(m) => {
                    let m = mutex_index(m, self.conds[i].len, c.line)?;
                    if self.mutexes[m].len != self.conds[i].len {
                        return Err(resolve_err(c.line, "condition and guard must have the same size"));
                    }
                    Some(m)
                }
            };
            self.cond_guard.push(g);
        }
        Ok(())
    }

    /// Global index of the mutex element guarding variable cell `cell`.
    pub(crate) fn guard_of(&self, cell: usize) -> Option<usize> {
        let a = self.cell_array[cell] as usize;
        let m = match self.access[a] {
            Access::Guarded(m) | Access::WriteGuarded(m) => m,
            _ => return None,
        };
        let (v, mx) = (&self.vars[a], &self.mutexes[m]);
        Some(mx.offset + (cell - v.offset) / (v.len / mx.len))
    }

    pub fn parse_and_build(src: &str, overrides: &[(&str, i64)]) -> Result<Model, ModelError> {
        Model::build(&Program::parse(src)?, overrides)
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn thread_names(&self) -> Vec<&str> {
        self.threads.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn thread_id(&self, name: &str) -> Option<ThreadId> {
        self.threads.iter().position(|t| t.name == name)
    }

    pub fn constant(&self, name: &str) -> Option<i64> {
        self.consts.get(name).copied()
    }

    pub fn initial_state(&self) -> State {
        let mut s = vec![0i16; self.state_len];
        s[..self.var_init.len()].copy_from_slice(&self.var_init);
        for th in &self.threads {
            let tpl = &self.templates[th.template];
            for (i, v) in tpl.reg_init.iter().enumerate() {
                s[th.base + 3 + i] = *v as i16;
            }
        }
        State(s.into_boxed_slice())
    }

    // -- state accessors -------------------------------------------------

    pub(crate) fn pc(&self, s: &[i16], t: ThreadId) -> usize {
        s[self.threads[t].base] as usize
    }

    pub(crate) fn status(&self, s: &[i16], t: ThreadId) -> i16 {
        s[self.threads[t].base + 1]
    }

    pub(crate) fn instr(&self, t: ThreadId, pc: usize) -> &Instr {
        &self.templates[self.threads[t].template].code[pc]
    }

    pub(crate) fn stmt(&self, t: ThreadId, pc: usize) -> Option<&Stmt> {
        self.templates[self.threads[t].template].stmts[pc].as_ref()
    }

    pub(crate) fn ctx<'a>(&self, s: &'a [i16], t: ThreadId) -> Ctx<'a> {
        let th = &self.threads[t];
        let nregs = self.templates[th.template].regs.len();
        Ctx {
            state: s,
            regs: &s[th.base + 3..th.base + 3 + nregs],
            self_id: th.self_id,
            bound: 0,
        }
    }

    /// Reads a shared variable element by name, for tests and reporting.
    pub fn var(&self, s: &State, name: &str, index: usize) -> Option<i64> {
        let a = self.vars.iter().find(|a| a.name == name)?;
        (index < a.len).then(|| s.0[a.offset + index] as i64)
    }

    /// Overwrites a shared variable element; used to construct states for
    /// inspection.
    pub fn set_var(&self, s: &mut State, name: &str, index: usize, value: i16) -> bool {
        match self.vars.iter().find(|a| a.name == name) {
            Some(a) if index < a.len => {
                s.0[a.offset + index] = value;
                true
            }
            _ => false,
        }
    }

    pub fn thread_status(&self, s: &State, t: ThreadId) -> ThreadStatus {
        match self.status(&s.0, t) {
            RUNNING => ThreadStatus::Running,
            WAITING => ThreadStatus::Waiting,
            REACQUIRING => ThreadStatus::Reacquiring,
            _ => ThreadStatus::Done,
        }
    }

    /// Site tag of the statement thread `t` is at, if it carries one.
    pub fn thread_site(&self, s: &State, t: ThreadId) -> Option<u16> {
        self.stmt(t, self.pc(&s.0, t)).and_then(|st| st.site)
    }

    /// Human-readable summary of a thread's control state.
    pub fn describe_thread(&self, s: &State, t: ThreadId) -> String {
        let pc = self.pc(&s.0, t);
        let status = match self.status(&s.0, t) {
            RUNNING => "running",
            WAITING => "waiting",
            REACQUIRING => "reacquiring",
            _ => "done",
        };
        match self.stmt(t, pc) {
            Some(st) => match st.site {
                Some(site) => format!("{} {} at @{} `{}`", self.threads[t].name, status, site, st.text),
                None => format!("{} {} at `{}`", self.threads[t].name, status, st.text),
            },
            None => format!("{} {}", self.threads[t].name, status),
        }
    }

    pub(crate) fn mutex_name(&self, global: usize) -> String {
        element_name(&self.mutexes, global)
    }

    pub(crate) fn cond_name(&self, global: usize) -> String {
        element_name(&self.conds, global)
    }

    pub(crate) fn var_name(&self, cell: usize) -> String {
        element_name(&self.vars, cell)
    }

    /// Global index of the mutex element guarding condition element `c`.
    pub(crate) fn cond_guard_of(&self, c: usize) -> Option<usize> {
        let a = self.conds.iter().position(|x| c >= x.offset && c < x.offset + x.len)?;
        let m = self.cond_guard[a]?;
        Some(self.mutexes[m].offset + (c - self.conds[a].offset))
    }
}

fn element_name(list: &[ArrayInfo], global: usize) -> String {
    for a in list {
        if global >= a.offset && global < a.offset + a.len {
            return if a.scalar {
                a.name.clone()
            } else {
                format!("{}[{}]", a.name, global - a.offset)
            };
        }
    }
    format!("#{global}")
}

fn compile_stmt(scope: &Scope, s: &Stmt, labels: &HashMap<String, usize>) -> Result<Instr, ModelError> {
    let m = scope.model;
    let target = |l: &String| -> Result<usize, ModelError> {
        labels
            .get(l)
            .copied()
            .ok_or_else(|| resolve_err(s.line, format!("unknown label `{l}`")))
    };
    Ok(match &s.kind {
        StmtKind::Lock(r) => Instr::Lock(scope.reference(&m.mutexes, r, "mutex")?),
        StmtKind::Unlock(r) => Instr::Unlock(scope.reference(&m.mutexes, r, "mutex")?),
        StmtKind::Wait { cond, mutex } => Instr::Wait {
            cond: scope.reference(&m.conds, cond, "condition")?,
            mutex: scope.reference(&m.mutexes, mutex, "mutex")?,
        },
        StmtKind::Signal(r) => Instr::Signal(scope.reference(&m.conds, r, "condition")?),
        StmtKind::Broadcast(r) => Instr::Broadcast(scope.reference(&m.conds, r, "condition")?),
        StmtKind::Await(e) => Instr::Await(scope.expr(e)?),
        StmtKind::If(e, l) => Instr::Jump {
            cond: Some(scope.expr(e)?),
            target: target(l)?,
        },
        StmtKind::Goto(l) => Instr::Jump {
            cond: None,
            target: target(l)?,
        },
        StmtKind::Assign(r, e) => {
            let value = scope.expr(e)?;
            match (&r.index, scope.regs.iter().position(|x| *x == r.name)) {
                (None, Some(reg)) => Instr::SetReg(reg, value),
                (Some(_), Some(_)) => return Err(resolve_err(s.line, format!("register `{}` is not an array", r.name))),
                _ => Instr::SetVar(scope.reference(&m.vars, r, "variable")?, value),
            }
        }
        StmtKind::Produce(e) => Instr::Produce(scope.expr(e)?),
        StmtKind::Consume(e) => Instr::Consume(scope.expr(e)?),
        StmtKind::Assert(e) => Instr::Assert(scope.expr(e)?),
        StmtKind::Halt => Instr::Halt,
        StmtKind::Skip => Instr::Skip,
    })
}
