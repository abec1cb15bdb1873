//! Breadth-first exhaustive exploration and randomized walks.

use std::fmt;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxBuildHasher;

use crate::model::{Access, Ctx, Instr, Model, State, ThreadId, DONE, REACQUIRING, RUNNING, WAITING};
use crate::por::PorIndex;
use crate::wfg::WfgIndex;

/// Upper bound on consecutive thread-local steps folded into one transition.
const LOCAL_STEP_LIMIT: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ExploreOptions {
    /// Exploration stops with [`Verdict::BudgetExhausted`] past this many states.
    pub max_states: usize,
    pub check_invariants: bool,
    pub check_exactly_once: bool,
    /// Check acyclicity of the wait-for graph in every reached state.
    pub check_wait_for: bool,
    /// Let waiting threads resume without a signal (predicate re-check).
    pub spurious_wakeups: bool,
    /// Partial-order reduction with persistent sets. Exact for deadlocks,
    /// terminal states and invariants; the wait-for check only sees the
    /// explored states.
    pub reduction: bool,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            max_states: 10_000_000,
            check_invariants: true,
            check_exactly_once: true,
            check_wait_for: false,
            spurious_wakeups: false,
            reduction: true,
        }
    }
}

impl ExploreOptions {
    fn sem(&self) -> Sem {
        Sem {
            spurious: self.spurious_wakeups,
            invariants: self.check_invariants,
        }
    }
}

/// Options that change what a single step does.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Sem {
    pub spurious: bool,
    /// Check invariants on the intermediate states of folded steps.
    pub invariants: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub states: usize,
    pub transitions: usize,
    pub final_states: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Deadlock { blocked: Vec<String> },
    Invariant { name: String },
    Assertion { thread: String, site: Option<u16> },
    DuplicateConsume { thread: String, token: i64 },
    ExactlyOnce { missing: Vec<i64>, duplicated: Vec<i64> },
    WaitForCycle { cycle: Vec<String> },
    Runtime { thread: String, message: String },
}

impl Violation {
    /// Short machine-friendly name of the violated property.
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::Deadlock { .. } => "deadlock",
            Violation::Invariant { .. } => "invariant",
            Violation::Assertion { .. } => "assertion",
            Violation::DuplicateConsume { .. } | Violation::ExactlyOnce { .. } => "exactly-once",
            Violation::WaitForCycle { .. } => "wait-for-cycle",
            Violation::Runtime { .. } => "runtime-error",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Deadlock { blocked } => write!(f, "deadlock: {}", blocked.join("; ")),
            Violation::Invariant { name } => write!(f, "invariant `{name}` violated"),
            Violation::Assertion { thread, site } => match site {
                Some(s) => write!(f, "assertion failed in {thread} at @{s}"),
                None => write!(f, "assertion failed in {thread}"),
            },
            Violation::DuplicateConsume { thread, token } if *token < 0 => {
                write!(f, "exactly-once violated: {thread} consumed an empty slot (value {token})")
            }
            Violation::DuplicateConsume { thread, token } => {
                write!(f, "exactly-once violated: {thread} consumed token {token} more often than it was produced")
            }
            Violation::ExactlyOnce { missing, duplicated } => write!(
                f,
                "exactly-once violated at termination: never consumed {missing:?}, consumed twice {duplicated:?}"
            ),
            Violation::WaitForCycle { cycle } => write!(f, "wait-for cycle: {}", cycle.join(" -> ")),
            Violation::Runtime { thread, message } => write!(f, "{thread}: {message}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StepKind {
    Exec,
    Reacquire,
    Spurious,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub thread: String,
    pub site: Option<u16>,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Counterexample {
    pub violation: Violation,
    pub trace: Vec<TraceStep>,
    pub final_state: State,
    pub stats: Stats,
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "counterexample ({} steps): {}", self.trace.len(), self.violation)?;
        for (i, s) in self.trace.iter().enumerate() {
            match s.site {
                Some(site) => writeln!(f, "{:4}. {:<10} @{:<4} {}", i + 1, s.thread, site, s.text)?,
                None => writeln!(f, "{:4}. {:<10}       {}", i + 1, s.thread, s.text)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Verdict {
    Verified(Stats),
    Counterexample(Box<Counterexample>),
    BudgetExhausted(Stats),
}

impl Verdict {
    pub fn is_verified(&self) -> bool {
        matches!(self, Verdict::Verified(_))
    }

    pub fn counterexample(&self) -> Option<&Counterexample> {
        match self {
            Verdict::Counterexample(c) => Some(c),
            _ => None,
        }
    }

    pub fn stats(&self) -> Stats {
        match self {
            Verdict::Verified(s) | Verdict::BudgetExhausted(s) => *s,
            Verdict::Counterexample(c) => c.stats,
        }
    }
}

pub(crate) struct Succ {
    pub thread: ThreadId,
    pub pc: usize,
    pub kind: StepKind,
    pub result: Result<Box<[i16]>, Violation>,
    /// Objects touched by the transition and the steps folded into it;
    /// writes carry [`WRITE`].
    pub touched: Touched,
}

/// Object ids of a transition, see [`Succ::touched`].
pub(crate) type Touched = smallvec::SmallVec<[u32; 8]>;

/// Marks a write in [`Succ::touched`].
pub(crate) const WRITE: u32 = 1 << 31;

fn store(value: i64) -> Result<i16, String> {
    i16::try_from(value).map_err(|_| format!("value {value} does not fit the state encoding"))
}

impl Model {
    fn runtime(&self, t: ThreadId, message: impl Into<String>) -> Violation {
        Violation::Runtime {
            thread: self.threads[t].name.clone(),
            message: message.into(),
        }
    }

    /// Marks `t` halted and clears its control block, so that halted
    /// threads do not distinguish otherwise equal states.
    pub(crate) fn retire(&self, s: &mut [i16], t: ThreadId) {
        let th = &self.threads[t];
        let len = 3 + self.templates[th.template].regs.len();
        s[th.base..th.base + len].fill(0);
        s[th.base] = (self.templates[th.template].code.len() - 1) as i16;
        s[th.base + 1] = DONE;
    }

    /// Checks the declared access discipline for `instr` and reports whether
    /// it is a both-mover: it commutes with every step of every other thread
    /// because all the shared state it touches is protected by a mutex `t`
    /// holds or is owned by `t`.
    /// Touched objects are appended to `acc`.
    pub(crate) fn footprint(
        &self,
        s: &[i16],
        t: ThreadId,
        instr: &Instr,
        sem: Sem,
        acc: Option<&mut Touched>,
    ) -> Result<bool, Violation> {
        let ctx = self.ctx(s, t);
        let rt = |e: crate::model::EvalError| self.runtime(t, e.0);
        let holds = |m: usize| s[self.mutex_off + m] == t as i16 + 1;
        let mut sink = Touched::new();
        let acc = acc.unwrap_or(&mut sink);
        let mut reads = crate::model::Cells::new();
        let mut write = None;
        match instr {
            Instr::Unlock(r) | Instr::Lock(r) => {
                if let Ok(m) = ctx.index(r) {
                    acc.push((self.mutex_off + m) as u32 | WRITE);
                }
                return Ok(matches!(instr, Instr::Unlock(_)));
            }
            Instr::Halt | Instr::Skip => return Ok(false),
            Instr::Wait { cond, mutex } => {
                let c = ctx.index(cond).map_err(rt)?;
                let m = ctx.index(mutex).map_err(rt)?;
                acc.push((self.mutex_off + m) as u32 | WRITE);
                acc.push((self.cond_obj + c) as u32 | WRITE);
                if let Some(g) = self.cond_guard_of(c) {
                    if g != m {
                        return Err(self.runtime(
                            t,
                            format!("waits on {} with {} but it is guarded by {}", self.cond_name(c), self.mutex_name(m), self.mutex_name(g)),
                        ));
                    }
                }
                return Ok(false);
            }
            Instr::Signal(r) | Instr::Broadcast(r) => {
                let c = ctx.index(r).map_err(rt)?;
                acc.push((self.cond_obj + c) as u32 | WRITE);
                return match self.cond_guard_of(c) {
                    Some(g) if !holds(g) => Err(self.runtime(
                        t,
                        format!("signals {} without holding {}", self.cond_name(c), self.mutex_name(g)),
                    )),
                    Some(_) => Ok(!sem.spurious),
                    None => Ok(false),
                };
            }
            Instr::Await(e) | Instr::Produce(e) | Instr::Consume(e) | Instr::Assert(e) | Instr::SetReg(_, e) => {
                ctx.reads(e, &mut reads).map_err(rt)?
            }
            Instr::Jump { cond, .. } => {
                if let Some(e) = cond {
                    ctx.reads(e, &mut reads).map_err(rt)?
                }
            }
            Instr::SetVar(r, e) => {
                ctx.reads(&r.idx, &mut reads).map_err(rt)?;
                ctx.reads(e, &mut reads).map_err(rt)?;
                write = Some(ctx.index(r).map_err(rt)?);
            }
        }
        let mut mover = !matches!(instr, Instr::Await(_));
        let cells = reads.iter().map(|&c| (c, false)).chain(write.map(|c| (c, true)));
        for (cell, is_write) in cells {
            acc.push(cell as u32 | if is_write { WRITE } else { 0 });
            let a = self.cell_array[cell] as usize;
            let what = if is_write { "writes" } else { "reads" };
            match self.access[a] {
                Access::Shared => mover = false,
                Access::Guarded(_) | Access::WriteGuarded(_) => {
                    let g = self.guard_of(cell).expect("guarded cell");
                    let strict = is_write || matches!(self.access[a], Access::Guarded(_));
                    if !holds(g) {
                        if strict {
                            return Err(self.runtime(
                                t,
                                format!("{what} {} without holding {}", self.var_name(cell), self.mutex_name(g)),
                            ));
                        }
                        mover = false;
                    } else if is_write && matches!(self.access[a], Access::WriteGuarded(_)) {
                        // Unsynchronized readers may observe the write.
                        mover = false;
                    }
                }
                Access::Owned(tpl) => {
                    let th = &self.threads[t];
                    if th.template != tpl || th.self_id as usize != cell - self.vars[a].offset {
                        return Err(self.runtime(t, format!("{what} {} owned by another thread", self.var_name(cell))));
                    }
                }
            }
        }
        Ok(mover)
    }

    /// Runs thread `t` forward over thread-local instructions and
    /// both-movers (see [`Model::footprint`]), folding them into the step
    /// that preceded them. Folded mover steps are appended to `log`.
    pub(crate) fn run_local(
        &self,
        s: &mut [i16],
        t: ThreadId,
        sem: Sem,
        mut log: Option<&mut Vec<usize>>,
        mut touched: Option<&mut Touched>,
    ) -> Result<(), Violation> {
        let base = self.threads[t].base;
        let mut out = Vec::new();
        for _ in 0..LOCAL_STEP_LIMIT {
            if s[base + 1] != RUNNING {
                return Ok(());
            }
            let pc = s[base] as usize;
            let instr = self.instr(t, pc);
            if !instr.is_local() {
                let mark = touched.as_ref().map_or(0, |v| v.len());
                if !self.footprint(s, t, instr, sem, touched.as_deref_mut())? {
                    if let Some(v) = touched.as_deref_mut() {
                        v.truncate(mark);
                    }
                    return Ok(());
                }
                out.clear();
                self.thread_steps(s, t, sem, false, &mut out);
                if out.len() != 1 {
                    return Ok(());
                }
                if let Some(l) = log.as_deref_mut() {
                    l.push(pc);
                }
                let n = out.pop().expect("one successor").result?;
                s.copy_from_slice(&n);
                // Intermediate states of a folded run are never stored, so
                // the writes inside it are checked here.
                if sem.invariants && matches!(instr, Instr::SetVar(..)) {
                    self.check_invariants(s)?;
                }
                continue;
            }
            match instr {
                Instr::Jump { cond, target } => {
                    let taken = match cond {
                        Some(c) => self.ctx(s, t).eval(c).map_err(|e| self.runtime(t, e.0))? != 0,
                        None => true,
                    };
                    s[base] = if taken { *target as i16 } else { pc as i16 + 1 };
                }
                Instr::SetReg(r, e) => {
                    let v = self.ctx(s, t).eval(e).map_err(|e| self.runtime(t, e.0))?;
                    s[base + 3 + r] = store(v).map_err(|m| self.runtime(t, m))?;
                    s[base] += 1;
                }
                Instr::Skip => s[base] += 1,
                Instr::Halt => self.retire(s, t),
                _ => unreachable!("non-local instruction"),
            }
        }
        Err(self.runtime(t, "thread runs without end between visible steps"))
    }

    /// Re-executes one recorded transition from `parent` and lists it
    /// together with the mover steps folded into it.
    pub(crate) fn replay(
        &self,
        parent: &[i16],
        t: ThreadId,
        pc: usize,
        kind: StepKind,
        child: Option<&[i16]>,
        sem: Sem,
    ) -> Vec<TraceStep> {
        let head = self.trace_step(t, pc, kind);
        let mut out = Vec::new();
        self.thread_steps(parent, t, sem, false, &mut out);
        for succ in out.into_iter().filter(|x| x.kind == kind) {
            let Ok(n) = succ.result else { continue };
            let mut n = n.into_vec();
            let mut log = Vec::new();
            let res = self.run_local(&mut n, t, sem, Some(&mut log), None);
            let matches = match child {
                Some(c) => res.is_ok() && n == c,
                None => res.is_err(),
            };
            if matches {
                let mut steps = vec![head];
                steps.extend(log.into_iter().map(|p| self.trace_step(t, p, StepKind::Exec)));
                return steps;
            }
        }
        vec![head]
    }

    /// Appends every transition of thread `t` enabled in `s`.
    /// With `fold`, each successor is advanced over the local and mover
    /// steps that follow it.
    pub(crate) fn thread_steps(&self, s: &[i16], t: ThreadId, sem: Sem, fold: bool, out: &mut Vec<Succ>) {
        let th = &self.threads[t];
        let base = th.base;
        let pc = s[base] as usize;
        let owner_tag = t as i16 + 1;
        // Objects touched by the head step; folded steps are added per successor.
        let mut head = Touched::new();
        let first = out.len();
        let mut push = |kind: StepKind, (result, touched): (Result<Box<[i16]>, Violation>, Touched)| {
            out.push(Succ {
                thread: t,
                pc,
                kind,
                result,
                touched,
            })
        };
        let finish = |mut n: Vec<i16>| -> (Result<Box<[i16]>, Violation>, Touched) {
            let mut touched = Touched::new();
            if fold {
                if let Err(v) = self.run_local(&mut n, t, sem, None, Some(&mut touched)) {
                    return (Err(v), touched);
                }
            }
            (Ok(n.into_boxed_slice()), touched)
        };

        match s[base + 1] {
            DONE => {}
            WAITING => {
                if sem.spurious {
                    let mut n = s.to_vec();
                    head.push((self.cond_obj + s[base + 2] as usize) as u32 | WRITE);
                    match self.wait_mutex(s, t) {
                        Ok(m) => {
                            n[base + 1] = REACQUIRING;
                            n[base + 2] = m as i16;
                            push(StepKind::Spurious, (Ok(n.into_boxed_slice()), Touched::new()));
                        }
                        Err(v) => push(StepKind::Spurious, (Err(v), Touched::new())),
                    }
                }
            }
            REACQUIRING => {
                let m = s[base + 2] as usize;
                if s[self.mutex_off + m] == 0 {
                    head.push((self.mutex_off + m) as u32 | WRITE);
                    let mut n = s.to_vec();
                    n[self.mutex_off + m] = owner_tag;
                    n[base + 1] = RUNNING;
                    n[base + 2] = 0;
                    n[base] = pc as i16 + 1;
                    push(StepKind::Reacquire, finish(n));
                }
            }
            RUNNING => {
                if let Err(v) = self.footprint(s, t, self.instr(t, pc), sem, Some(&mut head)) {
                    push(StepKind::Exec, (Err(v), Touched::new()));
                    return;
                }
                let ctx = self.ctx(s, t);
                let rt = |e: crate::model::EvalError| self.runtime(t, e.0);
                // Skip disabled steps before copying the state.
                match self.instr(t, pc) {
                    Instr::Lock(r) => {
                        if matches!(ctx.index(r), Ok(m) if s[self.mutex_off + m] != 0) {
                            return;
                        }
                    }
                    Instr::Await(e) => {
                        if matches!(ctx.eval(e), Ok(0)) {
                            return;
                        }
                    }
                    _ => {}
                }
                let exec = |f: &dyn Fn(&mut Vec<i16>, &Ctx) -> Result<bool, Violation>| {
                    let mut n = s.to_vec();
                    match f(&mut n, &ctx) {
                        Ok(true) => Some(finish(n)),
                        Ok(false) => None,
                        Err(v) => Some((Err(v), Touched::new())),
                    }
                };
                let advance = |n: &mut Vec<i16>| n[base] = pc as i16 + 1;
                let result = match self.instr(t, pc) {
                    Instr::Lock(r) => exec(&|n, ctx| {
                        let m = ctx.index(r).map_err(rt)?;
                        if s[self.mutex_off + m] != 0 {
                            return Ok(false);
                        }
                        n[self.mutex_off + m] = owner_tag;
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Unlock(r) => exec(&|n, ctx| {
                        let m = ctx.index(r).map_err(rt)?;
                        if s[self.mutex_off + m] != owner_tag {
                            return Err(self.runtime(t, format!("unlock of {} which it does not hold", self.mutex_name(m))));
                        }
                        n[self.mutex_off + m] = 0;
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Wait { cond, mutex } => exec(&|n, ctx| {
                        let m = ctx.index(mutex).map_err(rt)?;
                        let c = ctx.index(cond).map_err(rt)?;
                        if s[self.mutex_off + m] != owner_tag {
                            return Err(self.runtime(t, format!("wait without holding {}", self.mutex_name(m))));
                        }
                        n[self.mutex_off + m] = 0;
                        n[base + 1] = WAITING;
                        n[base + 2] = c as i16;
                        Ok(true)
                    }),
                    Instr::Signal(r) | Instr::Broadcast(r) => {
                        let broadcast = matches!(self.instr(t, pc), Instr::Broadcast(_));
                        match ctx.index(r) {
                            Err(e) => Some((Err(rt(e)), Touched::new())),
                            Ok(c) => {
                                let waiters: Vec<ThreadId> = (0..self.threads.len())
                                    .filter(|&u| {
                                        let b = self.threads[u].base;
                                        s[b + 1] == WAITING && s[b + 2] as usize == c
                                    })
                                    .collect();
                                let wake = |n: &mut Vec<i16>, u: ThreadId| -> Result<(), Violation> {
                                    let m = self.wait_mutex(s, u)?;
                                    let b = self.threads[u].base;
                                    n[b + 1] = REACQUIRING;
                                    n[b + 2] = m as i16;
                                    Ok(())
                                };
                                if waiters.is_empty() || broadcast {
                                    exec(&|n, _| {
                                        for &u in &waiters {
                                            wake(n, u)?;
                                        }
                                        advance(n);
                                        Ok(true)
                                    })
                                } else {
                                    // One successor per possible wake-up choice.
                                    for &u in &waiters[1..] {
                                        let r = exec(&|n, _| {
                                            wake(n, u)?;
                                            advance(n);
                                            Ok(true)
                                        });
                                        if let Some(r) = r {
                                            push(StepKind::Exec, r);
                                        }
                                    }
                                    let u = waiters[0];
                                    exec(&|n, _| {
                                        wake(n, u)?;
                                        advance(n);
                                        Ok(true)
                                    })
                                }
                            }
                        }
                    }
                    Instr::Await(e) => exec(&|n, ctx| {
                        if ctx.eval(e).map_err(rt)? == 0 {
                            return Ok(false);
                        }
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Jump { cond, target } => exec(&|n, ctx| {
                        let taken = match cond {
                            Some(c) => ctx.eval(c).map_err(rt)? != 0,
                            None => true,
                        };
                        n[base] = if taken { *target as i16 } else { pc as i16 + 1 };
                        Ok(true)
                    }),
                    Instr::SetReg(r, e) => exec(&|n, ctx| {
                        n[base + 3 + r] = store(ctx.eval(e).map_err(rt)?).map_err(|m| self.runtime(t, m))?;
                        advance(n);
                        Ok(true)
                    }),
                    Instr::SetVar(r, e) => exec(&|n, ctx| {
                        let i = ctx.index(r).map_err(rt)?;
                        n[i] = store(ctx.eval(e).map_err(rt)?).map_err(|m| self.runtime(t, m))?;
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Produce(e) => exec(&|n, ctx| {
                        let v = ctx.eval(e).map_err(rt)?;
                        if v < 0 || v as usize >= self.tokens {
                            return Err(self.runtime(t, format!("produced token {v} outside 0..{}", self.tokens)));
                        }
                        n[self.prod_off + v as usize] += 1;
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Consume(e) => exec(&|n, ctx| {
                        let v = ctx.eval(e).map_err(rt)?;
                        let dup = Violation::DuplicateConsume {
                            thread: th.name.clone(),
                            token: v,
                        };
                        if v < 0 || v as usize >= self.tokens {
                            return Err(dup);
                        }
                        let v = v as usize;
                        n[self.cons_off + v] += 1;
                        if n[self.cons_off + v] > n[self.prod_off + v] {
                            return Err(dup);
                        }
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Assert(e) => exec(&|n, ctx| {
                        if ctx.eval(e).map_err(rt)? == 0 {
                            let site = self.stmt(t, pc).and_then(|s| s.site);
                            return Err(Violation::Assertion {
                                thread: th.name.clone(),
                                site,
                            });
                        }
                        advance(n);
                        Ok(true)
                    }),
                    Instr::Halt => exec(&|n, _| {
                        self.retire(n, t);
                        Ok(true)
                    }),
                    Instr::Skip => exec(&|n, _| {
                        advance(n);
                        Ok(true)
                    }),
                };
                if let Some(r) = result {
                    push(StepKind::Exec, r);
                }
            }
            other => unreachable!("corrupt thread status {other}"),
        }
        for x in &mut out[first..] {
            x.touched.extend_from_slice(&head);
        }
    }

    fn wait_mutex(&self, s: &[i16], u: ThreadId) -> Result<usize, Violation> {
        match self.instr(u, self.pc(s, u)) {
            Instr::Wait { mutex, .. } => self.ctx(s, u).index(mutex).map_err(|e| self.runtime(u, e.0)),
            _ => Err(self.runtime(u, "waiting thread is not at a wait")),
        }
    }

    pub(crate) fn successors(&self, s: &[i16], sem: Sem, out: &mut Vec<Succ>) {
        out.clear();
        for t in 0..self.threads.len() {
            self.thread_steps(s, t, sem, true, out);
        }
    }

    pub(crate) fn is_enabled(&self, s: &[i16], t: ThreadId) -> bool {
        let mut v = Vec::new();
        self.thread_steps(s, t, Sem::default(), false, &mut v);
        !v.is_empty()
    }

    pub(crate) fn all_done(&self, s: &[i16]) -> bool {
        self.threads.iter().all(|th| s[th.base + 1] == DONE)
    }

    pub(crate) fn check_invariants(&self, s: &[i16]) -> Result<(), Violation> {
        for inv in &self.invariants {
            let range = if inv.forall { 0..self.learners } else { 0..1 };
            for b in range {
                let ctx = Ctx {
                    state: s,
                    regs: &[],
                    self_id: 0,
                    bound: b,
                };
                let ok = ctx.eval(&inv.expr).map_err(|e| Violation::Runtime {
                    thread: format!("invariant {}", inv.name),
                    message: e.0,
                })?;
                if ok == 0 {
                    return Err(Violation::Invariant { name: inv.name.clone() });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_final(&self, s: &[i16]) -> Result<(), Violation> {
        let mut missing = Vec::new();
        let mut duplicated = Vec::new();
        for v in 0..self.tokens {
            let (p, c) = (s[self.prod_off + v], s[self.cons_off + v]);
            if c < p {
                missing.push(v as i64);
            } else if c > p {
                duplicated.push(v as i64);
            }
        }
        if missing.is_empty() && duplicated.is_empty() {
            Ok(())
        } else {
            Err(Violation::ExactlyOnce { missing, duplicated })
        }
    }

    pub(crate) fn deadlock(&self, s: &[i16]) -> Violation {
        let st = State(s.to_vec().into_boxed_slice());
        let blocked = (0..self.threads.len())
            .filter(|&t| s[self.threads[t].base + 1] != DONE)
            .map(|t| self.describe_thread(&st, t))
            .collect();
        Violation::Deadlock { blocked }
    }

    fn trace_step(&self, t: ThreadId, pc: usize, kind: StepKind) -> TraceStep {
        let stmt = self.stmt(t, pc);
        let site = stmt.and_then(|s| s.site);
        let text = match (kind, stmt) {
            (StepKind::Exec, Some(s)) => s.text.clone(),
            (StepKind::Exec, None) => "halt".to_string(),
            (StepKind::Reacquire, Some(s)) => format!("wake and reacquire after `{}`", s.text),
            (StepKind::Spurious, Some(s)) => format!("spurious wake-up from `{}`", s.text),
            (_, None) => "wake".to_string(),
        };
        TraceStep {
            thread: self.threads[t].name.clone(),
            site,
            text,
        }
    }

    /// Initial state with each thread advanced over its leading local steps.
    fn start(&self, sem: Sem) -> Result<Box<[i16]>, Violation> {
        let mut s = self.initial_state().0.into_vec();
        for t in 0..self.threads.len() {
            self.run_local(&mut s, t, sem, None, None)?;
        }
        Ok(s.into_boxed_slice())
    }

    /// Checks applied to every newly reached state.
    fn check_state(&self, s: &[i16], opts: &ExploreOptions, wfg: Option<&WfgIndex>) -> Result<(), Violation> {
        if opts.check_invariants {
            self.check_invariants(s)?;
        }
        if let Some(idx) = wfg {
            let g = idx.graph(self, s);
            if let Some(cycle) = g.find_cycle() {
                return Err(Violation::WaitForCycle {
                    cycle: cycle.into_iter().map(|t| self.threads[t].name.clone()).collect(),
                });
            }
        }
        Ok(())
    }
}

/// Exhaustively explores every interleaving of `model` breadth-first.
///
/// Deadlock is a reachable state in which some thread has not halted and no
/// transition is enabled. Exactly-once is checked on consumption (no token
/// consumed more often than produced) and on every terminal state (each
/// produced token consumed exactly once).
pub fn explore(model: &Model, opts: &ExploreOptions) -> Verdict {
    let mut stats = Stats::default();
    let wfg = opts.check_wait_for.then(|| WfgIndex::new(model));
    let start = match model.start(opts.sem()) {
        Ok(s) => s,
        Err(v) => return counterexample(v, Vec::new(), model.initial_state().0, stats),
    };
    if let Err(v) = model.check_state(&start, opts, wfg.as_ref()) {
        return counterexample(v, Vec::new(), start, stats);
    }

    let mut seen: IndexSet<Box<[i16]>, FxBuildHasher> = IndexSet::with_hasher(FxBuildHasher);
    // (parent index, thread, pc, kind) of the transition that first reached each state.
    let mut parents: Vec<(u32, u32, u32, StepKind)> = Vec::new();
    seen.insert(start);
    parents.push((u32::MAX, 0, 0, StepKind::Exec));

    let sem = opts.sem();
    let trace_to = |seen: &IndexSet<Box<[i16]>, FxBuildHasher>, parents: &[(u32, u32, u32, StepKind)], mut i: usize| {
        let mut edges = Vec::new();
        while parents[i].0 != u32::MAX {
            edges.push((parents[i], i));
            i = parents[i].0 as usize;
        }
        edges
            .into_iter()
            .rev()
            .flat_map(|((p, t, pc, kind), c)| {
                let parent = &seen[p as usize];
                model.replay(parent, t as usize, pc as usize, kind, Some(&seen[c]), sem)
            })
            .collect::<Vec<TraceStep>>()
    };

    let por = if opts.reduction { PorIndex::new(model) } else { None };
    // Reduced graph in compressed rows, kept for the acyclicity check.
    let mut edge_start: Vec<u32> = Vec::new();
    let mut edges: Vec<u32> = Vec::new();

    let mut succ = Vec::new();
    let mut cursor = 0;
    while cursor < seen.len() {
        let s = seen.get_index(cursor).expect("cursor within bounds").clone();
        stats.states = seen.len();
        model.successors(&s, opts.sem(), &mut succ);
        if let Some(p) = &por {
            edge_start.push(edges.len() as u32);
            if !succ.is_empty() && succ.iter().all(|x| x.result.is_ok()) {
                let keep = p.persistent(model, &s, &succ, opts.check_invariants);
                succ.retain(|x| keep & (1 << x.thread) != 0);
            }
        }
        if succ.is_empty() {
            let outcome = if model.all_done(&s) {
                stats.final_states += 1;
                if opts.check_exactly_once {
                    model.check_final(&s)
                } else {
                    Ok(())
                }
            } else {
                Err(model.deadlock(&s))
            };
            if let Err(v) = outcome {
                let trace = trace_to(&seen, &parents, cursor);
                return counterexample(v, trace, s, stats);
            }
        }
        for step in succ.drain(..) {
            stats.transitions += 1;
            let label = (cursor as u32, step.thread as u32, step.pc as u32, step.kind);
            let next = match step.result {
                Ok(n) => n,
                Err(v) => {
                    let mut trace = trace_to(&seen, &parents, cursor);
                    trace.extend(model.replay(&s, step.thread, step.pc, step.kind, None, sem));
                    return counterexample(v, trace, s, stats);
                }
            };
            if let Some(i) = seen.get_index_of(&next) {
                if por.is_some() {
                    edges.push(i as u32);
                }
                continue;
            }
            if let Err(v) = model.check_state(&next, opts, wfg.as_ref()) {
                let mut trace = trace_to(&seen, &parents, cursor);
                trace.extend(model.replay(&s, step.thread, step.pc, step.kind, Some(&next), sem));
                return counterexample(v, trace, next, stats);
            }
            if por.is_some() {
                edges.push(seen.len() as u32);
            }
            seen.insert(next);
            parents.push(label);
            if seen.len() > opts.max_states {
                stats.states = seen.len();
                return Verdict::BudgetExhausted(stats);
            }
        }
        cursor += 1;
    }
    stats.states = seen.len();
    if por.is_some() {
        edge_start.push(edges.len() as u32);
        if has_cycle(&edge_start, &edges) {
            let full = ExploreOptions {
                reduction: false,
                ..opts.clone()
            };
            return explore(model, &full);
        }
    }
    Verdict::Verified(stats)
}

/// Kahn's algorithm over a graph in compressed-row form.
fn has_cycle(start: &[u32], edges: &[u32]) -> bool {
    let n = start.len() - 1;
    let mut indeg = vec![0u32; n];
    for &e in edges {
        indeg[e as usize] += 1;
    }
    let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut done = 0;
    while let Some(v) = queue.pop() {
        done += 1;
        for &e in &edges[start[v] as usize..start[v + 1] as usize] {
            indeg[e as usize] -= 1;
            if indeg[e as usize] == 0 {
                queue.push(e as usize);
            }
        }
    }
    done < n
}

fn counterexample(violation: Violation, trace: Vec<TraceStep>, s: Box<[i16]>, stats: Stats) -> Verdict {
    Verdict::Counterexample(Box::new(Counterexample {
        violation,
        trace,
        final_state: State(s),
        stats,
    }))
}

#[derive(Debug, Clone)]
pub struct RandomOptions {
    pub walks: usize,
    pub max_steps: usize,
    pub seed: u64,
}

/// Randomized exploration for instances too large to enumerate: `walks`
/// independent uniformly-random schedules, each checked with the same
/// monitors as [`explore`]. A walk that reaches `max_steps` is abandoned.
/// `stats.states` counts visited (not distinct) states.
pub fn explore_random(model: &Model, opts: &ExploreOptions, ropts: &RandomOptions) -> Verdict {
    let mut stats = Stats::default();
    let wfg = opts.check_wait_for.then(|| WfgIndex::new(model));
    let mut rng = ChaCha8Rng::seed_from_u64(ropts.seed);
    let mut succ = Vec::new();
    for _ in 0..ropts.walks {
        let mut s = match model.start(opts.sem()) {
            Ok(s) => s,
            Err(v) => return counterexample(v, Vec::new(), model.initial_state().0, stats),
        };
        if let Err(v) = model.check_state(&s, opts, wfg.as_ref()) {
            return counterexample(v, Vec::new(), s, stats);
        }
        let mut trace = Vec::new();
        for _ in 0..ropts.max_steps {
            stats.states += 1;
            model.successors(&s, opts.sem(), &mut succ);
            if succ.is_empty() {
                let outcome = if model.all_done(&s) {
                    stats.final_states += 1;
                    if opts.check_exactly_once {
                        model.check_final(&s)
                    } else {
                        Ok(())
                    }
                } else {
                    Err(model.deadlock(&s))
                };
                if let Err(v) = outcome {
                    return counterexample(v, trace, s, stats);
                }
                break;
            }
            stats.transitions += 1;
            let pick = succ.choose(&mut rng).expect("non-empty");
            let child = pick.result.as_ref().ok().map(|n| &n[..]);
            trace.extend(model.replay(&s, pick.thread, pick.pc, pick.kind, child, opts.sem()));
            match &pick.result {
                Err(v) => return counterexample(v.clone(), trace, s, stats),
                Ok(n) => {
                    if let Err(v) = model.check_state(n, opts, wfg.as_ref()) {
                        return counterexample(v, trace, n.clone(), stats);
                    }
                    s = n.clone();
                }
            }
        }
    }
    Verdict::Verified(stats)
}

/// Every state reachable from the initial state, in breadth-first order.
/// Intended for small instances (sweeps over reachable states in tests).
pub fn reachable_states(model: &Model, limit: usize) -> Option<Vec<State>> {
    let start = model.start(Sem::default()).ok()?;
    let mut seen: IndexSet<Box<[i16]>, FxBuildHasher> = IndexSet::with_hasher(FxBuildHasher);
    seen.insert(start);
    let mut succ = Vec::new();
    let mut cursor = 0;
    while cursor < seen.len() {
        let s = seen.get_index(cursor)?.clone();
        model.successors(&s, Sem::default(), &mut succ);
        for step in succ.drain(..) {
            if let Ok(n) = step.result {
                seen.insert(n);
            }
        }
        if seen.len() > limit {
            return None;
        }
        cursor += 1;
    }
    Some(seen.into_iter().map(State).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(src: &str) -> Model {
        Model::parse_and_build(src, &[]).unwrap()
    }

    #[test]
    fn lock_order_inversion_deadlocks() {
        let m = build(
            "\
mutex a
mutex b
thread t1
  lock a        @1
  lock b        @2
  unlock b
  unlock a
end
thread t2
  lock b        @3
  lock a        @4
  unlock a
  unlock b
end
",
        );
        let v = explore(&m, &ExploreOptions::default());
        let ce = v.counterexample().expect("deadlock expected");
        assert_eq!(ce.violation.kind(), "deadlock");
        assert_eq!(ce.trace.len(), 2);
    }

    #[test]
    fn lost_signal_without_predicate_loop_deadlocks() {
        // Waiting without re-checking a predicate misses a signal sent early.
        let m = build(
            "\
mutex m
cond c
thread waiter
  lock m
  wait c m
  unlock m
end
thread signaller
  lock m
  signal c
  unlock m
end
",
        );
        let v = explore(&m, &ExploreOptions::default());
        assert_eq!(v.counterexample().unwrap().violation.kind(), "deadlock");
    }

    #[test]
    fn predicate_loop_handshake_is_verified() {
        let src = "\
var full = 0
mutex m
cond c
tokens 1
thread producer
  lock m
  full := 1
  produce 0
  signal c
  unlock m
end
thread consumer
  lock m
check:
  if full == 1 goto take
  wait c m
  goto check
take:
  consume 0
  full := 0
  unlock m
end
";
        let m = build(src);
        let v = explore(&m, &ExploreOptions::default());
        assert!(v.is_verified(), "{v:?}");
        let v = explore(
            &m,
            &ExploreOptions {
                spurious_wakeups: true,
                ..Default::default()
            },
        );
        assert!(v.is_verified(), "{v:?}");
        // Same state and transition counts on every run.
        assert_eq!(explore(&m, &ExploreOptions::default()).stats(), explore(&m, &ExploreOptions::default()).stats());
    }

    #[test]
    fn duplicate_and_missing_tokens_are_reported() {
        let m = build("tokens 2\nthread t\n  produce 0\n  produce 1\n  consume 0\n  consume 0\nend\n");
        let v = explore(&m, &ExploreOptions::default());
        assert!(matches!(
            v.counterexample().unwrap().violation,
            Violation::DuplicateConsume { token: 0, .. }
        ));
        let m = build("tokens 2\nthread t\n  produce 0\n  produce 1\n  consume 0\nend\n");
        let v = explore(&m, &ExploreOptions::default());
        assert_eq!(
            v.counterexample().unwrap().violation,
            Violation::ExactlyOnce {
                missing: vec![1],
                duplicated: vec![]
            }
        );
    }

    #[test]
    fn invariant_violation_carries_trace() {
        let m = build("var x = 0\ninvariant small: x < 2\nthread t\n  x := 1   @7\n  x := 2   @8\nend\n");
        let v = explore(&m, &ExploreOptions::default());
        let ce = v.counterexample().unwrap();
        assert_eq!(ce.violation, Violation::Invariant { name: "small".into() });
        let sites: Vec<_> = ce.trace.iter().map(|s| s.site).collect();
        assert_eq!(sites, vec![Some(7), Some(8)]);
        assert!(ce.to_string().contains("@8"));
    }

    #[test]
    fn budget_exhaustion_is_explicit() {
        let m = build("var x = 0\nthread t\nl:\n  x := (x + 1) % 100\n  goto l\nend\n");
        let v = explore(
            &m,
            &ExploreOptions {
                max_states: 10,
                ..Default::default()
            },
        );
        assert!(matches!(v, Verdict::BudgetExhausted(_)));
    }

    #[test]
    fn random_walks_find_the_same_deadlock() {
        let m = build(
            "mutex a\nmutex b\nthread t1\n  lock a\n  lock b\n  unlock b\n  unlock a\nend\n\
             thread t2\n  lock b\n  lock a\n  unlock a\n  unlock b\nend\n",
        );
        let v = explore_random(
            &m,
            &ExploreOptions::default(),
            &RandomOptions {
                walks: 200,
                max_steps: 100,
                seed: 1,
            },
        );
        assert_eq!(v.counterexample().unwrap().violation.kind(), "deadlock");
    }
}
