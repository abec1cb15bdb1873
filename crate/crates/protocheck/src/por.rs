//! Persistent-set partial-order reduction.
//!
//! Each thread instance gets, for every program counter, a static
//! over-approximation of the objects (variable cells, mutexes, conditions)
//! it may still read or write. At a state, [`PorIndex::persistent`] closes a
//! set of threads under two rules: an enabled thread pulls in every thread
//! whose future may conflict with its next transition, and a disabled
//! thread pulls in the threads that could enable it. Exploring only the
//! transitions of that set preserves every terminal state and deadlock.
//!
//! The argument for assertion-like checks needs the reduced graph to be
//! acyclic; [`crate::explore`] verifies that afterwards and falls back to
//! full expansion otherwise.
//!
//! Invariants are checked on every explored state. When each instance of
//! every invariant reads a single cell, a transition that breaks an
//! instance writes exactly the cell the check reads, so treating the check
//! as part of that transition leaves all footprints unchanged and the
//! violation is preserved like a deadlock. Invariants reading several cells
//! get the visibility proviso instead: a reduced set may not contain a
//! transition that writes an object some invariant reads.
//!
//! Token production and consumption are bookkeeping for the exactly-once
//! monitor and are not treated as conflicting.

use crate::explore::{Succ, WRITE};
use crate::model::{CExpr, CRef, Ctx, Instr, Model, ThreadId, DONE, REACQUIRING, RUNNING, WAITING};

/// Largest object space handled; larger models are explored unreduced.
pub(crate) const MAX_OBJECTS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Bits([u64; MAX_OBJECTS / 64]);

impl Bits {
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn set_range(&mut self, from: usize, len: usize) {
        for i in from..from + len {
            self.set(i);
        }
    }

    fn union(&mut self, o: &Bits) {
        for (a, b) in self.0.iter_mut().zip(o.0.iter()) {
            *a |= b;
        }
    }

    fn count(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    fn intersects(&self, o: &Bits) -> bool {
        self.0.iter().zip(o.0.iter()).any(|(a, b)| a & b != 0)
    }
}

/// Read and write sets over the unified object space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Footprint {
    r: Bits,
    w: Bits,
}

impl Footprint {
    fn union(&mut self, o: &Footprint) {
        self.r.union(&o.r);
        self.w.union(&o.w);
    }

    fn conflicts(&self, o: &Footprint) -> bool {
        self.w.intersects(&o.r) || self.w.intersects(&o.w) || self.r.intersects(&o.w)
    }
}

pub(crate) struct PorIndex {
    mutex_base: usize,
    cond_base: usize,
    /// Per thread instance and pc: objects of every instruction reachable from pc.
    future: Vec<Vec<Footprint>>,
    /// Per thread instance and pc: static objects of the instruction itself.
    instr: Vec<Vec<Footprint>>,
    /// Objects read by an invariant instance that reads more than one cell.
    visible: Bits,
}

/// Cells read by one instance of an invariant.
fn instance_reads(e: &CExpr, bound: i64, out: &mut Bits) {
    fn fixed(e: &CExpr) -> bool {
        match e {
            CExpr::Const(_) | CExpr::Bound => true,
            CExpr::Un(_, a) => fixed(a),
            CExpr::Bin(_, a, b) => fixed(a) && fixed(b),
            _ => false,
        }
    }
    match e {
        CExpr::Var(o) => out.set(*o),
        CExpr::VarAt { base, len, idx } => {
            instance_reads(idx, bound, out);
            let ctx = Ctx {
                state: &[],
                regs: &[],
                self_id: 0,
                bound,
            };
            match fixed(idx).then(|| ctx.eval(idx)) {
                Some(Ok(i)) if i >= 0 && (i as usize) < *len => out.set(base + i as usize),
                _ => out.set_range(*base, *len),
            }
        }
        CExpr::Sum { base, len } => out.set_range(*base, *len),
        CExpr::Un(_, a) => instance_reads(a, bound, out),
        CExpr::Bin(_, a, b) => {
            instance_reads(a, bound, out);
            instance_reads(b, bound, out);
        }
        CExpr::Const(_) | CExpr::Reg(_) | CExpr::SelfId | CExpr::Bound => {}
    }
}

fn successors(code: &[Instr], pc: usize) -> Vec<usize> {
    match &code[pc] {
        Instr::Halt => vec![],
        Instr::Jump { cond: None, target } => vec![*target],
        Instr::Jump { cond: Some(_), target } => vec![*target, pc + 1],
        _ => vec![pc + 1],
    }
    .into_iter()
    .filter(|&p| p < code.len())
    .collect()
}

impl PorIndex {
    /// `None` when the model is too large for the fixed-size object sets.
    pub fn new(model: &Model) -> Option<Self> {
        let nc: usize = model.conds.iter().map(|a| a.len).sum();
        if model.cond_obj + nc > MAX_OBJECTS || model.threads.len() > 64 {
            return None;
        }
        let mut idx = PorIndex {
            mutex_base: model.mutex_off,
            cond_base: model.cond_obj,
            future: Vec::new(),
            instr: Vec::new(),
            visible: Bits::default(),
        };
        for inv in &model.invariants {
            let bounds = if inv.forall { model.learners } else { 1 };
            for bound in 0..bounds {
                let mut cells = Bits::default();
                instance_reads(&inv.expr, bound, &mut cells);
                if cells.count() > 1 {
                    idx.visible.union(&cells);
                }
            }
        }
        for th in &model.threads {
            let tpl = &model.templates[th.template];
            let n = tpl.code.len();
            let ctx = Ctx {
                state: &[],
                regs: &[],
                self_id: th.self_id,
                bound: 0,
            };
            let instr: Vec<Footprint> = tpl.code.iter().map(|i| idx.static_instr(&ctx, i)).collect();

            let reach = |starts: Vec<usize>, through: &dyn Fn(usize) -> bool| -> Footprint {
                let mut fp = idx.empty();
                let mut seen = vec![false; n];
                let mut stack = starts;
                while let Some(p) = stack.pop() {
                    if seen[p] || !through(p) {
                        continue;
                    }
                    seen[p] = true;
                    fp.union(&instr[p]);
                    stack.extend(successors(&tpl.code, p));
                }
                fp
            };
            let future = (0..n).map(|pc| reach(vec![pc], &|_| true)).collect();
            idx.future.push(future);
            idx.instr.push(instr);
        }
        Some(idx)
    }

    fn empty(&self) -> Footprint {
        Footprint::default()
    }

    fn static_reads(&self, ctx: &Ctx, e: &CExpr, out: &mut Bits) {
        match e {
            CExpr::Var(o) => out.set(*o),
            CExpr::VarAt { base, len, idx } => {
                self.static_reads(ctx, idx, out);
                match idx.is_static().then(|| ctx.eval(idx)) {
                    Some(Ok(i)) if i >= 0 && (i as usize) < *len => out.set(base + i as usize),
                    _ => out.set_range(*base, *len),
                }
            }
            CExpr::Sum { base, len } => out.set_range(*base, *len),
            CExpr::Un(_, a) => self.static_reads(ctx, a, out),
            CExpr::Bin(_, a, b) => {
                self.static_reads(ctx, a, out);
                self.static_reads(ctx, b, out);
            }
            CExpr::Const(_) | CExpr::Reg(_) | CExpr::SelfId | CExpr::Bound => {}
        }
    }

    fn static_ref(&self, ctx: &Ctx, r: &CRef, offset: usize, out: &mut Bits) {
        match r.idx.is_static().then(|| ctx.index(r)) {
            Some(Ok(i)) => out.set(offset + i),
            _ => out.set_range(offset + r.base, r.len),
        }
    }

    fn static_instr(&self, ctx: &Ctx, i: &Instr) -> Footprint {
        let mut fp = self.empty();
        match i {
            Instr::Lock(r) | Instr::Unlock(r) => self.static_ref(ctx, r, self.mutex_base, &mut fp.w),
            Instr::Wait { cond, mutex } => {
                self.static_ref(ctx, mutex, self.mutex_base, &mut fp.w);
                self.static_ref(ctx, cond, self.cond_base, &mut fp.w);
            }
            Instr::Signal(r) | Instr::Broadcast(r) => self.static_ref(ctx, r, self.cond_base, &mut fp.w),
            Instr::Await(e) | Instr::SetReg(_, e) | Instr::Assert(e) | Instr::Produce(e) | Instr::Consume(e) => {
                self.static_reads(ctx, e, &mut fp.r)
            }
            Instr::Jump { cond, .. } => {
                if let Some(e) = cond {
                    self.static_reads(ctx, e, &mut fp.r)
                }
            }
            Instr::SetVar(r, e) => {
                self.static_reads(ctx, &r.idx, &mut fp.r);
                self.static_reads(ctx, e, &mut fp.r);
                self.static_ref(ctx, r, 0, &mut fp.w);
            }
            Instr::Halt | Instr::Skip => {}
        }
        fp
    }

    /// Threads other than `t` whose future may write an object in `objs`.
    fn writers_of(&self, model: &Model, s: &[i16], t: ThreadId, objs: &Bits) -> u64 {
        let mut out = 0;
        for v in 0..model.threads.len() {
            let b = model.threads[v].base;
            if v != t && s[b + 1] != DONE && self.future[v][s[b] as usize].w.intersects(objs) {
                out |= 1 << v;
            }
        }
        out
    }

    /// Threads that must act before disabled thread `t` can move.
    fn enablers(&self, model: &Model, s: &[i16], t: ThreadId) -> u64 {
        let base = model.threads[t].base;
        let pc = s[base] as usize;
        let owner = |m: usize| -> u64 {
            match s[model.mutex_off + m] {
                0 => 0,
                o => 1 << (o as usize - 1),
            }
        };
        match s[base + 1] {
            REACQUIRING => owner(s[base + 2] as usize),
            WAITING => {
                let mut objs = Bits::default();
                objs.set(self.cond_base + s[base + 2] as usize);
                self.writers_of(model, s, t, &objs)
            }
            RUNNING => match model.instr(t, pc) {
                Instr::Lock(r) => model.ctx(s, t).index(r).map_or(0, owner),
                _ => self.writers_of(model, s, t, &self.instr[t][pc].r),
            },
            _ => 0,
        }
    }

    /// Threads of a persistent set at `s`, as a bit mask, given the
    /// successors of every thread. Among the closures started from each
    /// enabled thread, picks one with the fewest enabled members. With
    /// `invariants`, sets holding a visible transition are passed over.
    pub fn persistent(&self, model: &Model, s: &[i16], succ: &[Succ], invariants: bool) -> u64 {
        let n = model.threads.len();
        let mut trans = [Footprint::default(); 64];
        let mut enabled = 0u64;
        for x in succ {
            enabled |= 1 << x.thread;
            let fp = &mut trans[x.thread];
            for &o in &x.touched {
                let i = (o & !WRITE) as usize;
                if o & WRITE != 0 {
                    fp.w.set(i);
                } else {
                    fp.r.set(i);
                }
            }
        }
        let live: Vec<(ThreadId, &Footprint)> = (0..n)
            .filter(|&v| s[model.threads[v].base + 1] != DONE)
            .map(|v| {
                let b = model.threads[v].base;
                (v, &self.future[v][s[b] as usize])
            })
            .collect();

        let mut best = enabled;
        let mut best_count = enabled.count_ones();
        for start in (0..n).filter(|&t| enabled & (1 << t) != 0) {
            if best_count == 1 {
                break;
            }
            let mut member = 1u64 << start;
            let mut work = member;
            while work != 0 {
                let u = work.trailing_zeros() as usize;
                work &= work - 1;
                let add = if enabled & (1 << u) != 0 {
                    let fp = &trans[u];
                    live.iter()
                        .filter(|(v, fut)| *v != u && fp.conflicts(fut))
                        .fold(0u64, |m, (v, _)| m | 1 << v)
                } else {
                    self.enablers(model, s, u)
                };
                let new = add & !member;
                member |= new;
                work |= new;
                if (member & enabled).count_ones() >= best_count {
                    break;
                }
            }
            let count = (member & enabled).count_ones();
            let visible = invariants
                && (0..n).any(|u| member & enabled & (1 << u) != 0 && trans[u].w.intersects(&self.visible));
            if count < best_count && !visible {
                best = member & enabled;
                best_count = count;
            }
        }
        best
    }
}
