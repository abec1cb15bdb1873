//! Wait-for graphs over blocked threads.
//!
//! An edge `a -> b` means thread `a` cannot proceed until thread `b` acts:
//! `b` owns the mutex `a` is acquiring, `b` is able to signal the condition
//! `a` waits on, or `b` writes a variable cell read by the guard `a` awaits.
//! Threads that have halted never receive edges.
//!
//! Guards stand for polling loops. A polling thread stays runnable and is
//! released by any one of its writers, so guard edges are reported but do
//! not take part in cycle detection.

use std::fmt;

use crate::model::{CExpr, Cells, Ctx, Instr, Model, State, ThreadId, DONE, REACQUIRING, RUNNING, WAITING};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaitReason {
    Mutex(String),
    Condition(String),
    Guard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaitEdge {
    pub from: ThreadId,
    pub to: ThreadId,
    pub reason: WaitReason,
}

#[derive(Debug, Clone, Default)]
pub struct WaitForGraph {
    pub threads: Vec<String>,
    pub edges: Vec<WaitEdge>,
}

impl WaitForGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Named edges, for assertions and reporting.
    pub fn named_edges(&self) -> Vec<(&str, &str)> {
        self.edges
            .iter()
            .map(|e| (self.threads[e.from].as_str(), self.threads[e.to].as_str()))
            .collect()
    }

    /// Returns one directed cycle of mutex and condition edges, if any, as
    /// a list of thread ids.
    pub fn find_cycle(&self) -> Option<Vec<ThreadId>> {
        let n = self.threads.len();
        let mut adj = vec![Vec::new(); n];
        for e in self.edges.iter().filter(|e| e.reason != WaitReason::Guard) {
            adj[e.from].push(e.to);
        }
        // 0 = unvisited, 1 = on stack, 2 = finished
        let mut color = vec![0u8; n];
        let mut stack: Vec<(ThreadId, usize)> = Vec::new();
        for root in 0..n {
            if color[root] != 0 {
                continue;
            }
            stack.push((root, 0));
            color[root] = 1;
            while let Some((v, i)) = stack.pop() {
                if i < adj[v].len() {
                    stack.push((v, i + 1));
                    let w = adj[v][i];
                    match color[w] {
                        0 => {
                            color[w] = 1;
                            stack.push((w, 0));
                        }
                        1 => {
                            let start = stack.iter().position(|&(x, _)| x == w).expect("on stack");
                            return Some(stack[start..].iter().map(|&(x, _)| x).collect());
                        }
                        _ => {}
                    }
                } else {
                    color[v] = 2;
                }
            }
        }
        None
    }
}

impl fmt::Display for WaitForGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.edges {
            let why = match &e.reason {
                WaitReason::Mutex(m) => format!("lock {m}"),
                WaitReason::Condition(c) => format!("signal on {c}"),
                WaitReason::Guard => "guard".to_string(),
            };
            writeln!(f, "{} -> {} ({why})", self.threads[e.from], self.threads[e.to])?;
        }
        Ok(())
    }
}

/// Static facts about which threads can signal which conditions and write
/// which variables, precomputed once per model.
pub(crate) struct WfgIndex {
    /// Per template: (condition base, condition length, index expression).
    signals: Vec<Vec<(usize, usize, CExpr)>>,
    /// Per thread instance: cell ranges `[from, to)` it may assign.
    writes: Vec<Vec<(usize, usize)>>,
}

impl WfgIndex {
    pub fn new(model: &Model) -> Self {
        let signals = model
            .templates
            .iter()
            .map(|tpl| {
                tpl.code
                    .iter()
                    .filter_map(|ins| match ins {
                        Instr::Signal(r) | Instr::Broadcast(r) => Some((r.base, r.len, r.idx.clone())),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        let writes = model
            .threads
            .iter()
            .map(|th| {
                let ctx = static_ctx(th.self_id);
                let mut wr: Vec<(usize, usize)> = model.templates[th.template]
                    .code
                    .iter()
                    .filter_map(|ins| match ins {
                        Instr::SetVar(r, _) => Some(match r.idx.is_static().then(|| ctx.index(r)) {
                            Some(Ok(c)) => (c, c + 1),
                            _ => (r.base, r.base + r.len),
                        }),
                        _ => None,
                    })
                    .collect();
                wr.sort_unstable();
                wr.dedup();
                wr
            })
            .collect();
        WfgIndex { signals, writes }
    }

    fn can_signal(&self, model: &Model, u: ThreadId, cond: usize) -> bool {
        let th = &model.threads[u];
        self.signals[th.template].iter().any(|(base, len, idx)| {
            if cond < *base || cond >= base + len {
                return false;
            }
            if idx.is_static() {
                matches!(static_ctx(th.self_id).eval(idx), Ok(i) if base + i as usize == cond)
            } else {
                true
            }
        })
    }

    pub fn graph(&self, model: &Model, s: &[i16]) -> WaitForGraph {
        let mut g = WaitForGraph {
            threads: model.threads.iter().map(|t| t.name.clone()).collect(),
            edges: Vec::new(),
        };
        let n = model.threads.len();
        let alive = |u: ThreadId| s[model.threads[u].base + 1] != DONE;
        for t in 0..n {
            let base = model.threads[t].base;
            let status = s[base + 1];
            if status == DONE || model.is_enabled(s, t) {
                continue;
            }
            match status {
                WAITING => {
                    let c = s[base + 2] as usize;
                    for u in (0..n).filter(|&u| u != t && alive(u)) {
                        if self.can_signal(model, u, c) {
                            g.edges.push(WaitEdge {
                                from: t,
                                to: u,
                                reason: WaitReason::Condition(model.cond_name(c)),
                            });
                        }
                    }
                }
                REACQUIRING => {
                    let m = s[base + 2] as usize;
                    push_owner(model, s, &mut g, t, m);
                }
                RUNNING => match model.instr(t, s[base] as usize) {
                    Instr::Lock(r) => {
                        if let Ok(m) = model.ctx(s, t).index(r) {
                            push_owner(model, s, &mut g, t, m);
                        }
                    }
                    Instr::Await(e) => {
                        let mut reads = Cells::new();
                        if model.ctx(s, t).reads(e, &mut reads).is_err() {
                            continue;
                        }
                        for u in (0..n).filter(|&u| u != t && alive(u)) {
                            let hit = self.writes[u].iter().any(|&(a, b)| reads.iter().any(|&c| c >= a && c < b));
                            if hit {
                                g.edges.push(WaitEdge {
                                    from: t,
                                    to: u,
                                    reason: WaitReason::Guard,
                                });
                            }
                        }
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        g
    }
}

fn static_ctx(self_id: i64) -> Ctx<'static> {
    Ctx {
        state: &[],
        regs: &[],
        self_id,
        bound: 0,
    }
}

fn push_owner(model: &Model, s: &[i16], g: &mut WaitForGraph, t: ThreadId, m: usize) {
    let owner = s[model.mutex_off + m];
    if owner > 0 {
        g.edges.push(WaitEdge {
            from: t,
            to: owner as usize - 1,
            reason: WaitReason::Mutex(model.mutex_name(m)),
        });
    }
}

/// Wait-for edges among the threads blocked in `state`.
pub fn wait_for_graph(model: &Model, state: &State) -> WaitForGraph {
    WfgIndex::new(model).graph(model, &state.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_detection() {
        let mut g = WaitForGraph {
            threads: vec!["a".into(), "b".into(), "c".into()],
            edges: vec![],
        };
        let e = |from, to| WaitEdge {
            from,
            to,
            reason: WaitReason::Guard,
        };
        g.edges = vec![e(0, 1), e(1, 2)];
        assert!(g.find_cycle().is_none());
        g.edges.push(e(2, 1));
        assert!(g.find_cycle().is_none(), "guard edges never close a cycle");
        g.edges.iter_mut().for_each(|x| x.reason = WaitReason::Condition("c".into()));
        let c = g.find_cycle().unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.contains(&1) && c.contains(&2));
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let g = WaitForGraph {
            threads: vec!["a".into()],
            edges: vec![WaitEdge {
                from: 0,
                to: 0,
                reason: WaitReason::Mutex("m".into()),
            }],
        };
        assert_eq!(g.find_cycle(), Some(vec![0]));
    }
}
