//! Runtime wait-for and hold-and-wait instrumentation for the channels.
//!
//! Channels built with a [`WaitMonitor`] report every blocking condition
//! wait as an edge `waiter -> counterpart` and every guard acquisition made
//! while another guard is held. Each thread blocks on at most one thing at a
//! time, so the live wait-for graph is functional and a cycle is found by
//! following successors from the new edge.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct HoldWait {
    pub thread: String,
    pub held: String,
    pub waited: String,
}

#[derive(Debug, Default)]
struct MonitorState {
    waiting: HashMap<Arc<str>, Arc<str>>,
    hold_wait: BTreeSet<HoldWait>,
    cycles: Vec<Vec<String>>,
    waits: u64,
}

#[derive(Debug, Default)]
pub struct WaitMonitor {
    state: Mutex<MonitorState>,
}

thread_local! {
    static HELD: RefCell<Vec<Arc<str>>> = const { RefCell::new(Vec::new()) };
}

impl WaitMonitor {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub(crate) fn begin_wait(&self, waiter: &Arc<str>, target: &Arc<str>) {
        let mut st = self.state.lock();
        st.waits += 1;
        st.waiting.insert(waiter.clone(), target.clone());
        let mut path = vec![waiter.to_string()];
        let mut cur = target.clone();
        while let Some(next) = st.waiting.get(&cur) {
            path.push(cur.to_string());
            if next == waiter {
                st.cycles.push(path);
                break;
            }
            if path.len() > st.waiting.len() {
                break;
            }
            cur = next.clone();
        }
    }

    pub(crate) fn end_wait(&self, waiter: &Arc<str>) {
        self.state.lock().waiting.remove(waiter);
    }

    /// Drops `waiter`'s edge if it was waiting on `by`, which has just
    /// signalled it. The waiter may not run again for a while, and its own
    /// `end_wait` would come too late to keep the graph current.
    pub(crate) fn woke(&self, waiter: &Arc<str>, by: &Arc<str>) {
        let mut st = self.state.lock();
        if st.waiting.get(waiter) == Some(by) {
            st.waiting.remove(waiter);
        }
    }

    pub(crate) fn acquiring(&self, thread: &Arc<str>, guard: &Arc<str>) {
        HELD.with(|h| {
            let h = h.borrow();
            if h.is_empty() {
                return;
            }
            let mut st = self.state.lock();
            for held in h.iter() {
                st.hold_wait.insert(HoldWait {
                    thread: thread.to_string(),
                    held: held.to_string(),
                    waited: guard.to_string(),
                });
            }
        });
    }

    pub(crate) fn acquired(guard: &Arc<str>) {
        HELD.with(|h| h.borrow_mut().push(guard.clone()));
    }

    pub(crate) fn released(guard: &Arc<str>) {
        HELD.with(|h| {
            let mut h = h.borrow_mut();
            if let Some(i) = h.iter().rposition(|g| g == guard) {
                h.remove(i);
            }
        });
    }

    /// Wait-for cycles seen so far, each as the list of threads on it.
    pub fn cycles(&self) -> Vec<Vec<String>> {
        self.state.lock().cycles.clone()
    }

    pub fn hold_and_wait(&self) -> Vec<HoldWait> {
        self.state.lock().hold_wait.iter().cloned().collect()
    }

    /// Thread roles (names without the learner index) that ever acquired a
    /// guard while holding another.
    pub fn hold_and_wait_roles(&self) -> BTreeSet<String> {
        self.state
            .lock()
            .hold_wait
            .iter()
            .map(|hw| role(&hw.thread).to_string())
            .collect()
    }

    pub fn wait_count(&self) -> u64 {
        self.state.lock().waits
    }
}

pub(crate) fn role(name: &str) -> &str {
    name.split('[').next().unwrap_or(name)
}

/// Names and monitor attached to one channel.
#[derive(Debug, Clone)]
pub(crate) struct Probe {
    pub monitor: Arc<WaitMonitor>,
    pub guard: Arc<str>,
    pub producer: Arc<str>,
    pub consumer: Arc<str>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Arc<str> {
        Arc::from(x)
    }

    #[test]
    fn chain_without_cycle() {
        let m = WaitMonitor::new();
        m.begin_wait(&s("train[0]"), &s("push[0]"));
        m.begin_wait(&s("push[0]"), &s("ps"));
        assert!(m.cycles().is_empty());
        m.end_wait(&s("push[0]"));
        m.end_wait(&s("train[0]"));
        assert_eq!(m.wait_count(), 2);
    }

    #[test]
    fn two_cycle_is_reported() {
        let m = WaitMonitor::new();
        m.begin_wait(&s("a"), &s("b"));
        m.begin_wait(&s("b"), &s("a"));
        assert_eq!(m.cycles(), vec![vec!["b".to_string(), "a".to_string()]]);
    }

    #[test]
    fn nested_acquisition_is_recorded() {
        let m = WaitMonitor::new();
        let (t, g1, g2) = (s("push[1]"), s("push_hs[1]"), s("queue[1]"));
        m.acquiring(&t, &g1);
        WaitMonitor::acquired(&g1);
        m.acquiring(&t, &g2);
        WaitMonitor::released(&g1);
        assert_eq!(m.hold_and_wait_roles().into_iter().collect::<Vec<_>>(), vec!["push"]);
        assert_eq!(m.hold_and_wait()[0].waited, "queue[1]");
    }
}
