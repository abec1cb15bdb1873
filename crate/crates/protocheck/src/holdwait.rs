//! Static hold-and-wait analysis.
//!
//! A forward may-hold dataflow over each thread template computes the set of
//! mutexes (by declared name) that can be held at every program point. Any
//! blocking point reached while another mutex is held is a hold-and-wait
//! site, one of the necessary conditions for a lock deadlock.

use std::fmt;

use crate::model::{Instr, Model};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldAndWait {
    pub thread: String,
    pub pc: usize,
    pub site: Option<u16>,
    pub line: usize,
    pub held: Vec<String>,
    pub waited: String,
}

impl fmt::Display for HoldAndWait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let site = self.site.map_or_else(|| "-".to_string(), |s| format!("@{s}"));
        write!(
            f,
            "{} {} (line {}): holds {} while waiting for {}",
            self.thread,
            site,
            self.line,
            self.held.join(", "),
            self.waited
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HoldWaitReport {
    pub entries: Vec<HoldAndWait>,
}

impl HoldWaitReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Thread templates that appear in the report.
    pub fn threads(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.iter().map(|e| e.thread.as_str()).collect();
        v.dedup();
        v
    }

    /// `(thread, site)` pairs of every entry.
    pub fn sites(&self) -> Vec<(&str, Option<u16>)> {
        self.entries.iter().map(|e| (e.thread.as_str(), e.site)).collect()
    }
}

fn mutex_array(model: &Model, base: usize) -> usize {
    model
        .mutexes
        .iter()
        .position(|a| base >= a.offset && base < a.offset + a.len)
        .expect("mutex reference resolves to a declared array")
}

fn names(model: &Model, set: u64) -> Vec<String> {
    (0..model.mutexes.len())
        .filter(|i| set & (1 << i) != 0)
        .map(|i| model.mutexes[i].name.clone())
        .collect()
}

/// Lists every `(program point, held mutexes, awaited resource)` triple of
/// the model's thread templates.
pub fn check_hold_and_wait(model: &Model) -> HoldWaitReport {
    assert!(model.mutexes.len() <= 64, "at most 64 mutex arrays supported");
    let mut report = HoldWaitReport::default();
    for tpl in &model.templates {
        let n = tpl.code.len();
        let mut held: Vec<Option<u64>> = vec![None; n];
        let mut work = vec![0usize];
        held[0] = Some(0);
        while let Some(pc) = work.pop() {
            let cur = held[pc].expect("visited");
            let (out, succs): (u64, Vec<usize>) = match &tpl.code[pc] {
                Instr::Lock(r) => (cur | 1 << mutex_array(model, r.base), vec![pc + 1]),
                Instr::Unlock(r) => (cur & !(1 << mutex_array(model, r.base)), vec![pc + 1]),
                Instr::Jump { cond: None, target } => (cur, vec![*target]),
                Instr::Jump { cond: Some(_), target } => (cur, vec![*target, pc + 1]),
                Instr::Halt => (cur, vec![]),
                _ => (cur, vec![pc + 1]),
            };
            for s in succs.into_iter().filter(|&s| s < n) {
                let merged = held[s].map_or(out, |h| h | out);
                if held[s] != Some(merged) {
                    held[s] = Some(merged);
                    work.push(s);
                }
            }
        }

        for (pc, ins) in tpl.code.iter().enumerate() {
            let Some(h) = held[pc] else { continue };
            let (others, waited) = match ins {
                Instr::Lock(r) => {
                    let m = mutex_array(model, r.base);
                    (h, format!("mutex {}", model.mutexes[m].name))
                }
                Instr::Wait { cond, mutex } => {
                    let m = mutex_array(model, mutex.base);
                    let c = model
                        .conds
                        .iter()
                        .find(|a| cond.base >= a.offset && cond.base < a.offset + a.len)
                        .map_or("?", |a| a.name.as_str());
                    (h & !(1 << m), format!("condition {c} (then mutex {})", model.mutexes[m].name))
                }
                Instr::Await(_) => (h, "guard".to_string()),
                _ => continue,
            };
            if others != 0 {
                let stmt = tpl.stmts[pc].as_ref();
                report.entries.push(HoldAndWait {
                    thread: tpl.name.clone(),
                    pc,
                    site: stmt.and_then(|s| s.site),
                    line: stmt.map_or(0, |s| s.line),
                    held: names(model, others),
                    waited,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Program;

    #[test]
    fn empty_program_has_empty_report() {
        let m = Model::build(&Program::default(), &[]).unwrap();
        assert!(check_hold_and_wait(&m).is_empty());
    }

    #[test]
    fn nested_locks_are_flagged() {
        let m = Model::parse_and_build(
            "mutex a\nmutex b\nthread t\n  lock a   @1\n  lock b   @2\n  unlock b\n  unlock a\nend\n",
            &[],
        )
        .unwrap();
        let r = check_hold_and_wait(&m);
        assert_eq!(r.sites(), vec![("t", Some(2))]);
        assert_eq!(r.entries[0].held, vec!["a".to_string()]);
    }

    #[test]
    fn waiting_on_own_mutex_is_not_hold_and_wait() {
        let m = Model::parse_and_build(
            "var x = 0\nmutex a\ncond c\nthread t\n  lock a\nl:\n  if x == 1 goto out\n  wait c a\n  goto l\nout:\n  unlock a\nend\n",
            &[],
        )
        .unwrap();
        assert!(check_hold_and_wait(&m).is_empty());
    }
}
