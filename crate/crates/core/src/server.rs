//! The parameter-server thread and the weight update kernels.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::StalenessHistogram;
use crate::channels::GradientQueue;
use crate::error::{Error, Result};
use crate::types::{staleness_of, GradientMsg, HyperParams, Mode, UpdateGuard, WeightStore};

/// Below this many elements the update runs on one lane.
const PARALLEL_MIN_LEN: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyOptions {
    pub guard: UpdateGuard,
    pub lanes: usize,
    /// Inner-loop unroll factor: 1, 2, 4 or 8.
    pub unroll: usize,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions {
            guard: UpdateGuard::Lockfree,
            lanes: 4,
            unroll: 8,
        }
    }
}

fn kernel<const U: usize>(cells: &[AtomicU32], grad: &[f32], alpha: f32) {
    let mut cc = cells.chunks_exact(U);
    let mut gc = grad.chunks_exact(U);
    for (c, g) in (&mut cc).zip(&mut gc) {
        let mut w = [0.0f32; U];
        for i in 0..U {
            w[i] = f32::from_bits(c[i].load(Ordering::Relaxed));
        }
        for i in 0..U {
            w[i] -= alpha * g[i];
        }
        for i in 0..U {
            c[i].store(w[i].to_bits(), Ordering::Relaxed);
        }
    }
    for (c, g) in cc.remainder().iter().zip(gc.remainder()) {
        let w = f32::from_bits(c.load(Ordering::Relaxed));
        c.store((w - alpha * g).to_bits(), Ordering::Relaxed);
    }
}

fn apply_lane(cells: &[AtomicU32], grad: &[f32], alpha: f32, unroll: usize) {
    match unroll {
        8 => kernel::<8>(cells, grad, alpha),
        4 => kernel::<4>(cells, grad, alpha),
        2 => kernel::<2>(cells, grad, alpha),
        _ => kernel::<1>(cells, grad, alpha),
    }
}

fn apply_values(weights: &WeightStore, grad: &[f32], alpha: f32, opts: ApplyOptions) {
    let cells = weights.cells();
    if opts.lanes > 1 && cells.len() >= PARALLEL_MIN_LEN {
        let chunk = cells.len().div_ceil(opts.lanes);
        cells
            .par_chunks(chunk)
            .zip(grad.par_chunks(chunk))
            .for_each(|(c, g)| apply_lane(c, g, alpha, opts.unroll));
    } else {
        apply_lane(cells, grad, alpha, opts.unroll);
    }
}

/// `theta[k] -= alpha * grad[k]` for every element, then one timestamp
/// increment. Returns the new timestamp.
pub fn apply_update(weights: &WeightStore, msg: &GradientMsg, alpha: f32, opts: ApplyOptions) -> Result<u64> {
    if msg.values.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            got: msg.values.len(),
        });
    }
    Ok(match opts.guard {
        UpdateGuard::Locked => {
            let _w = weights.guard().write();
            apply_values(weights, &msg.values, alpha, opts);
            weights.bump_timestamp()
        }
        UpdateGuard::Lockfree => {
            apply_values(weights, &msg.values, alpha, opts);
            weights.bump_timestamp()
        }
    })
}

/// Applies the mean of `msgs`, summed in slice order in `f64`, as a single
/// update with a single timestamp increment.
pub fn ssgd_apply(weights: &WeightStore, msgs: &[GradientMsg], alpha: f32, opts: ApplyOptions) -> Result<u64> {
    if msgs.is_empty() {
        return Err(Error::Run("barrier released with no gradients".into()));
    }
    let dim = weights.len();
    let mut sum = vec![0.0f64; dim];
    for m in msgs {
        if m.values.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: m.values.len(),
            });
        }
        for (s, g) in sum.iter_mut().zip(&m.values) {
            *s += *g as f64;
        }
    }
    let inv = msgs.len() as f64;
    let avg = GradientMsg {
        values: sum.iter().map(|s| (s / inv) as f32).collect(),
        learner_id: 0,
        seq_no: 0,
        basis_timestamp: 0,
    };
    apply_update(weights, &avg, alpha, opts)
}

/// Random pauses injected after applies, for stress tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub seed: u64,
    /// Probability of yielding after an apply.
    pub yield_prob: f64,
    /// Probability of sleeping up to `max_sleep_us` after an apply.
    pub sleep_prob: f64,
    pub max_sleep_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub mode: Mode,
    pub alpha: f32,
    pub apply: ApplyOptions,
    pub staleness_cap: Option<u64>,
    /// Reject non-finite gradients; on by default in debug builds only.
    pub check_finite: bool,
    /// Keep every consumed `seq_no` per learner in the report.
    pub record_seq: bool,
    pub jitter: Option<Jitter>,
}

impl ServerConfig {
    pub fn from_hyper(hp: &HyperParams) -> Self {
        ServerConfig {
            mode: hp.mode,
            alpha: hp.learning_rate,
            apply: ApplyOptions {
                guard: hp.update_guard,
                ..Default::default()
            },
            staleness_cap: hp.effective_staleness_cap(),
            check_finite: cfg!(debug_assertions),
            record_seq: false,
            jitter: None,
        }
    }
}

/// Everything the PS thread shares with the rest of the run.
pub struct ServerState {
    pub weights: Arc<WeightStore>,
    pub queues: Vec<Arc<GradientQueue>>,
    pub config: ServerConfig,
    stop: AtomicBool,
    abort: AtomicBool,
    progress: AtomicU64,
    consumed: Vec<AtomicU64>,
}

impl ServerState {
    pub fn new(weights: Arc<WeightStore>, queues: Vec<Arc<GradientQueue>>, config: ServerConfig) -> Self {
        let consumed = (0..queues.len()).map(|_| AtomicU64::new(0)).collect();
        ServerState {
            weights,
            queues,
            config,
            stop: AtomicBool::new(false),
            abort: AtomicBool::new(false),
            progress: AtomicU64::new(0),
            consumed,
        }
    }

    /// Seeds the counters when resuming from a checkpoint.
    pub fn resume_counters(&self, progress: u64, consumed: &[u64]) {
        self.progress.store(progress, Ordering::Release);
        for (c, v) in self.consumed.iter().zip(consumed) {
            c.store(*v, Ordering::Release);
        }
    }

    pub fn learners(&self) -> usize {
        self.queues.len()
    }

    /// Gradients consumed (applied or discarded) so far.
    pub fn progress(&self) -> u64 {
        self.progress.load(Ordering::Acquire)
    }

    /// Gradients consumed from learner `l`.
    pub fn consumed(&self, l: usize) -> u64 {
        self.consumed[l].load(Ordering::Acquire)
    }

    pub fn consumed_all(&self) -> Vec<u64> {
        (0..self.learners()).map(|l| self.consumed(l)).collect()
    }

    /// Asks the PS to drain every queue and exit.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::Release);
    }

    /// Asks the PS to exit after the current message.
    pub fn request_abort(&self) {
        self.abort.store(true, Ordering::Release);
    }

    pub fn aborted(&self) -> bool {
        self.abort.load(Ordering::Acquire)
    }
}

/// What the PS observed during one `ps_run`.
#[derive(Debug, Clone, Default)]
pub struct PsReport {
    pub applied: u64,
    pub discarded: u64,
    pub updates: u64,
    pub staleness: StalenessHistogram,
    pub t_receive: Duration,
    pub t_apply: Duration,
    pub empty_sweeps: u64,
    pub seq_log: Vec<Vec<u64>>,
}

/// Passed to the observer after every weight update.
#[derive(Debug)]
pub struct ApplyEvent<'a> {
    pub timestamp: u64,
    /// Observed staleness of each gradient folded into this update.
    pub staleness: &'a [u64],
}

pub type Observer<'a> = dyn FnMut(&ServerState, &ApplyEvent<'_>) -> Result<()> + 'a;

/// Runs the PS loop until a stop request finds every queue empty, or until
/// an abort request.
///
/// Queues are polled round-robin, at most one message per queue per sweep;
/// after a sweep that found nothing the thread yields.
pub fn ps_run(state: &ServerState, observer: &mut Observer<'_>) -> Result<PsReport> {
    let lam = state.learners();
    let dim = state.weights.len();
    let cfg = &state.config;
    let mut report = PsReport {
        seq_log: if cfg.record_seq { vec![Vec::new(); lam] } else { Vec::new() },
        ..Default::default()
    };
    let mut rng = cfg.jitter.map(|j| (j, ChaCha8Rng::seed_from_u64(j.seed)));
    let mut bufs: Vec<GradientMsg> = (0..lam).map(|l| GradientMsg::zeros(dim, l)).collect();
    let mut have = vec![false; lam];
    let mut ages: Vec<u64> = Vec::with_capacity(lam);
    loop {
        if state.aborted() {
            break;
        }
        let mut got_any = false;
        for idx in 0..lam {
            if have[idx] {
                continue;
            }
            let t0 = Instant::now();
            if !state.queues[idx].try_dequeue_into(&mut bufs[idx]) {
                continue;
            }
            report.t_receive += t0.elapsed();
            got_any = true;
            let msg = &bufs[idx];
            debug_assert_eq!(msg.learner_id, idx, "message in the wrong queue");
            if cfg.check_finite && !msg.values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    learner: idx,
                    seq_no: msg.seq_no,
                });
            }
            if cfg.record_seq {
                report.seq_log[idx].push(msg.seq_no);
            }
            match cfg.mode {
                Mode::Asgd => {
                    let rec = staleness_of(msg, state.weights.timestamp());
                    if cfg.staleness_cap.is_some_and(|c| rec.observed > c) {
                        report.discarded += 1;
                        state.consumed[idx].fetch_add(1, Ordering::AcqRel);
                        state.progress.fetch_add(1, Ordering::AcqRel);
                    } else {
                        let t1 = Instant::now();
                        let ts = apply_update(&state.weights, msg, cfg.alpha, cfg.apply)?;
                        report.t_apply += t1.elapsed();
                        report.applied += 1;
                        report.updates += 1;
                        report.staleness.add(rec.observed);
                        // Counters first: the observer may checkpoint them.
                        state.consumed[idx].fetch_add(1, Ordering::AcqRel);
                        state.progress.fetch_add(1, Ordering::AcqRel);
                        observer(
                            state,
                            &ApplyEvent {
                                timestamp: ts,
                                staleness: &[rec.observed],
                            },
                        )?;
                    }
                }
                Mode::Ssgd => {
                    have[idx] = true;
                    if have.iter().all(|h| *h) {
                        let ts0 = state.weights.timestamp();
                        ages.clear();
                        ages.extend(bufs.iter().map(|m| staleness_of(m, ts0).observed));
                        let t1 = Instant::now();
                        let ts = ssgd_apply(&state.weights, &bufs, cfg.alpha, cfg.apply)?;
                        report.t_apply += t1.elapsed();
                        report.applied += lam as u64;
                        report.updates += 1;
                        for a in &ages {
                            report.staleness.add(*a);
                        }
                        for c in &state.consumed {
                            c.fetch_add(1, Ordering::AcqRel);
                        }
                        state.progress.fetch_add(lam as u64, Ordering::AcqRel);
                        have.fill(false);
                        observer(
                            state,
                            &ApplyEvent {
                                timestamp: ts,
                                staleness: &ages,
                            },
                        )?;
                    }
                }
            }
            if let Some((j, r)) = rng.as_mut() {
                let u: f64 = r.gen();
                if u < j.sleep_prob {
                    std::thread::sleep(Duration::from_micros(r.gen_range(0..=j.max_sleep_us)));
                } else if u < j.sleep_prob + j.yield_prob {
                    std::thread::yield_now();
                }
            }
        }
        if !got_any {
            if state.stop.load(Ordering::Acquire) && state.queues.iter().all(|q| q.is_empty()) {
                break;
            }
            report.empty_sweeps += 1;
            std::thread::yield_now();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(values: Vec<f32>) -> GradientMsg {
        GradientMsg {
            values,
            learner_id: 0,
            seq_no: 0,
            basis_timestamp: 0,
        }
    }

    #[test]
    fn single_update_arithmetic() {
        let w = WeightStore::new(&[1.0, 2.0]);
        let ts = apply_update(&w, &grad(vec![0.5, -1.0]), 0.1, ApplyOptions::default()).unwrap();
        assert_eq!(ts, 1);
        assert_eq!(w.snapshot(), vec![1.0 - 0.1f32 * 0.5, 2.0 + 0.1f32 * 1.0]);
        assert!((w.get(0) - 0.95).abs() < 1e-7 && (w.get(1) - 2.10).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_still_advances_timestamp() {
        let w = WeightStore::new(&[3.0, -1.0, 0.5]);
        apply_update(&w, &grad(vec![0.0; 3]), 0.1, ApplyOptions::default()).unwrap();
        assert_eq!(w.snapshot(), vec![3.0, -1.0, 0.5]);
        assert_eq!(w.timestamp(), 1);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let w = WeightStore::zeros(3);
        let e = apply_update(&w, &grad(vec![0.0; 2]), 0.1, ApplyOptions::default());
        assert!(matches!(e, Err(Error::LengthMismatch { expected: 3, got: 2 })));
        assert_eq!(w.timestamp(), 0);
    }

    #[test]
    fn ssgd_average_then_step() {
        let w = WeightStore::zeros(2);
        let msgs = [grad(vec![1.0, 1.0]), grad(vec![3.0, 3.0])];
        ssgd_apply(&w, &msgs, 0.1, ApplyOptions::default()).unwrap();
        assert_eq!(w.snapshot(), vec![-0.2, -0.2]);
        assert_eq!(w.timestamp(), 1);
    }

    #[test]
    fn ssgd_with_one_message_is_a_plain_update() {
        let a = WeightStore::new(&[0.3, -0.7, 1.1]);
        let b = WeightStore::new(&[0.3, -0.7, 1.1]);
        let g = grad(vec![0.123, -4.5, 1e-3]);
        ssgd_apply(&a, std::slice::from_ref(&g), 0.01, ApplyOptions::default()).unwrap();
        apply_update(&b, &g, 0.01, ApplyOptions::default()).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn one_queued_gradient_then_stop() {
        let q = Arc::new(GradientQueue::new(2, 2));
        q.enqueue(&grad(vec![1.0, -1.0])).unwrap();
        let st = ServerState::new(
            Arc::new(WeightStore::zeros(2)),
            vec![q],
            ServerConfig::from_hyper(&HyperParams {
                learning_rate: 0.5,
                ..Default::default()
            }),
        );
        st.request_stop();
        let r = ps_run(&st, &mut |_, _| Ok(())).unwrap();
        assert_eq!(r.applied, 1);
        assert_eq!(st.weights.timestamp(), 1);
        assert_eq!(st.progress(), 1);
        assert_eq!(st.weights.snapshot(), vec![-0.5, 0.5]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let q = Arc::new(GradientQueue::new(1, 2));
        q.enqueue(&grad(vec![f32::NAN, 0.0])).unwrap();
        let mut cfg = ServerConfig::from_hyper(&HyperParams::default());
        cfg.check_finite = true;
        let st = ServerState::new(Arc::new(WeightStore::zeros(2)), vec![q], cfg);
        st.request_stop();
        let r = ps_run(&st, &mut |_, _| Ok(()));
        assert!(matches!(r, Err(Error::NonFiniteGradient { learner: 0, .. })));
    }

    #[test]
    fn stale_gradients_beyond_the_cap_are_discarded() {
        let q = Arc::new(GradientQueue::new(4, 1));
        for basis in [0, 0, 0] {
            q.enqueue(&GradientMsg {
                basis_timestamp: basis,
                ..grad(vec![1.0])
            })
            .unwrap();
        }
        let mut cfg = ServerConfig::from_hyper(&HyperParams::default());
        cfg.staleness_cap = Some(1);
        let st = ServerState::new(Arc::new(WeightStore::zeros(1)), vec![q], cfg);
        st.request_stop();
        let r = ps_run(&st, &mut |_, _| Ok(())).unwrap();
        assert_eq!((r.applied, r.discarded), (2, 1));
        assert_eq!(r.staleness.max(), Some(1));
        assert_eq!(st.progress(), 3);
    }
}
