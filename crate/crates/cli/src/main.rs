mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use protocheck::{explore, ExploreOptions, Model, Verdict};
use shmps::analysis::{bandwidth_report, Baseline, Baselines};
use shmps::metrics::MetricsWriter;
use shmps::resilience::{run_campaign, supervise, CampaignConfig, Checkpoint};

use crate::config::RunConfig;

/// Exit status for operational errors (bad config, I/O, failed runs).
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "shmps", version, about = "Shared-memory parameter-server training engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training under the watchdog and write per-epoch metrics.
    Train(RunArgs),
    /// Time a single-learner run and store it as the speedup reference.
    Baseline(RunArgs),
    /// Required-bandwidth report over a workload fixture.
    Bandwidth(BandwidthArgs),
    /// Model-check a handshake protocol description.
    Verify(VerifyArgs),
    /// Run seeded fault-injection campaigns.
    Inject(InjectArgs),
    /// Print the contents of a checkpoint file.
    CheckpointInspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learners: Option<usize>,
    #[arg(long)]
    mini_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// asgd or ssgd.
    #[arg(long)]
    mode: Option<String>,
    /// linear, logistic or mlp.
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fault schedule, one `<n>ms|<p>% <learner|all> [soft|hard]` per line.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Watchdog event log (JSON lines).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Any configuration key, overriding the file and the flags above.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("learners", self.learners.map(|v| v.to_string())),
            ("mini_batch", self.mini_batch.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("learning_rate", self.lr.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("provider", self.provider.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("deterministic", self.deterministic.then(|| "true".to_string())),
            ("metrics", s(&self.metrics)),
            ("checkpoint", s(&self.checkpoint)),
            ("schedule", s(&self.schedule)),
            ("events", s(&self.events)),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        c.apply_overrides(self.set.iter().map(String::as_str))?;
        Ok(c)
    }
}

#[derive(Args)]
struct BandwidthArgs {
    /// Workload fixture (CSV).
    fixture: PathBuf,
    /// Target speedup X.
    #[arg(short = 'x', long = "speedup", default_value_t = 1.0)]
    x: f64,
    /// Only report this workload.
    #[arg(long)]
    workload: Option<String>,
    #[arg(long, requires = "workload")]
    mu: Option<u64>,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Protocol description.
    spec: PathBuf,
    #[arg(long)]
    learners: Option<i64>,
    #[arg(long)]
    depth: Option<i64>,
    #[arg(long)]
    iters: Option<i64>,
    #[arg(long)]
    blocking_pull: Option<i64>,
    #[arg(long, default_value_t = 10_000_000)]
    max_states: usize,
    /// Also require an acyclic wait-for graph in every state.
    #[arg(long)]
    wait_for: bool,
    #[arg(long)]
    spurious_wakeups: bool,
    /// Explore every interleaving without partial-order reduction.
    #[arg(long)]
    no_reduction: bool,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Per-learner kill probability of the seeded schedules.
    #[arg(long, default_value_t = 0.3)]
    kill_prob: f64,
    /// Largest accepted accuracy gap to serial SGD.
    #[arg(long, default_value_t = 0.01)]
    parity_band: f64,
    /// Write the full report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Keep per-seed checkpoints on disk here instead of in memory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SHMPS_LOG", "warn")).init();
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Bandwidth(a) => cmd_bandwidth(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Inject(a) => cmd_inject(a),
        Command::CheckpointInspect(a) => cmd_inspect(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn cmd_train(a: &RunArgs) -> Result<ExitCode> {
    let cfg = a.resolve()?;
    let p = cfg.prepare()?;
    let opts = cfg.supervise_options(p.faults.clone());
    let t0 = Instant::now();
    let s = supervise(&p.engine, p.provider.clone(), p.data.clone(), &opts)?;
    let wall = t0.elapsed().as_secs_f64();

    match &cfg.metrics {
        Some(path) => {
            let mut w = MetricsWriter::create(path).with_context(|| format!("writing {}", path.display()))?;
            for r in &s.records {
                w.write(r)?;
            }
            w.flush()?;
        }
        None => {
            for r in &s.records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }

    let eff = p.engine.effective();
    let gradients = eff.total_gradients(&p.data);
    eprintln!(
        "done: {} learners, {} epochs, {} gradients, {} restarts, loss {:.6}, accuracy {}, {:.3}s",
        eff.hp.learners,
        eff.hp.epochs,
        gradients,
        s.restarts,
        s.outcome.final_loss,
        s.outcome.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
        wall
    );
    if let Some(bp) = &cfg.baselines {
        let b = Baselines::load(bp)?;
        match b.get(p.provider.name(), p.provider.dim(), eff.hp.mini_batch) {
            Some(base) => eprintln!("speedup: {:.2}x", gradients as f64 / wall / base.throughput()),
            None => log::warn!("no baseline for this provider, dimension and mini-batch"),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_baseline(a: &RunArgs) -> Result<ExitCode> {
    let mut cfg = a.resolve()?;
    cfg.set("learners", "1")?;
    let Some(out) = cfg.baselines.clone() else {
        bail!("baseline needs a `baselines` path to store the timing in");
    };
    let p = cfg.prepare()?;
    let t0 = Instant::now();
    shmps::run(&p.engine, p.provider.clone(), p.data.clone())?;
    let wall = t0.elapsed().as_secs_f64();
    let base = Baseline {
        wall_s: wall,
        gradients: p.engine.total_gradients(&p.data),
        epochs: p.engine.hp.epochs,
    };
    let mut all = Baselines::load(&out)?;
    all.insert(p.provider.name(), p.provider.dim(), p.engine.hp.mini_batch, base);
    all.save(&out)?;
    println!(
        "{}: {:.3}s, {:.1} gradients/s",
        Baselines::key(p.provider.name(), p.provider.dim(), p.engine.hp.mini_batch),
        wall,
        base.throughput()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bandwidth(a: &BandwidthArgs) -> Result<ExitCode> {
    let report = bandwidth_report(&a.fixture, a.x)?;
    if let Some(w) = &a.workload {
        let rows: Vec<_> = report
            .rows
            .iter()
            .filter(|r| &r.workload == w && a.mu.is_none_or(|m| r.mini_batch == m))
            .collect();
        if rows.is_empty() {
            bail!("no fixture row for {w}{}", a.mu.map_or(String::new(), |m| format!(" mu={m}")));
        }
        for r in rows {
            println!(
                "{} mu={}: {:.4} GB/s (published {:.2}{})",
                r.workload,
                r.mini_batch,
                r.computed_gbps,
                r.published_gbps,
                if r.mismatch { ", MISMATCH" } else { "" }
            );
        }
        return Ok(ExitCode::SUCCESS);
    }
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        println!("{:<10} {:>5} {:>12} {:>12}", "workload", "mu", "RB GB/s", "published");
        for r in &report.rows {
            println!(
                "{:<10} {:>5} {:>12.2} {:>12.2}{}",
                r.workload,
                r.mini_batch,
                r.computed_gbps,
                r.published_gbps,
                if r.mismatch { "  MISMATCH" } else { "" }
            );
        }
    }
    eprintln!("{} rows, {} mismatches, X = {}", report.rows.len(), report.mismatches().len(), a.x);
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: &VerifyArgs) -> Result<ExitCode> {
    let src = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let overrides: Vec<(&str, i64)> = [
        ("learners", a.learners),
        ("depth", a.depth),
        ("iters", a.iters),
        ("blocking_pull", a.blocking_pull),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect();
    let model = Model::parse_and_build(&src, &overrides).with_context(|| format!("{}", a.spec.display()))?;
    let opts = ExploreOptions {
        max_states: a.max_states,
        check_wait_for: a.wait_for,
        spurious_wakeups: a.spurious_wakeups,
        reduction: !a.no_reduction,
        ..ExploreOptions::default()
    };
    Ok(match explore(&model, &opts) {
        Verdict::Verified(st) => {
            println!(
                "verified: {} states, {} transitions, {} final states",
                st.states, st.transitions, st.final_states
            );
            ExitCode::SUCCESS
        }
        Verdict::Counterexample(cx) => {
            println!("{cx}");
            ExitCode::from(1)
        }
        Verdict::BudgetExhausted(st) => {
            println!("budget exhausted after {} states", st.states);
            ExitCode::from(2)
        }
    })
}

fn cmd_inject(a: &InjectArgs) -> Result<ExitCode> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = a.run.resolve()?;
    let p = cfg.prepare()?;
    let campaign = CampaignConfig {
        engine: p.engine.clone(),
        policy: cfg.policy.clone(),
        kill_prob: a.kill_prob,
        parity_band: a.parity_band,
        checkpoint_dir: a.checkpoint_dir.clone(),
        schedule: cfg.schedule.is_some().then(|| p.faults.clone()),
    };
    if let Some(d) = &a.checkpoint_dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let seeds = a.first_seed..a.first_seed + a.seeds;
    let report = run_campaign(&campaign, p.provider.clone(), p.data.clone(), seeds)?;
    for r in &report.runs {
        if let Some(e) = &r.error {
            eprintln!("seed {}: failed: {e}", r.seed);
        } else if !r.parity {
            eprintln!(
                "seed {}: accuracy {:?} outside the parity band of {:?}",
                r.seed, r.accuracy, r.baseline_accuracy
            );
        }
    }
    println!(
        "seeds {}: completed {}, recovered {}, failed {}, parity failures {}",
        report.runs.len(),
        report.completed,
        report.recovered,
        report.failed,
        report.parity_failures
    );
    if let Some(out) = &a.report {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_inspect(a: &InspectArgs) -> Result<ExitCode> {
    let c = Checkpoint::load(&a.path)?;
    print_checkpoint(&c, &a.path, a.json)?;
    Ok(ExitCode::SUCCESS)
}

fn print_checkpoint(c: &Checkpoint, path: &Path, json: bool) -> Result<()> {
    let finite = c.weights.iter().all(|w| w.is_finite());
    let norm = c.weights.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt();
    let (lo, hi) = c
        .weights
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    if json {
        let v = serde_json::json!({
            "path": path.display().to_string(),
            "learners": c.learners,
            "mini_batch": c.mini_batch,
            "learning_rate": c.learning_rate,
            "epochs": c.epochs,
            "timestamp": c.timestamp,
            "applied": c.applied,
            "dim": c.weights.len(),
            "weights_finite": finite,
            "weights_l2": norm,
            "progress": c.progress,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("checkpoint {}", path.display());
    println!(
        "  learners {}  mini_batch {}  learning_rate {}  epochs {}",
        c.learners, c.mini_batch, c.learning_rate, c.epochs
    );
    println!("  timestamp {}  consumed {}", c.timestamp, c.applied);
    println!(
        "  weights: dim {}  min {lo}  max {hi}  l2 {norm:.6}{}",
        c.weights.len(),
        if finite { "" } else { "  NON-FINITE" }
    );
    for (l, p) in c.progress.iter().enumerate() {
        println!("  learner {l}: epoch {} batch {}", p.epoch, p.batch);
    }
    Ok(())
}
