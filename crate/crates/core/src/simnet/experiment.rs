use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use super::config::{ExperimentConfig, ProblemKind};
use super::{Cluster, RoundReport};
use crate::error::{Error, Result};
use crate::training::idx::load_mnist;
use crate::training::{Dataset, LeastSquares, Logistic, Mlp, Problem, Quadratic};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Rayon pool capped by `GRADQUANT_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("GRADQUANT_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("GRADQUANT_THREADS must be a positive integer, got {raw:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Box<dyn Problem>> {
    Ok(match cfg.problem {
        ProblemKind::Quadratic => Box::new(Quadratic::isotropic(cfg.dim, cfg.radius, cfg.noise, cfg.problem_seed)?),
        ProblemKind::LeastSquares => Box::new(LeastSquares::random(cfg.data_size, cfg.dim, cfg.problem_seed)),
        ProblemKind::Logistic => Box::new(Logistic::new(
            Dataset::two_blobs(cfg.data_size, 1.0, cfg.problem_seed),
            1e-3,
        )?),
        ProblemKind::Mlp => Box::new(Mlp::moons(cfg.data_size, cfg.problem_seed)),
        ProblemKind::Mnist => {
            let dir = cfg.data_dir.as_ref().ok_or_else(|| Error::Config("mnist needs data_dir".into()))?;
            Box::new(Mlp::new(vec![784, 300, 100, 10], load_mnist(dir)?, cfg.problem_seed)?)
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub version: String,
    pub config: ExperimentConfig,
    pub rounds: u64,
    pub dim: usize,
    pub final_loss: f64,
    /// Loss at the mean of all iterates.
    pub final_avg_loss: f64,
    pub final_grad_norm: f64,
    /// `final_loss - L(w*)` when the optimum is known.
    pub final_gap: Option<f64>,
    pub final_avg_gap: Option<f64>,
    pub total_raw_bits: f64,
    pub total_coded_bits: u64,
    pub total_entropy_bits: f64,
    /// Raw bits per round of one worker in each group.
    pub p1_raw_bits_per_worker: f64,
    pub p2_raw_bits_per_worker: Option<f64>,
    pub mean_excess_var: f64,
    pub decode_failures: u64,
    pub failure_bound: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub final_params: Vec<f64>,
}

/// Runs `cfg.rounds` synchronous rounds. Deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let mut cluster = Cluster::from_config(cfg, problem.as_ref())?;
    let pool = thread_pool()?;
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    pool.install(|| -> Result<()> {
        for t in 0..cfg.rounds {
            let evaluate = t % cfg.eval_every == 0 || t + 1 == cfg.rounds;
            let tick = Instant::now();
            let mut r = cluster.run_round(problem.as_ref(), evaluate)?;
            if cfg.wall_clock {
                r.wall_ms = tick.elapsed().as_secs_f64() * 1e3;
            }
            if let Some(l) = r.loss.filter(|l| !l.is_finite()) {
                return Err(Error::Diverged(format!("loss {l} at round {t}")));
            }
            reports.push(r);
        }
        Ok(())
    })?;
    let w = cluster.params().to_vec();
    let avg = cluster.averaged_iterate().unwrap_or_else(|| w.clone());
    let final_loss = problem.loss(&w);
    let final_avg_loss = problem.loss(&avg);
    let best = problem.optimum().map(|o| problem.loss(&o));
    let n = problem.dim();
    let groups = cluster.groups();
    let summary = Summary {
        version: VERSION.to_string(),
        config: cfg.clone(),
        rounds: cfg.rounds,
        dim: n,
        final_loss,
        final_avg_loss,
        final_grad_norm: problem.exact_grad(&w).iter().map(|x| x * x).sum::<f64>().sqrt(),
        final_gap: best.map(|b| final_loss - b),
        final_avg_gap: best.map(|b| final_avg_loss - b),
        total_raw_bits: reports.iter().map(|r| r.bits.raw_bits).sum(),
        total_coded_bits: reports.iter().map(|r| r.bits.coded_bits).sum(),
        total_entropy_bits: reports.iter().map(|r| r.bits.entropy_bits).sum(),
        p1_raw_bits_per_worker: cluster.workers[0].scheme.raw_bits(n),
        p2_raw_bits_per_worker: (groups.p2 > 0).then(|| cluster.workers[groups.p1].scheme.raw_bits(n)),
        mean_excess_var: reports.iter().map(|r| r.excess_var).sum::<f64>() / reports.len() as f64,
        decode_failures: reports.iter().map(|r| r.decode_failures).sum(),
        failure_bound: reports.iter().map(|r| r.failure_bound).sum(),
        wall_ms: if cfg.wall_clock { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
    };
    Ok(ExperimentRun {
        reports,
        summary,
        final_params: w,
    })
}

pub const CSV_COLUMNS: [&str; 9] = [
    "round",
    "wall_ms",
    "loss",
    "grad_norm",
    "raw_bits_total",
    "coded_bits_total",
    "entropy_bits_total",
    "excess_var",
    "decode_failures",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `#`-prefixed provenance lines followed by one CSV row per round.
pub fn write_csv<W: Write>(mut out: W, cfg: &ExperimentConfig, reports: &[RoundReport]) -> Result<()> {
    writeln!(out, "# gradquant {VERSION}")?;
    writeln!(out, "# config {}", serde_json::to_string(cfg)?)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            r.wall_ms.to_string(),
            opt(r.loss),
            opt(r.grad_norm),
            r.bits.raw_bits.to_string(),
            r.bits.coded_bits.to_string(),
            r.bits.entropy_bits.to_string(),
            r.excess_var.to_string(),
            r.decode_failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
