//! Synchronous parameter-server simulation of dithered (DQSG) and nested
//! dithered (NDQSG) distributed SGD.

pub mod config;
pub mod experiment;
pub mod nodes;

use rayon::prelude::*;
use serde::Serialize;

pub use config::{AlphaMode, BatchMode, ExperimentConfig, Groups, ProblemKind, QuantizerChoice, ScheduleChoice};
pub use experiment::{build_problem, run_experiment, thread_pool, write_csv, ExperimentRun, Summary};
pub use nodes::{Group, Scheme, ServerNode, Upload, WorkerMirror, WorkerNode};

use crate::codec::BitReport;
use crate::dither::{mix64, DitherCoordinates};
use crate::error::{invalid, Error, Result};
use crate::nested::{alpha_optimal, failure_prob_bound, is_decoding_failure, NestedConfig, SideInfoModel};
use crate::training::problems::{worker_rows, Batch};
use crate::training::{OptState, Problem};

const BATCH_TAG: u64 = 0x6261_7463_6800_0001;
const NOISE_TAG: u64 = 0x6e6f_6973_6500_0002;

/// Seed of an auxiliary per-round stream, independent of the dither streams.
pub fn stream_seed(master: u64, tag: u64, round: u64, worker: u64) -> u64 {
    mix64(mix64(mix64(master ^ tag).wrapping_add(round)).wrapping_add(worker))
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u64,
    pub wall_ms: f64,
    /// Loss at the parameters the round started from.
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    /// `||avg - grad L||^2` for the broadcast average.
    pub avg_err_sq: Option<f64>,
    pub bits: BitReport,
    pub worker_bits: Vec<BitReport>,
    /// Mean over workers of `||g_tilde_p - g_p||^2`.
    pub excess_var: f64,
    /// Mean and variance over all elements of `g_tilde_p - g_p`.
    pub err_mean: f64,
    pub err_var: f64,
    pub decode_failures: u64,
    /// Expected failure count implied by the per-worker bound at the measured innovation.
    pub failure_bound: f64,
}

/// Result of one upload/decode/aggregate cycle, before any model update.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub average: Vec<f64>,
    pub uploads: Vec<Upload>,
    /// Server reconstructions indexed by worker id.
    pub reconstructions: Vec<Vec<f64>>,
    pub decode_failures: u64,
    pub failure_bound: f64,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub workers: Vec<WorkerNode>,
    pub server: ServerNode,
    pub round: u64,
    master_seed: u64,
    per_worker_batch: usize,
    alpha_mode: AlphaMode,
    coded: bool,
    w_sum: Vec<f64>,
    steps: u64,
    /// Exchanges so far; keys the batch and noise streams.
    draws: u64,
}

impl Cluster {
    /// Workers `0..schemes.len()` with seeds `master_seed + p` and identical replicas of `opt`.
    pub fn new(
        schemes: Vec<Scheme>,
        opt: OptState,
        master_seed: u64,
        per_worker_batch: usize,
        alpha_mode: AlphaMode,
        coded: bool,
    ) -> Result<Self> {
        if schemes.is_empty() {
            return Err(Error::Config("at least one worker is required".into()));
        }
        if per_worker_batch == 0 {
            return Err(Error::Config("per-worker batch must be at least 1".into()));
        }
        let mut seen_nested = false;
        for s in &schemes {
            match s.group() {
                Group::P2 => seen_nested = true,
                Group::P1 if seen_nested => {
                    return Err(Error::Config("nested workers must follow all DQSG workers".into()));
                }
                Group::P1 => {}
            }
        }
        if matches!(schemes[0], Scheme::Nested { .. }) {
            return Err(Error::Config("NDQSG needs at least one DQSG worker to provide side information".into()));
        }
        let n = opt.w.len();
        let workers: Vec<WorkerNode> = schemes
            .into_iter()
            .enumerate()
            .map(|(id, scheme)| WorkerNode {
                id,
                coords: DitherCoordinates::for_worker(master_seed, id),
                scheme,
                onebit: None,
                opt: opt.clone(),
            })
            .collect();
        let server = ServerNode::new(&workers);
        Ok(Self {
            workers,
            server,
            round: 0,
            master_seed,
            per_worker_batch,
            alpha_mode,
            coded,
            w_sum: vec![0.0; n],
            steps: 0,
            draws: 0,
        })
    }

    /// Builds the cluster described by `cfg` for `problem`.
    pub fn from_config(cfg: &ExperimentConfig, problem: &dyn Problem) -> Result<Self> {
        cfg.validate()?;
        let groups = cfg.groups()?;
        let scheme = match cfg.quantizer {
            QuantizerChoice::None => Scheme::Full,
            QuantizerChoice::Dqsg | QuantizerChoice::Ndqsg => Scheme::Dithered {
                cfg: cfg.uniform_cfg()?,
                partitions: cfg.partitions,
            },
            QuantizerChoice::Qsgd | QuantizerChoice::Terngrad => Scheme::Stochastic { cfg: cfg.uniform_cfg()? },
            QuantizerChoice::Onebit => Scheme::OneBit,
        };
        if cfg.partitions > problem.dim() {
            return Err(Error::Config(format!(
                "{} partitions exceed the {} model parameters",
                cfg.partitions,
                problem.dim()
            )));
        }
        let mut schemes = vec![scheme; groups.p1];
        if groups.p2 > 0 {
            let nested = Scheme::Nested {
                cfg: cfg.nested_cfg(cfg.initial_alpha())?,
            };
            schemes.extend(std::iter::repeat_n(nested, groups.p2));
        }
        let b = cfg.per_worker_batch();
        if let Some(n) = problem.dataset_len() {
            if b * cfg.workers > n {
                return Err(Error::Config(format!(
                    "{} workers x {b} rows exceed the {n} dataset rows",
                    cfg.workers
                )));
            }
        }
        let opt = OptState::new(problem.init(), cfg.optimizer, cfg.lr, cfg.schedule(problem.dataset_len()))
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::new(schemes, opt, cfg.master_seed, b, cfg.alpha_mode, cfg.coded)
    }

    pub fn params(&self) -> &[f64] {
        &self.workers[0].opt.w
    }

    /// Mean of the iterates after each completed step.
    pub fn averaged_iterate(&self) -> Option<Vec<f64>> {
        (self.steps > 0).then(|| self.w_sum.iter().map(|s| s / self.steps as f64).collect())
    }

    pub fn groups(&self) -> Groups {
        let p2 = self.workers.iter().filter(|w| w.scheme.group() == Group::P2).count();
        Groups {
            p1: self.workers.len() - p2,
            p2,
        }
    }

    fn batches(&self, problem: &dyn Problem) -> Result<Vec<(Option<Vec<usize>>, u64)>> {
        let p = self.workers.len();
        let b = self.per_worker_batch;
        let noise = |id: usize| stream_seed(self.master_seed, NOISE_TAG, self.draws, id as u64);
        match problem.dataset_len() {
            Some(n) => {
                let seed = stream_seed(self.master_seed, BATCH_TAG, self.draws, 0);
                if p * b > n {
                    return Err(invalid!("{p} workers x {b} rows exceed the {n} dataset rows"));
                }
                let all = worker_rows(n, seed, 0, p * b)?;
                Ok(all.chunks(b).enumerate().map(|(id, c)| (Some(c.to_vec()), noise(id))).collect())
            }
            None => Ok((0..p).map(|id| (None, noise(id))).collect()),
        }
    }

    fn check_sync(&self) -> Result<()> {
        for (w, m) in self.workers.iter().zip(&self.server.mirrors) {
            if w.coords != m.coords {
                return Err(Error::Protocol(format!(
                    "worker {} is at {:?} but the server expects {:?}",
                    w.id, w.coords, m.coords
                )));
            }
            if w.scheme != m.scheme {
                return Err(Error::Protocol(format!("worker {} and the server disagree on the quantizer", w.id)));
            }
        }
        Ok(())
    }

    /// Workers compute and upload gradients; the server decodes and averages.
    /// Advances every dither coordinate but leaves the model untouched.
    pub fn exchange(&mut self, problem: &dyn Problem) -> Result<Exchange> {
        self.check_sync()?;
        let batches = self.batches(problem)?;
        let b = self.per_worker_batch;
        let coded = self.coded;
        let uploads: Vec<Upload> = self
            .workers
            .par_iter_mut()
            .zip(batches.par_iter())
            .map(|(w, (rows, seed))| {
                let batch = match rows {
                    Some(r) => Batch::rows(r, *seed),
                    None => Batch::sampled(b, *seed),
                };
                let g = problem.sg(&w.opt.w, &batch);
                w.encode(g, coded)
            })
            .collect::<Result<_>>()?;
        let ex = self.aggregate(uploads)?;
        self.draws += 1;
        for w in &mut self.workers {
            w.advance()?;
        }
        for m in &mut self.server.mirrors {
            m.coords = m.coords.advance_round()?;
        }
        self.update_alphas()?;
        Ok(ex)
    }

    fn aggregate(&mut self, uploads: Vec<Upload>) -> Result<Exchange> {
        let n = uploads[0].grad.len();
        let mut reconstructions = vec![Vec::new(); uploads.len()];
        let mut avg = vec![0.0; n];
        let mut absorbed = 0usize;
        for up in uploads.iter().filter(|u| self.server.mirrors[u.id].scheme.group() == Group::P1) {
            let rec = self.server.decode_p1(up.id, &up.bytes)?;
            if let Some(local) = &up.local {
                if !bit_identical(local, &rec) {
                    return Err(Error::Protocol(format!(
                        "server reconstruction of worker {} differs from the worker's own",
                        up.id
                    )));
                }
            }
            avg.iter_mut().zip(&rec).for_each(|(a, r)| *a += r);
            absorbed += 1;
            reconstructions[up.id] = rec;
        }
        if absorbed == 0 {
            return Err(Error::Config("no DQSG worker to provide side information".into()));
        }
        avg.iter_mut().for_each(|a| *a /= absorbed as f64);
        let mut failures = 0u64;
        let mut bound = 0.0;
        let p2: Vec<usize> = (0..uploads.len())
            .filter(|&i| self.server.mirrors[uploads[i].id].scheme.group() == Group::P2)
            .collect();
        for up in p2.into_iter().map(|i| &uploads[i]) {
            let (msg, rec) = self.server.decode_p2(up.id, &up.bytes, &avg)?;
            if msg.kappa > 0.0 {
                let stats = innovation_stats(&msg.cfg, msg.kappa as f64, msg.dither, &up.grad, &avg, &rec);
                failures += stats.failures;
                bound += n as f64 * failure_prob_bound(&msg.cfg, &SideInfoModel::gaussian(stats.true_sigma_sq.sqrt()));
                let mirror = &mut self.server.mirrors[up.id];
                mirror.sigma_sq_sum += stats.estimated_sigma_sq;
                mirror.sigma_rounds += 1;
            }
            let m = absorbed as f64;
            avg.iter_mut().zip(&rec).for_each(|(a, r)| *a = (m * *a + r) / (m + 1.0));
            absorbed += 1;
            reconstructions[up.id] = rec;
        }
        Ok(Exchange {
            average: avg,
            uploads,
            reconstructions,
            decode_failures: failures,
            failure_bound: bound,
        })
    }

    /// Shrinkage for the next round, broadcast together with the average.
    fn update_alphas(&mut self) -> Result<()> {
        if self.alpha_mode != AlphaMode::Auto {
            return Ok(());
        }
        for (w, m) in self.workers.iter_mut().zip(&mut self.server.mirrors) {
            let Scheme::Nested { cfg } = m.scheme else { continue };
            if m.sigma_rounds == 0 {
                continue;
            }
            let sigma = (m.sigma_sq_sum / m.sigma_rounds as f64).sqrt();
            let alpha = alpha_optimal(cfg.delta1(), sigma).unwrap_or(1.0);
            let next = Scheme::Nested { cfg: cfg.with_alpha(alpha)? };
            m.scheme = next;
            w.scheme = next;
        }
        Ok(())
    }

    /// Every replica applies the broadcast average.
    pub fn apply(&mut self, average: &[f64]) -> Result<()> {
        self.workers.par_iter_mut().try_for_each(|w| w.opt.step(average))?;
        let w0 = &self.workers[0].opt.w;
        if self.workers.iter().any(|w| !bit_identical(&w.opt.w, w0)) {
            return Err(Error::Protocol("model replicas diverged".into()));
        }
        self.w_sum.iter_mut().zip(w0).for_each(|(s, w)| *s += w);
        self.steps += 1;
        self.round += 1;
        Ok(())
    }

    /// One synchronous round; `evaluate` adds loss and gradient metrics.
    pub fn run_round(&mut self, problem: &dyn Problem, evaluate: bool) -> Result<RoundReport> {
        let round = self.round;
        let exact = evaluate.then(|| (problem.loss(self.params()), problem.exact_grad(self.params())));
        let ex = self.exchange(problem)?;
        let mut bits = BitReport::default();
        for up in &ex.uploads {
            bits.accumulate(&up.bits);
        }
        let p = ex.uploads.len() as f64;
        let mut excess = 0.0;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for (up, rec) in ex.uploads.iter().zip(&ex.reconstructions) {
            for (r, g) in rec.iter().zip(&up.grad) {
                let e = r - g;
                excess += e * e;
                sum += e;
                sum_sq += e * e;
            }
            count += up.grad.len();
        }
        let err_mean = sum / count as f64;
        let report = RoundReport {
            round,
            wall_ms: 0.0,
            loss: exact.as_ref().map(|(l, _)| *l),
            grad_norm: exact.as_ref().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>().sqrt()),
            avg_err_sq: exact
                .as_ref()
                .map(|(_, g)| g.iter().zip(&ex.average).map(|(a, b)| (a - b).powi(2)).sum()),
            worker_bits: ex.uploads.iter().map(|u| u.bits).collect(),
            bits,
            excess_var: excess / p,
            err_mean,
            err_var: (sum_sq / count as f64 - err_mean * err_mean).max(0.0),
            decode_failures: ex.decode_failures,
            failure_bound: ex.failure_bound,
        };
        self.apply(&ex.average)?;
        Ok(report)
    }
}

struct InnovationStats {
    failures: u64,
    true_sigma_sq: f64,
    estimated_sigma_sq: f64,
}

/// Failure count and innovation variance in `kappa`-normalized units.
fn innovation_stats(
    cfg: &NestedConfig,
    kappa: f64,
    coords: DitherCoordinates,
    grad: &[f64],
    side: &[f64],
    rec: &[f64],
) -> InnovationStats {
    let a2 = cfg.alpha() * cfg.alpha();
    let mut failures = 0;
    let mut z_sq = 0.0;
    let mut est = 0.0;
    for (i, ((g, y), r)) in grad.iter().zip(side).zip(rec).enumerate() {
        let (x, y, xh) = (g / kappa, y / kappa, r / kappa);
        if is_decoding_failure(x, y, cfg, coords.dither_at(i as u64, cfg.delta1())) {
            failures += 1;
        }
        z_sq += (x - y) * (x - y);
        // (x_hat - y) / alpha^2 = z - e / alpha without failure.
        est += ((xh - y) / a2).powi(2);
    }
    let n = grad.len() as f64;
    InnovationStats {
        failures,
        true_sigma_sq: z_sq / n,
        estimated_sigma_sq: (est / n - cfg.delta1() * cfg.delta1() / (12.0 * a2)).max(0.0),
    }
}

fn bit_identical(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// One DQSG round; every worker must be decodable on its own.
pub fn run_dqsgd_round(cluster: &mut Cluster, problem: &dyn Problem) -> Result<RoundReport> {
    if cluster.groups().p2 > 0 {
        return Err(Error::Config("DQSG rounds cannot include nested workers".into()));
    }
    cluster.run_round(problem, true)
}

/// One NDQSG round: P1 decoded and averaged first, then P2 in ascending id.
pub fn run_ndqsg_round(cluster: &mut Cluster, problem: &dyn Problem) -> Result<RoundReport> {
    if cluster.groups().p1 == 0 {
        return Err(Error::Config("NDQSG needs at least one DQSG worker".into()));
    }
    cluster.run_round(problem, true)
}

#[cfg(test)]
mod tests;
