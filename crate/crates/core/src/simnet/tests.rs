use super::*;
use crate::quant::{dithered_decode, dithered_encode, Gradient, UniformQuantizerCfg};
use crate::training::{LrSchedule, OptimizerKind, Quadratic};

/// Every worker sees the same fixed gradient.
struct Constant(Vec<f64>);

impl Problem for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn init(&self) -> Vec<f64> {
        vec![0.0; self.0.len()]
    }
    fn loss(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.0).map(|(a, b)| a * b).sum()
    }
    fn exact_grad(&self, _: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
    fn sg(&self, _: &[f64], _: &Batch<'_>) -> Vec<f64> {
        self.0.clone()
    }
}

fn sgd(n: usize, lr: f64) -> OptState {
    OptState::new(vec![0.0; n], OptimizerKind::Sgd, lr, LrSchedule::Constant).unwrap()
}

fn dithered(delta: f64) -> Scheme {
    Scheme::Dithered {
        cfg: UniformQuantizerCfg::from_delta(delta).unwrap(),
        partitions: 1,
    }
}

fn nested(alpha: f64) -> Scheme {
    Scheme::Nested {
        cfg: NestedConfig::new(1.0 / 3.0, 3, alpha).unwrap(),
    }
}

#[test]
fn fine_quantization_tracks_plain_sgd() {
    let q = Quadratic::isotropic(10, 1.0, 0.5, 1).unwrap();
    let opt = OptState::new(q.init(), OptimizerKind::Sgd, 0.05, LrSchedule::Constant).unwrap();
    let mut cluster = Cluster::new(vec![dithered(1.0 / (1u64 << 20) as f64)], opt.clone(), 9, 4, AlphaMode::One, false)
        .unwrap();
    let mut plain = opt;
    for t in 0..100 {
        let seed = stream_seed(9, NOISE_TAG, t, 0);
        let g = q.sg(&plain.w, &Batch::sampled(4, seed));
        plain.step(&g).unwrap();
        run_dqsgd_round(&mut cluster, &q).unwrap();
    }
    let diff: f64 = cluster.params().iter().zip(&plain.w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = plain.w.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-4, "{}", diff / norm);
}

#[test]
fn average_of_two_workers_is_mean_of_reconstructions() {
    let problem = Constant(vec![0.6, -0.2]);
    let mut cluster = Cluster::new(vec![dithered(0.5), dithered(0.5)], sgd(2, 0.1), 3, 1, AlphaMode::One, true).unwrap();
    let cfg = UniformQuantizerCfg::from_delta(0.5).unwrap();
    let g = Gradient::from_vec(vec![0.6, -0.2]).unwrap();
    let expect: Vec<f64> = (0..2)
        .map(|p| {
            let c = DitherCoordinates::for_worker(3, p);
            dithered_decode::<f64>(&dithered_encode(&g, &cfg, c).unwrap(), &cfg, c).unwrap().into_vec()
        })
        .fold(vec![0.0; 2], |acc, r| acc.iter().zip(&r).map(|(a, b)| a + b / 2.0).collect());
    let ex = cluster.exchange(&problem).unwrap();
    for (a, e) in ex.average.iter().zip(&expect) {
        assert!((a - e).abs() < 1e-15);
    }
    for rec in &ex.reconstructions {
        for (r, g) in rec.iter().zip([0.6, -0.2]) {
            assert!((r - g).abs() <= 0.6 * 0.25 + 1e-7);
        }
    }
}

#[test]
fn empty_nested_group_matches_dqsg() {
    let base = ExperimentConfig {
        rounds: 30,
        workers: 4,
        ..Default::default()
    };
    let ndqsg = ExperimentConfig {
        quantizer: QuantizerChoice::Ndqsg,
        groups: Some("4:0".into()),
        ..base.clone()
    };
    let a = run_experiment(&base).unwrap();
    let b = run_experiment(&ndqsg).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn zero_innovation_decodes_within_fine_step() {
    let problem = Constant(vec![0.3, -0.9, 0.05, 1.2, -0.4]);
    let mut cluster = Cluster::new(vec![dithered(1.0 / 64.0), nested(1.0)], sgd(5, 0.1), 5, 1, AlphaMode::One, true)
        .unwrap();
    for _ in 0..50 {
        let ex = cluster.exchange(&problem).unwrap();
        assert_eq!(ex.decode_failures, 0);
        for (r, g) in ex.reconstructions[1].iter().zip(&problem.0) {
            assert!((r - g).abs() <= 1.2 * (1.0 / 6.0 + 1.0 / 128.0) + 1e-6);
        }
    }
}

#[test]
fn nested_workers_cut_raw_bits() {
    let q = Quadratic::isotropic(50, 1.0, 0.1, 2).unwrap();
    let mut schemes = vec![dithered(0.5); 4];
    schemes.extend([nested(1.0); 4]);
    let mut cluster = Cluster::new(schemes, sgd(50, 0.1), 1, 8, AlphaMode::One, true).unwrap();
    let r = run_ndqsg_round(&mut cluster, &q).unwrap();
    let n = 50u64;
    let expect = 4.0 * crate::codec::raw_bits(n, 5, 1) + 4.0 * crate::codec::raw_bits(n, 3, 1);
    assert!((r.bits.raw_bits - expect).abs() < 1e-9);
    assert!(r.bits.raw_bits < 8.0 * crate::codec::raw_bits(n, 5, 1));
    assert!(r.worker_bits.iter().all(|b| b.coded_bits > 0));
}

#[test]
fn desync_is_a_protocol_error() {
    let q = Quadratic::isotropic(4, 1.0, 0.1, 2).unwrap();
    let mut cluster = Cluster::new(vec![dithered(0.5); 2], sgd(4, 0.1), 1, 2, AlphaMode::One, true).unwrap();
    run_dqsgd_round(&mut cluster, &q).unwrap();
    cluster.workers[1].coords.round += 1;
    assert!(matches!(run_dqsgd_round(&mut cluster, &q), Err(Error::Protocol(_))));
}

#[test]
fn grouping_rules() {
    let q = Quadratic::isotropic(4, 1.0, 0.1, 2).unwrap();
    assert!(Cluster::new(vec![nested(1.0)], sgd(4, 0.1), 0, 1, AlphaMode::One, true).is_err());
    assert!(Cluster::new(vec![dithered(0.5), nested(1.0), dithered(0.5)], sgd(4, 0.1), 0, 1, AlphaMode::One, true).is_err());
    let mut c = Cluster::new(vec![dithered(0.5), nested(1.0)], sgd(4, 0.1), 0, 1, AlphaMode::One, true).unwrap();
    assert!(matches!(run_dqsgd_round(&mut c, &q), Err(Error::Config(_))));
    run_ndqsg_round(&mut c, &q).unwrap();
}

#[test]
fn every_scheme_round_trips_through_bytes() {
    let q = Quadratic::isotropic(20, 1.0, 1.0, 3).unwrap();
    let cfg = UniformQuantizerCfg::from_delta(0.25).unwrap();
    let schemes = vec![
        Scheme::Full,
        dithered(0.25),
        Scheme::Dithered { cfg, partitions: 3 },
        Scheme::Stochastic { cfg },
        Scheme::OneBit,
        nested(1.0),
    ];
    let mut cluster = Cluster::new(schemes, sgd(20, 0.05), 4, 2, AlphaMode::One, true).unwrap();
    for _ in 0..20 {
        let r = cluster.run_round(&q, true).unwrap();
        assert!(r.excess_var.is_finite());
    }
    assert_eq!(cluster.round, 20);
    assert!(cluster.workers.iter().all(|w| w.coords.round == 20));
}

#[test]
fn auto_alpha_shrinks_under_large_innovation() {
    let q = Quadratic::isotropic(200, 1.0, 3.0, 4).unwrap();
    let mut cluster = Cluster::new(vec![dithered(0.5), nested(1.0)], sgd(200, 0.01), 6, 1, AlphaMode::Auto, false)
        .unwrap();
    for _ in 0..5 {
        cluster.run_round(&q, false).unwrap();
    }
    let Scheme::Nested { cfg } = cluster.workers[1].scheme else { unreachable!() };
    assert!(cfg.alpha() < 1.0);
    assert_eq!(cluster.server.mirrors[1].scheme, cluster.workers[1].scheme);
}

#[test]
fn csv_is_deterministic_and_stamped() {
    let cfg = ExperimentConfig {
        rounds: 20,
        ..Default::default()
    };
    let render = || {
        let run = run_experiment(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &cfg, &run.reports).unwrap();
        String::from_utf8(buf).unwrap()
    };
    let a = render();
    assert_eq!(a, render());
    let mut lines = a.lines();
    assert!(lines.next().unwrap().starts_with("# gradquant "));
    assert!(lines.next().unwrap().starts_with("# config {"));
    assert_eq!(lines.next().unwrap(), experiment::CSV_COLUMNS.join(","));
    assert_eq!(a.lines().count(), 23);
}

#[test]
fn dataset_problems_train() {
    for problem in [ProblemKind::LeastSquares, ProblemKind::Logistic, ProblemKind::Mlp] {
        let cfg = ExperimentConfig {
            problem,
            rounds: 200,
            lr: 0.1,
            dim: 5,
            ..Default::default()
        };
        let run = run_experiment(&cfg).unwrap();
        let first = run.reports[0].loss.unwrap();
        assert!(run.summary.final_loss < first, "{problem:?}: {} !< {first}", run.summary.final_loss);
    }
}
