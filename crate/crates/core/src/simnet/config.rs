//! Experiment configuration: a flat TOML table validated before any compute.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nested::NestedConfig;
use crate::quant::UniformQuantizerCfg;
use crate::training::{LrSchedule, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    LeastSquares,
    Logistic,
    /// 2-16-2 tanh network on two moons.
    Mlp,
    /// 784-300-100-10 network on MNIST IDX files from `data_dir`.
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerChoice {
    /// Full-precision `f32` gradients.
    None,
    Dqsg,
    Qsgd,
    Terngrad,
    Onebit,
    Ndqsg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    Constant,
    Epoch,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// `batch` rows split evenly across workers.
    Global,
    /// `batch` rows on every worker.
    PerWorker,
}

/// Shrinkage of the nested quantizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    One,
    /// From the server's running estimate of the innovation variance.
    Auto,
    Fixed(f64),
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" | "1" => Ok(Self::One),
            "auto" => Ok(Self::Auto),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|a| *a > 0.0 && *a <= 1.0)
                .map(Self::Fixed)
                .ok_or_else(|| Error::Config(format!("alpha_mode must be one, auto or a number in (0, 1], got {other:?}"))),
        }
    }
}

impl std::fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::One => f.write_str("one"),
            Self::Auto => f.write_str("auto"),
            Self::Fixed(a) => write!(f, "{a}"),
        }
    }
}

impl Serialize for AlphaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlphaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => AlphaMode::from_str(&a.to_string()),
            Raw::Text(t) => AlphaMode::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub quantizer: QuantizerChoice,
    /// Step of the uniform quantizers; `1/delta` must be an integer.
    pub delta: f64,
    /// Fine step of the nested quantizers.
    pub delta1: f64,
    pub nesting_k: u32,
    pub alpha_mode: AlphaMode,
    pub workers: usize,
    /// `"p1:p2"` split of the workers for NDQSG; half and half when absent.
    pub groups: Option<String>,
    pub partitions: usize,
    pub batch: usize,
    pub batch_mode: BatchMode,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: ScheduleChoice,
    pub decay: f64,
    /// Rounds per epoch; the dataset size over the global batch when absent.
    pub epoch_rounds: Option<u64>,
    /// Offset of the inverse-time schedule.
    pub t0: f64,
    pub rounds: u64,
    pub master_seed: u64,
    /// Seed of the synthetic problem instance, independent of the training seed.
    pub problem_seed: u64,
    pub dim: usize,
    /// Per-element gradient noise of the quadratic problem.
    pub noise: f64,
    /// Distance from the origin to the quadratic optimum.
    pub radius: f64,
    pub data_size: usize,
    pub data_dir: Option<PathBuf>,
    /// Evaluate loss and gradient norm every this many rounds.
    pub eval_every: u64,
    /// Arithmetic-code every message to report coded bits.
    pub coded: bool,
    /// Record wall-clock time; off keeps same-seed CSVs byte-identical.
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Quadratic,
            quantizer: QuantizerChoice::Dqsg,
            delta: 0.5,
            delta1: 1.0 / 3.0,
            nesting_k: 3,
            alpha_mode: AlphaMode::One,
            workers: 4,
            groups: None,
            partitions: 1,
            batch: 256,
            batch_mode: BatchMode::Global,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            schedule: ScheduleChoice::Epoch,
            decay: 0.98,
            epoch_rounds: None,
            t0: 100.0,
            rounds: 500,
            master_seed: 0,
            problem_seed: 0,
            dim: 10,
            noise: 1.0,
            radius: 1.0,
            data_size: 1024,
            data_dir: None,
            eval_every: 1,
            coded: true,
            wall_clock: false,
        }
    }
}

/// Worker counts of the two NDQSG groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Groups {
    pub p1: usize,
    pub p2: usize,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides using TOML value syntax; bare words are
    /// taken as strings.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| cfg_err(e.to_string()))?;
        for (key, raw) in overrides {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn groups(&self) -> Result<Groups> {
        if self.quantizer != QuantizerChoice::Ndqsg {
            return Ok(Groups {
                p1: self.workers,
                p2: 0,
            });
        }
        let g = match &self.groups {
            None => Groups {
                p1: self.workers.div_ceil(2),
                p2: self.workers / 2,
            },
            Some(split) => {
                let (a, b) = split
                    .split_once(':')
                    .ok_or_else(|| cfg_err(format!("groups must look like \"p1:p2\", got {split:?}")))?;
                let parse = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| cfg_err(format!("bad group size {x:?}")))
                };
                Groups {
                    p1: parse(a)?,
                    p2: parse(b)?,
                }
            }
        };
        if g.p1 + g.p2 != self.workers {
            return Err(cfg_err(format!("groups {}:{} do not add up to {} workers", g.p1, g.p2, self.workers)));
        }
        if g.p1 == 0 {
            return Err(cfg_err("NDQSG needs at least one DQSG worker to provide side information"));
        }
        Ok(g)
    }

    /// Uniform quantizer of the DQSG/QSGD workers.
    pub fn uniform_cfg(&self) -> Result<UniformQuantizerCfg> {
        if self.quantizer == QuantizerChoice::Terngrad {
            return UniformQuantizerCfg::normalized(1);
        }
        UniformQuantizerCfg::from_delta(self.delta).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn nested_cfg(&self, alpha: f64) -> Result<NestedConfig> {
        NestedConfig::new(self.delta1, self.nesting_k, alpha).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn initial_alpha(&self) -> f64 {
        match self.alpha_mode {
            AlphaMode::Fixed(a) => a,
            AlphaMode::One | AlphaMode::Auto => 1.0,
        }
    }

    /// Rows per worker per round.
    pub fn per_worker_batch(&self) -> usize {
        match self.batch_mode {
            BatchMode::Global => self.batch / self.workers.max(1),
            BatchMode::PerWorker => self.batch,
        }
    }

    pub fn schedule(&self, dataset_len: Option<usize>) -> LrSchedule {
        match self.schedule {
            ScheduleChoice::Constant => LrSchedule::Constant,
            ScheduleChoice::Inverse => LrSchedule::Inverse { t0: self.t0 },
            ScheduleChoice::Epoch => {
                let global = (self.per_worker_batch() * self.workers).max(1);
                let epoch_rounds = self
                    .epoch_rounds
                    .or_else(|| dataset_len.map(|n| (n / global).max(1) as u64))
                    .unwrap_or(100);
                LrSchedule::Epoch {
                    decay: self.decay,
                    epoch_rounds,
                }
            }
        }
    }

    /// Checks everything that can be checked without building the problem.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(cfg_err("workers must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(cfg_err("rounds must be at least 1"));
        }
        if self.batch == 0 || self.per_worker_batch() == 0 {
            return Err(cfg_err(format!("batch {} leaves no rows for {} workers", self.batch, self.workers)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(cfg_err(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.t0 > 0.0) {
            return Err(cfg_err("t0 must be positive"));
        }
        if self.partitions == 0 {
            return Err(cfg_err("partitions must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(cfg_err("eval_every must be at least 1"));
        }
        if !(self.noise >= 0.0) || !(self.radius >= 0.0) {
            return Err(cfg_err("noise and radius must be nonnegative"));
        }
        if matches!(self.problem, ProblemKind::Quadratic | ProblemKind::LeastSquares) && self.dim == 0 {
            return Err(cfg_err("dim must be at least 1"));
        }
        if self.problem == ProblemKind::Mnist && self.data_dir.is_none() {
            return Err(cfg_err("the mnist problem needs data_dir"));
        }
        if matches!(
            self.quantizer,
            QuantizerChoice::Dqsg | QuantizerChoice::Qsgd | QuantizerChoice::Ndqsg | QuantizerChoice::Terngrad
        ) {
            self.uniform_cfg()?;
        }
        if self.quantizer == QuantizerChoice::Ndqsg {
            self.nested_cfg(self.initial_alpha())?;
        }
        self.groups()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_toml_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_toml(
            "problem = \"mlp\"\nquantizer = \"ndqsg\"\nworkers = 8\ngroups = \"5:3\"\nalpha_mode = \"auto\"\n",
        )
        .unwrap();
        assert_eq!(cfg.problem, ProblemKind::Mlp);
        assert_eq!(cfg.groups().unwrap(), Groups { p1: 5, p2: 3 });
        assert_eq!(cfg.alpha_mode, AlphaMode::Auto);
        assert!(matches!(ExperimentConfig::from_toml("wrokers = 3"), Err(Error::Config(_))));
        let fixed = ExperimentConfig::from_toml("alpha_mode = 0.8").unwrap();
        assert_eq!(fixed.alpha_mode, AlphaMode::Fixed(0.8));
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "workers = 0",
            "delta = 0.3",
            "quantizer = \"ndqsg\"\nworkers = 4\ngroups = \"0:4\"",
            "quantizer = \"ndqsg\"\ngroups = \"1:1\"",
            "batch = 2\nworkers = 4",
            "lr = -1.0",
            "nesting_k = 1\nquantizer = \"ndqsg\"",
            "alpha_mode = \"sometimes\"",
            "problem = \"mnist\"",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_and_round_trip() {
        let base = ExperimentConfig::default();
        let cfg = base
            .with_overrides([("workers", "8"), ("quantizer", "ndqsg"), ("alpha_mode", "auto"), ("delta", "0.25")])
            .unwrap();
        assert_eq!(cfg.workers, 8);
        assert_eq!(cfg.quantizer, QuantizerChoice::Ndqsg);
        assert_eq!(cfg.delta, 0.25);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(base.with_overrides([("bogus", "1")]).is_err());
        assert!(base.with_overrides([("workers", "0")]).is_err());
    }

    #[test]
    fn default_groups_split_in_half() {
        let cfg = ExperimentConfig {
            quantizer: QuantizerChoice::Ndqsg,
            workers: 5,
            ..Default::default()
        };
        assert_eq!(cfg.groups().unwrap(), Groups { p1: 3, p2: 2 });
    }
}
