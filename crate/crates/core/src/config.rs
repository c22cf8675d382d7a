//! Run configuration: one TOML document covering every stage of a desk run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvaluatorConfig;
use crate::model::GeneratorConfig;
use crate::numerics::AdamConfig;
use crate::objectives::{LossWeights, UtilitySpec};
use crate::simulator::{LoggingPolicy, WorldConfig};
use crate::train::TrainConfig;

/// File locations. Relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_log: PathBuf,
    pub test_log: PathBuf,
    pub generator: PathBuf,
    pub evaluator: PathBuf,
    pub ar: PathBuf,
    /// Reports, loss curves and generated slates land here.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_log: "train.jsonl".into(),
            test_log: "test.jsonl".into(),
            generator: "generator.ckpt".into(),
            evaluator: "evaluator.ckpt".into(),
            ar: "ar.ckpt".into(),
            out_dir: "run".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub train_requests: usize,
    pub test_requests: usize,
    pub policy: LoggingPolicy,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            train_requests: 50_000,
            test_requests: 2_000,
            policy: LoggingPolicy::Softmax { temperature: 0.5 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the simulated logs. Models and shuffles carry their own seeds.
    pub seed: u64,
    pub paths: Paths,
    pub world: WorldConfig,
    pub simulate: SimulateConfig,
    pub generator: GeneratorConfig,
    pub evaluator: EvaluatorConfig,
    pub decode: DecodeConfig,
    pub utility: UtilitySpec,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub evaluator_train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 3,
            batch_size: 256,
            adam: AdamConfig::default(),
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            paths: Paths::default(),
            world: WorldConfig::default(),
            simulate: SimulateConfig::default(),
            generator: GeneratorConfig::default(),
            evaluator: EvaluatorConfig::default(),
            decode: DecodeConfig::default(),
            utility: UtilitySpec::default(),
            loss: LossWeights::default(),
            train: train.clone(),
            evaluator_train: train,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Checks every section and the cross-section shape agreements.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.generator.validate()?;
        self.evaluator.validate()?;
        self.decode.validate()?;
        self.utility.validate()?;
        self.train.validate()?;
        self.evaluator_train.validate()?;
        self.bench.validate()?;
        if !(-1.0..=1.0).contains(&self.loss.rho) || !(self.loss.omega >= 0.0) {
            return Err(Error::Config(format!(
                "loss rho {} must lie in [-1, 1] and omega {} must be non-negative",
                self.loss.rho, self.loss.omega
            )));
        }
        let fd = self.world.feature_dim();
        if self.generator.d_x != fd || self.evaluator.d_x != fd {
            return Err(Error::Config(format!(
                "world emits {fd} features but generator.d_x = {} and evaluator.d_x = {}",
                self.generator.d_x, self.evaluator.d_x
            )));
        }
        if self.generator.m != self.world.m() || self.evaluator.m < self.generator.m {
            return Err(Error::Config(format!(
                "slate length disagrees: world {}, generator {}, evaluator {}",
                self.world.m(),
                self.generator.m,
                self.evaluator.m
            )));
        }
        if self.generator.n_max < self.world.max_candidates {
            return Err(Error::Config(format!(
                "generator.n_max {} below world.max_candidates {}",
                self.generator.n_max, self.world.max_candidates
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `train.adam.lr` and `value` is a TOML literal. Bare words are taken as
    /// strings. The result is validated.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    if last.is_empty() {
        return Err(Error::Config(format!("empty key in `{key}`")));
    }
    // Absent keys are allowed so optional fields can be set; unknown ones
    // are rejected when the document is deserialized.
    table.insert(last.to_string(), value);
    Ok(())
}
