//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! preset = "tiny"     # S, M, L, G1 or tiny; fields below override it
//! blocks = 2
//!
//! [loss]
//! lambda = 0.005
//!
//! [train]
//! steps = 500
//!
//! [data]
//! pairs = 50
//! snr = { mode = "discrete", levels = [0, 5, 10, 15] }
//!
//! [output]
//! dir = "runs/smoke"
//! ```
//!
//! Unknown keys anywhere are errors. Relative paths resolve against the
//! directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{make_pair, read_manifest, MixSpec, NoiseKind, Pair, SnrMode};
use crate::error::{Error, Result};
use crate::gan::LossWeights;
use crate::model::ModelConfig;
use crate::train::{OptimizerKind, TrainConfig};

/// Where training pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest written by `gen-corpus`; when absent pairs are drawn from `seed`.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    /// Training pairs drawn when there is no manifest.
    pub pairs: usize,
    /// Extra pairs drawn after the training pairs and kept out of training.
    pub held_out: usize,
    pub duration_s: f64,
    pub kinds: Vec<NoiseKind>,
    pub snr: SnrMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            seed: 2024,
            pairs: 200,
            held_out: 0,
            duration_s: 1.0,
            kinds: NoiseKind::ALL.to_vec(),
            snr: SnrMode::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.snr.validate()?;
        if self.manifest.is_none() && (self.pairs == 0 || self.kinds.is_empty()) {
            return Err(Error::Config("data needs a manifest or a positive pair count and at least one noise kind".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("duration_s {} must be positive", self.duration_s)));
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<(Vec<MixSpec>, Vec<MixSpec>)> {
        match &self.manifest {
            Some(path) => Ok((read_manifest(path)?, Vec::new())),
            None => {
                let mut all = MixSpec::draw_many(self.seed, self.pairs + self.held_out, &self.snr, &self.kinds, self.duration_s)?;
                let held = all.split_off(self.pairs);
                Ok((all, held))
            }
        }
    }

    /// Training and held-out pairs.
    pub fn load(&self) -> Result<(Vec<Pair>, Vec<Pair>)> {
        let (train, held) = self.specs()?;
        let make = |s: &[MixSpec]| s.iter().map(make_pair).collect::<Result<Vec<_>>>();
        let train = make(&train)?;
        if let Some(p) = train.iter().find(|p| p.clean.len() != train[0].clean.len()) {
            return Err(Error::Config(format!(
                "training pairs must share one length for batching ({} vs {} samples)",
                p.clean.len(),
                train[0].clean.len()
            )));
        }
        Ok((train, make(&held)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default") }
    }
}

impl OutputConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.tse")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:07}.tse"))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train.log")
    }
}

/// Everything a training or evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    model: Table,
    #[serde(default)]
    loss: LossWeights,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    output: OutputConfig,
}

/// Overwrites `base` with `over`, descending into tables present in both.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn model_from_table(mut t: Table) -> Result<ModelConfig> {
    let base = match t.remove("preset") {
        None => ModelConfig::default(),
        Some(Value::String(name)) => ModelConfig::preset(&name)?,
        Some(other) => return Err(Error::Config(format!("model.preset must be a string, got {other}"))),
    };
    let Value::Table(mut merged) = Value::try_from(base).map_err(|e| Error::Config(e.to_string()))? else {
        unreachable!("a struct serializes to a table")
    };
    merge(&mut merged, t);
    Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(format!("[model]: {}", e.message())))
}

impl RunConfig {
    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawRun = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig {
            seed: raw.seed,
            model: model_from_table(raw.model)?,
            loss: raw.loss,
            train: raw.train,
            data: raw.data,
            output: raw.output,
        };
        if let Some(m) = &mut cfg.data.manifest {
            *m = base_dir.join(&*m);
        }
        cfg.output.dir = base_dir.join(&cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// The overfit smoke run: tiny model, 50 pairs at 0–15 dB, 500 steps of
    /// batch 4 with Adam at 1e-3 for both networks, 10 held-out pairs.
    pub fn smoke() -> Self {
        RunConfig {
            seed: 7,
            model: ModelConfig::tiny(),
            loss: LossWeights::default(),
            train: TrainConfig {
                steps: 500,
                batch_size: 4,
                warmup_steps: 20,
                lr_generator: 1e-3,
                lr_discriminator: 1e-3,
                optimizer_generator: OptimizerKind::Adam,
                optimizer_discriminator: OptimizerKind::Adam,
                warmup_discriminator: true,
                checkpoint_every: 0,
            },
            data: DataConfig { pairs: 50, held_out: 10, duration_s: 0.5, snr: SnrMode::voicebank(), ..Default::default() },
            output: OutputConfig { dir: PathBuf::from("runs/smoke") },
        }
    }
}
