//! Run configuration: defaults, then the TOML file, then `VRL_SEED` for seeds
//! the file leaves unset, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vrl_core::ablation::AblationAxes;
use vrl_core::degrade::{CfaPattern, FieldParity};
use vrl_core::eval::BenchConfig;
use vrl_core::model::{ModelConfig, Task};
use vrl_core::train::TrainConfig;
use vrl_core::{Error, Result};

pub const RESOLVED_FILE: &str = "resolved_config.toml";
pub const SEED_ENV: &str = "VRL_SEED";

/// Where training and evaluation data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Ground-truth clips for training. Without it a synthetic clip is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    /// Ground-truth clips for evaluation; defaults to the training clips.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
    pub pattern: CfaPattern,
    pub first_parity: FieldParity,
    pub synthetic_frames: usize,
    pub synthetic_height: usize,
    pub synthetic_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            eval_dir: None,
            pattern: CfaPattern::Rggb,
            first_parity: FieldParity::Odd,
            synthetic_frames: 10,
            synthetic_height: 64,
            synthetic_width: 80,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationAxes,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::paper(Task::Deinterlace),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
            ablation: AblationAxes::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn has_key(v: &toml::Table, table: &str, key: &str) -> bool {
    v.get(table)
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key(key))
}

/// `VRL_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} = '{s}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Reads `path` on top of `base`, then fills unset seeds from `VRL_SEED`.
    pub fn load(base: RunConfig, path: Option<&Path>) -> Result<RunConfig> {
        let table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, &table);
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("configuration: {e}")))?;
        if let Some(seed) = env_seed()? {
            if !has_key(&table, "model", "seed") {
                cfg.model.seed = seed;
            }
            if !has_key(&table, "train", "seed") {
                cfg.train.seed = seed;
            }
            if !has_key(&table, "bench", "seed") {
                cfg.bench.seed = seed;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Writes the resolved configuration into `out`.
    pub fn echo(&self, out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
        let path = out.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Recursive table merge; `over` wins.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}
