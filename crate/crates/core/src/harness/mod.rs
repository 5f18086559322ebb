//! Data, metrics, training, evaluation, traces and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod trace;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};

pub use ablation::{run_ablation_suite, AblationRow, AblationTable};
pub use checkpoint::Checkpoint;
pub use data::{generate_dataset, generate_episode, ClueMode, Dataset, DialogueEpisode, GenConfig, PlantedClue};
pub use eval::{evaluate, evaluate_checkpoint};
pub use metrics::{compute_metrics, MetricReport};
pub use trace::{export_trace, AttentionTrace};
pub use train::{train, LogRecord, TrainConfig, TrainOutcome};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix(base ^ splitmix(stream))
}

/// Where episodes come from: files, or the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub seed: u64,
    pub generator: GenConfig,
    /// Next-question ranking instead of answer ranking.
    pub question_ranking: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            val_path: None,
            train_episodes: 200,
            val_episodes: 50,
            seed: 0,
            generator: GenConfig::default(),
            question_ranking: false,
        }
    }
}

impl DataConfig {
    /// `(train, val)`; generated sets use disjoint seed streams.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = match (&self.train_path, &self.val_path) {
            (Some(t), v) => {
                let train = Dataset::load(t)?;
                let val = match v {
                    Some(v) => Dataset::load(v)?,
                    None => Dataset {
                        vocab: train.vocab.clone(),
                        episodes: Vec::new(),
                    },
                };
                if val.vocab != train.vocab {
                    return Err(Error::data(
                        "val_path",
                        "validation set uses a different vocabulary",
                    ));
                }
                (train, val)
            }
            (None, Some(_)) => return Err(Error::config("val_path given without train_path")),
            (None, None) => (
                generate_dataset(derive_seed(self.seed, 1), self.train_episodes, &self.generator)?,
                generate_dataset(derive_seed(self.seed, 2), self.val_episodes, &self.generator)?,
            ),
        };
        if self.question_ranking {
            let k = self.generator.candidates;
            return Ok((
                data::question_ranking(&train, k, derive_seed(self.seed, 3))?,
                data::question_ranking(&val, k, derive_seed(self.seed, 4))?,
            ));
        }
        Ok((train, val))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Everything a CLI run needs, read from a TOML key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    /// Desk scale: d = 32 on four-object, three-round synthetic dialogues.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                embed_dim: 32,
                hidden: 32,
                feature_dim: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Keys absent from `text` keep their `RunConfig::default()` values,
    /// including inside partially given tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let given: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut base, given);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One seed drives data, initialization and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.model.ablation = ablation;
        self
    }

    /// Fills an unset vocabulary size from the data and checks the
    /// feature width.
    pub fn resolve(&mut self, data: &Dataset) -> Result<()> {
        if self.model.vocab_size == 0 {
            self.model.vocab_size = data.vocab.len();
        } else if self.model.vocab_size != data.vocab.len() {
            return Err(Error::config(format!(
                "model vocab_size {} differs from the data vocabulary ({})",
                self.model.vocab_size,
                data.vocab.len()
            )));
        }
        if let Some(ep) = data.episodes.first() {
            if ep.feature_dim() != self.model.feature_dim {
                return Err(Error::config(format!(
                    "model feature_dim {} differs from the data ({})",
                    self.model.feature_dim,
                    ep.feature_dim()
                )));
            }
            let most_rounds = data.episodes.iter().map(|e| e.rounds.len()).max().unwrap_or(0);
            if most_rounds > self.model.max_rounds {
                return Err(Error::config(format!(
                    "data has {most_rounds} rounds, model max_rounds is {}",
                    self.model.max_rounds
                )));
            }
            let most_objects = data.episodes.iter().map(|e| e.features.len()).max().unwrap_or(0);
            if most_objects > self.model.max_objects {
                return Err(Error::config(format!(
                    "data has {most_objects} objects, model max_objects is {}",
                    self.model.max_objects
                )));
            }
        }
        self.model.validate()
    }
}
