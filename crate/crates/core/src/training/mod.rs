//! Multi-stage continual memorization: stage specs, data assembly for the
//! mitigation strategies, the Adam trainer and the pipeline driver.

mod mixing;
mod optim;
mod trainer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub use mixing::{assemble_stage_data, mix, replay_subset, AssembledStage, MixOutcome, Origin};
pub use optim::{Adam, OptimizerConfig};
pub use trainer::{
    run_pipeline, train_stage, train_stage_observed, EpochStats, PipelineObserver, StageRecord, StageRun,
};

/// Datasets addressable by id.
pub type DatasetRegistry = BTreeMap<String, Dataset>;

/// Stage-data to mixing-data count ratio `a:b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MixRatio {
    pub data: u32,
    pub mix: u32,
}

impl MixRatio {
    pub fn new(data: u32, mix: u32) -> Self {
        Self { data, mix }
    }

    /// Number of mixing examples that accompany `n` stage examples.
    pub fn mix_count(&self, n: usize) -> usize {
        (n as u64 * u64::from(self.mix) / u64::from(self.data.max(1))) as usize
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.data, self.mix)
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s.split_once(':').ok_or_else(|| Error::config(format!("mix ratio {s:?} is not of the form a:b")))?;
        let parse = |x: &str| x.trim().parse::<u32>().map_err(|_| Error::config(format!("bad mix ratio component {x:?}")));
        Ok(Self { data: parse(a)?, mix: parse(b)? })
    }
}

impl Serialize for MixRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mitigation plan for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    None {},
    Replay { ratio: f64 },
    Remix { source: String, ratio: MixRatio },
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec::None {}
    }
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            StrategySpec::None {} => Ok(()),
            StrategySpec::Replay { ratio } => {
                if (0.0..=1.0).contains(ratio) {
                    Ok(())
                } else {
                    Err(Error::config(format!("replay ratio must lie in [0, 1], got {ratio}")))
                }
            }
            StrategySpec::Remix { ratio, .. } => {
                if ratio.data == 0 {
                    Err(Error::config("mix ratio a:b needs a >= 1"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Short label used in result tables.
    pub fn label(&self) -> String {
        match self {
            StrategySpec::None {} => "none".to_owned(),
            StrategySpec::Replay { ratio } => format!("replay({ratio})"),
            StrategySpec::Remix { source, ratio } => format!("remix({source},{ratio})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    LossThreshold,
    FixedEpochs,
    AccuracyTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    pub mode: StopMode,
    #[serde(default)]
    pub threshold: f64,
    pub max_epochs: usize,
}

impl StopRule {
    /// Stage-1 factoid default: train to perfect exact match, at most 200 epochs.
    pub fn memorize() -> Self {
        Self { mode: StopMode::AccuracyTarget, threshold: 1.0, max_epochs: 200 }
    }

    /// Later-stage default: mean training loss below 1e-4.
    pub fn converge() -> Self {
        Self { mode: StopMode::LossThreshold, threshold: 1e-4, max_epochs: 200 }
    }

    pub fn fixed(epochs: usize) -> Self {
        Self { mode: StopMode::FixedEpochs, threshold: 0.0, max_epochs: epochs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("stop rule max_epochs must be at least 1"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::config("stop rule threshold must be finite"));
        }
        Ok(())
    }
}

impl Default for StopRule {
    fn default() -> Self {
        Self::memorize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossThreshold,
    AccuracyTarget,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub dataset: String,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub stop: StopRule,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl StageSpec {
    pub fn new(dataset: impl Into<String>, strategy: StrategySpec, stop: StopRule, optimizer: OptimizerConfig) -> Self {
        Self { dataset: dataset.into(), strategy, stop, optimizer }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.stop.validate()?;
        self.optimizer.validate()
    }
}

/// Outcome of training one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    /// Where the post-stage checkpoint was written, when persisted.
    pub model_checkpoint: Option<String>,
    /// `(optimizer step, epoch-mean training loss)` at the end of every epoch.
    pub train_curve: Vec<(usize, f64)>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    /// Extra passes over the mixing pool when it was smaller than required.
    pub mix_pool_cycles: usize,
    pub train_examples: usize,
}
