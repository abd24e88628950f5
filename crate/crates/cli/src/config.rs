//! The single JSON document that configures every subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sdpn_core::data::CorpusConfig;
use sdpn_core::metrics::DcfParams;
use sdpn_core::model::ModelConfig;
use sdpn_core::scoring::{NormConfig, NormMethod, OverlapPolicy};
use sdpn_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// When set, replaces both the corpus seed and the training seed.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub metrics: DcfParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            metrics: DcfParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training speakers; `utts_per_speaker` counts training utterances only.
    pub train: CorpusConfig,
    /// Extra utterances per training speaker held out as the score cohort.
    pub cohort_utts_per_speaker: usize,
    /// Unseen speakers that make up the trial list.
    pub eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: CorpusConfig::default(),
            cohort_utts_per_speaker: 1,
            eval_speakers: 10,
            eval_utts_per_speaker: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortOverlap {
    #[default]
    Reject,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub method: NormMethod,
    pub top_k: Option<usize>,
    pub sample_stddev: bool,
    pub threads: Option<usize>,
    pub cohort_overlap: CohortOverlap,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            method: NormMethod::Cosine,
            top_k: None,
            sample_stddev: false,
            threads: None,
            cohort_overlap: CohortOverlap::Reject,
        }
    }
}

impl ScoringConfig {
    pub fn norm(&self) -> NormConfig {
        NormConfig {
            method: self.method,
            top_k: self.top_k,
            sample_stddev: self.sample_stddev,
        }
    }

    pub fn overlap_policy(&self) -> OverlapPolicy {
        match self.cohort_overlap {
            CohortOverlap::Reject => OverlapPolicy::Reject,
            CohortOverlap::Drop => OverlapPolicy::WarnAndDrop,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(CliError::Config(format!(
                    "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
                )))
            }
            None => return Err(CliError::Config("missing schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Copies the top-level seed into the sections that consume one.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.data.train.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        if self.model.feature_dim != self.data.train.feature_dim {
            return Err(CliError::Config(format!(
                "model.feature_dim ({}) differs from data.train.feature_dim ({})",
                self.model.feature_dim, self.data.train.feature_dim
            )));
        }
        if self.data.eval_speakers < 2 || self.data.eval_utts_per_speaker < 2 {
            return Err(CliError::Config(
                "evaluation needs at least 2 speakers with 2 utterances each".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
