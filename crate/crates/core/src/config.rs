use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ablation rung. Each rung enables every stage of the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Direct,
    Roles,
    Discussion,
    Retrieval,
}

impl AblationMode {
    /// Fixed column order for ablation tables.
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Direct,
        AblationMode::Roles,
        AblationMode::Discussion,
        AblationMode::Retrieval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Direct => "direct",
            AblationMode::Roles => "roles",
            AblationMode::Discussion => "discussion",
            AblationMode::Retrieval => "retrieval",
        }
    }

    pub fn column_title(self) -> &'static str {
        match self {
            AblationMode::Direct => "Direct",
            AblationMode::Roles => "+Roles",
            AblationMode::Discussion => "+Discussion",
            AblationMode::Retrieval => "+Retrieval",
        }
    }

    pub fn uses_roles(self) -> bool {
        self >= AblationMode::Roles
    }

    pub fn deliberates(self) -> bool {
        self >= AblationMode::Discussion
    }

    pub fn retrieves(self) -> bool {
        self == AblationMode::Retrieval
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().trim_start_matches('+') {
            "direct" => Ok(AblationMode::Direct),
            "roles" => Ok(AblationMode::Roles),
            "discussion" => Ok(AblationMode::Discussion),
            "retrieval" | "full" => Ok(AblationMode::Retrieval),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("n_specialists must be at least 1")]
    NoSpecialists,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("retrieval_top_k must be at least 1")]
    ZeroTopK,
    #[error("temperature must be a finite number >= 0, got {0}")]
    BadTemperature(f64),
}

/// Immutable run configuration, snapshotted into every transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_specialists: usize,
    pub max_rounds: usize,
    pub ablation_mode: AblationMode,
    pub retrieval_top_k: usize,
    pub temperature: f64,
    /// Base seed for sampled requests (discernment generations).
    pub seed: u64,
    /// Sampling temperature for the three discernment generations.
    pub discernment_temperature: f64,
    /// Replaces the built-in `assigned_role` system prompt when set.
    pub assigned_role_prompt: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_specialists: 3,
            max_rounds: 3,
            ablation_mode: AblationMode::Retrieval,
            retrieval_top_k: 5,
            temperature: 0.0,
            seed: 0,
            discernment_temperature: 0.7,
            assigned_role_prompt: None,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        self.ablation_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_specialists == 0 {
            return Err(ConfigError::NoSpecialists);
        }
        if self.max_rounds == 0 {
            return Err(ConfigError::NoRounds);
        }
        if self.retrieval_top_k == 0 {
            return Err(ConfigError::ZeroTopK);
        }
        for t in [self.temperature, self.discernment_temperature] {
            if !t.is_finite() || t < 0.0 {
                return Err(ConfigError::BadTemperature(t));
            }
        }
        Ok(())
    }
}
