use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encodings::CoordScheme;

/// Architecture hyperparameters plus the data shape a model is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Layers in each of the four stacks.
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Depth of the per-position input projections.
    pub proj_layers: usize,
    /// Local block radius; the block side is `2r + 1`.
    pub local_radius: usize,
    pub dropout: f64,
    pub coord_scheme: CoordScheme,
    /// Same-slot steps taken from previous weeks.
    pub weeks: usize,
    /// Same-slot steps taken from previous days.
    pub days: usize,
    /// Immediately preceding steps.
    pub recent: usize,
    /// Future steps predicted per sample.
    pub horizon: usize,
    pub rows: usize,
    pub cols: usize,
    pub features: usize,
    pub externals: usize,
    pub steps_per_day: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            d_model: 64,
            d_ff: 256,
            heads: 8,
            proj_layers: 3,
            local_radius: 3,
            dropout: 0.1,
            coord_scheme: CoordScheme::Relative,
            weeks: 1,
            days: 3,
            recent: 1,
            horizon: 12,
            rows: 0,
            cols: 0,
            features: 2,
            externals: 0,
            steps_per_day: 48,
        }
    }
}

/// Every violated constraint of a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.violations.join("; "))
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn check(violations: Vec<String>) -> Result<(), ConfigError> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations })
        }
    }
}

impl ModelConfig {
    pub fn history(&self) -> usize {
        self.weeks + self.days + self.recent
    }

    pub fn grids(&self) -> usize {
        self.rows * self.cols
    }

    pub fn block_side(&self) -> usize {
        2 * self.local_radius + 1
    }

    pub fn block_grids(&self) -> usize {
        self.block_side() * self.block_side()
    }

    /// Length of one external vector: week one-hot, day-slot one-hot, extra features.
    pub fn external_dim(&self) -> usize {
        7 + self.steps_per_day + self.externals
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.heads == 0 {
            v.push("heads must be at least 1".to_string());
        } else if !self.d_model.is_multiple_of(self.heads) {
            v.push(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            v.push(format!("d_model ({}) must be a positive even number", self.d_model));
        }
        if self.d_ff == 0 {
            v.push("d_ff must be at least 1".to_string());
        }
        if self.layers == 0 {
            v.push("layers must be at least 1".to_string());
        }
        if self.proj_layers == 0 {
            v.push("proj_layers must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if self.history() == 0 {
            v.push("weeks + days + recent must be at least 1".to_string());
        }
        if self.horizon == 0 {
            v.push("horizon must be at least 1".to_string());
        }
        if self.rows == 0 || self.cols == 0 {
            v.push(format!("grid {}x{} must be non-empty", self.rows, self.cols));
        } else if self.block_grids() > self.grids() {
            v.push(format!(
                "local block of {} grids exceeds the {} grids of the map",
                self.block_grids(),
                self.grids()
            ));
        }
        if self.features == 0 {
            v.push("features must be at least 1".to_string());
        }
        if self.steps_per_day == 0 {
            v.push("steps_per_day must be at least 1".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        ConfigError::check(self.violations())
    }
}
