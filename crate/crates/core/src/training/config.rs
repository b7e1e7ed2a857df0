use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// `alpha`, `beta`, `gamma` of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    /// Classification only (pooled-learning baseline).
    pub fn classification_only() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(
                    Config,
                    "loss weight {n} = {v} must be finite and nonnegative"
                );
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for LossWeights {
    type Err = crate::Error;

    /// `"a,b,c"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parsed: Vec<f64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
        if parts.len() != 3 || parsed.len() != 3 {
            bail!(
                Config,
                "weights must be three comma-separated numbers, got {s:?}"
            );
        }
        let w = LossWeights {
            alpha: parsed[0],
            beta: parsed[1],
            gamma: parsed[2],
        };
        w.validate()?;
        Ok(w)
    }
}

/// Ablation ladder: which MI terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Classification + decomposition.
    I,
    /// I + global MI.
    II,
    /// I + local MI.
    III,
    /// All terms.
    IV,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::I, Variant::II, Variant::III, Variant::IV];

    pub fn local_active(self) -> bool {
        matches!(self, Variant::III | Variant::IV)
    }

    pub fn global_active(self) -> bool {
        matches!(self, Variant::II | Variant::IV)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
            Variant::IV => "IV",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Variant::I),
            "II" | "2" => Ok(Variant::II),
            "III" | "3" => Ok(Variant::III),
            "IV" | "4" => Ok(Variant::IV),
            _ => bail!(Config, "unknown variant {s:?} (expected I, II, III or IV)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    /// Coefficient of the squared-norm penalty on conv and dense weights.
    pub l2: f64,
    pub seed: u64,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: usize,
    pub weights: LossWeights,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 40,
            lr: 1e-3,
            lr_decay_per_epoch: 0.99,
            l2: 0.1,
            seed: 0,
            patience: 20,
            weights: LossWeights::default(),
            variant: Variant::IV,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size < 2 {
            bail!(
                Config,
                "batch size must be at least 2 (marginal shuffling), got {}",
                self.batch_size
            );
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay_per_epoch > 0.0) || !(self.l2 >= 0.0) {
            bail!(Config, "lr and decay must be positive and l2 nonnegative");
        }
        Ok(())
    }

    /// `lr * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}
