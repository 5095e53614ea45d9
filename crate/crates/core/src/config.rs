//! JSON run configuration shared by every CLI subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dema::BlockKind;
use crate::ebm::{EbmConfig, EnergyKind};
use crate::error::ConfigError;
use crate::data::SynthConfig;
use crate::metrics::EvalConfig;
use crate::model::{Architecture, ModelConfig};
use crate::training::{LossWeights, Objective, OffsetResidual, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Pin δ ≡ 1 (plain EMA).
    pub no_damping: bool,
    /// Replace every DEMA block with plain softmax attention.
    pub no_dema: bool,
    /// Drop the NLL term (λ_NLL = 0).
    pub no_ebm: bool,
    /// Regress the offset as `|co − (ĉo − ĉ)|`.
    pub offset_variant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ebm: EbmConfig,
    pub loss: LossWeights,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub energy_kind: EnergyKind,
    pub ablations: Ablations,
    /// Share of a dataset used for training; the rest is held out.
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            ebm: EbmConfig::default(),
            loss: LossWeights::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            energy_kind: EnergyKind::default(),
            ablations: Ablations::default(),
            train_frac: 0.8,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        self.model.validate().map_err(invalid)?;
        self.ebm.validate().map_err(invalid)?;
        self.loss.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.eval.validate().map_err(invalid)?;
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(invalid("train_frac must lie in (0, 1)".into()));
        }
        let (m, s) = (&self.model, &self.synth);
        if (m.d_v, m.d_q, m.d_a) != (s.d_v, s.d_q, s.d_a) {
            return Err(invalid(format!(
                "model feature sizes (d_v, d_q, d_a) = ({}, {}, {}) differ from synth ({}, {}, {})",
                m.d_v, m.d_q, m.d_a, s.d_v, s.d_q, s.d_a
            )));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            block: if self.ablations.no_dema { BlockKind::PlainAttention } else { BlockKind::Dema },
            damping: !self.ablations.no_damping,
        }
    }

    /// Loss weights with the ablation flags applied.
    pub fn objective(&self) -> Objective {
        let mut weights = self.loss;
        if self.ablations.no_ebm {
            weights.lambda_nll = 0.0;
        }
        if self.ablations.offset_variant {
            weights.offset = OffsetResidual::CenterRelative;
        }
        Objective { weights, ebm: self.ebm.clone(), energy: self.energy_kind }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.ebm.k, 100);
        assert_eq!(cfg.ebm.gamma, 0.1);
        assert_eq!(cfg.ebm.alpha_min, 0.1);
        assert_eq!(cfg.loss.lambda_nll, 0.1);
        assert_eq!(cfg.train.optimizer.lr, 1e-3);
        assert_eq!(cfg.train.optimizer.weight_decay, 1e-4);
        assert_eq!(cfg.eval.tau, 4.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"modle": {}}"#), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_json(r#"{"ebm": {"K": 3}}"#), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"ebm": {"gamma": 0.0}}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_json(r#"{"model": {"d_v": 5}}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train_frac": 1.0}"#), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn ablations_map_to_structure() {
        let cfg = RunConfig::from_json(
            r#"{"ablations": {"no_damping": true, "no_dema": true, "no_ebm": true, "offset_variant": true}, "energy_kind": "pooled_cosine"}"#,
        )
        .unwrap();
        assert_eq!(cfg.architecture(), Architecture { block: BlockKind::PlainAttention, damping: false });
        let obj = cfg.objective();
        assert_eq!(obj.weights.lambda_nll, 0.0);
        assert_eq!(obj.weights.offset, OffsetResidual::CenterRelative);
        assert_eq!(obj.energy, EnergyKind::PooledCosine);
    }
}
