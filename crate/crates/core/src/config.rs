//! Training configuration: a JSON-backed hyperparameter record with strict
//! unknown-key rejection, plus per-world presets sized for CPU budgets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CdlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub world: String,
    pub image_size: usize,
    pub timesteps: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_eps: f64,
    pub lr_proj: f64,
    pub lr_nscm: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub contrast_weight: f64,
    /// L1 weight on the adjacency gates.
    pub alpha: f64,
    /// L2 decay on the structural heads, pinning edge strength to the gates.
    pub weight_decay: f64,
    pub rho0: f64,
    pub beta0: f64,
    pub squared_penalty: bool,
    pub gate_init: f64,
    pub ema_rate: f64,
    pub grad_clip: f64,
    /// Fraction held out for the residual-scale calibration.
    pub val_fraction: f64,
    /// Iterations between dual updates of the acyclicity multiplier.
    pub epoch_iters: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub nscm_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pendulum()
    }
}

impl TrainConfig {
    /// Default full-scale run: 32x32 pendulum on a CPU-hour budget.
    pub fn pendulum() -> Self {
        Self {
            world: "pendulum".into(),
            image_size: 32,
            timesteps: 1000,
            iterations: 10000,
            batch_size: 16,
            lr_eps: 2e-4,
            lr_proj: 5e-4,
            lr_nscm: 5e-4,
            tau: 0.5,
            contrast_weight: 1.0,
            alpha: 0.01,
            weight_decay: 0.01,
            rho0: 1.0,
            beta0: 0.0,
            squared_penalty: true,
            gate_init: 0.3,
            ema_rate: 0.999,
            grad_clip: 1.0,
            val_fraction: 0.1,
            epoch_iters: 250,
            log_every: 10,
            checkpoint_every: 2000,
            seed: 0,
            base_channels: 8,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 32,
            nscm_hidden: 16,
        }
    }

    /// Small smoke-scale run on the two-bar world.
    pub fn toy_bars() -> Self {
        Self {
            world: "toy-bars".into(),
            image_size: 16,
            iterations: 2000,
            batch_size: 8,
            epoch_iters: 200,
            checkpoint_every: 1000,
            base_channels: 8,
            channel_mults: vec![1, 2],
            time_embed_dim: 16,
            ..Self::pendulum()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, f64); 6] = [
            ("tau", self.tau),
            ("grad_clip", self.grad_clip),
            ("rho0", self.rho0),
            ("image_size", self.image_size as f64),
            ("timesteps", self.timesteps as f64),
            ("batch_size", self.batch_size as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(CdlError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg: [(&str, f64); 8] = [
            ("lr_eps", self.lr_eps),
            ("lr_proj", self.lr_proj),
            ("lr_nscm", self.lr_nscm),
            ("contrast_weight", self.contrast_weight),
            ("alpha", self.alpha),
            ("weight_decay", self.weight_decay),
            ("beta0", self.beta0),
            ("gate_init", self.gate_init),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CdlError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(CdlError::Config(format!(
                "ema_rate must be in (0,1), got {}",
                self.ema_rate
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CdlError::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        if self.world.is_empty() {
            return Err(CdlError::Config("world id must be set".into()));
        }
        if self.epoch_iters == 0 || self.log_every == 0 {
            return Err(CdlError::Config("epoch_iters and log_every must be positive".into()));
        }
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.time_embed_dim == 0 {
            return Err(CdlError::Config("network architecture fields must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CdlError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CdlError::Config(format!("config read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| CdlError::Config(format!("config serialize: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::from_json(r#"{"world":"pendulum","warp_speed":9}"#).unwrap_err();
        assert!(err.to_string().contains("warp_speed"), "{err}");
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = TrainConfig::from_json(r#"{"iterations": 3, "seed": 7}"#).unwrap();
        assert_eq!(cfg.iterations, 3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.world, TrainConfig::default().world);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn json_roundtrip_is_identity() {
        let cfg = TrainConfig::toy_bars();
        let back = TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.ema_rate = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.lr_eps = -1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.val_fraction = 0.0;
        assert!(cfg.validate().is_err());
        // Zero iterations and zero learning rates stay legal: they are the
        // documented no-op cases.
        cfg = TrainConfig::default();
        cfg.iterations = 0;
        cfg.lr_eps = 0.0;
        assert!(cfg.validate().is_ok());
    }
}
