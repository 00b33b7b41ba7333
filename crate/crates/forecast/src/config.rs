//! Runtime configuration: training hyperparameters, model dimensions, and
//! curation thresholds. JSON field names double as CLI flag names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossProfile {
    Nuscenes,
    Rmse,
}

impl std::str::FromStr for LossProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nuscenes" => Ok(LossProfile::Nuscenes),
            "rmse" => Ok(LossProfile::Rmse),
            other => Err(Error::Config(format!("unknown loss profile '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Cosine annealing period in epochs.
    pub t_max: usize,
    pub eta_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Experts per MoE layer (K).
    pub experts: usize,
    /// Stacked decoder blocks (N).
    pub blocks: usize,
    /// Forecast modes (K_n).
    pub modes: usize,
    pub d_emb: usize,
    pub loss: LossProfile,
    pub heads: usize,
    pub dropout: f64,
    /// History frame slots per track.
    pub t_hist: usize,
    /// Future steps to predict.
    pub t_f: usize,
    pub bev_hw: usize,
    pub bev_m_per_px: f64,
    pub backbone_width: usize,
    pub backbone_seed: u64,
    pub ssm_state: usize,
    /// Keep only the top-k gates at inference; None aggregates all experts.
    pub topk: Option<usize>,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            t_max: 150,
            eta_min: 5e-6,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            experts: 4,
            blocks: 4,
            modes: 10,
            d_emb: 64,
            loss: LossProfile::Nuscenes,
            heads: 4,
            dropout: 0.1,
            t_hist: 5,
            t_f: 12,
            bev_hw: 64,
            bev_m_per_px: 0.5,
            backbone_width: 128,
            backbone_seed: 7777,
            ssm_state: 4,
            topk: None,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.eta_min <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.eta_min >= self.learning_rate {
            return Err(Error::Config(format!(
                "eta_min {} must be below learning_rate {}",
                self.eta_min, self.learning_rate
            )));
        }
        for (name, v) in [
            ("t_max", self.t_max),
            ("batch_size", self.batch_size),
            ("experts", self.experts),
            ("blocks", self.blocks),
            ("modes", self.modes),
            ("d_emb", self.d_emb),
            ("heads", self.heads),
            ("t_hist", self.t_hist),
            ("t_f", self.t_f),
            ("bev_hw", self.bev_hw),
            ("backbone_width", self.backbone_width),
            ("ssm_state", self.ssm_state),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_emb % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_emb {} not divisible by heads {}",
                self.d_emb, self.heads
            )));
        }
        if self.bev_hw < 8 {
            return Err(Error::Config("bev_hw must be at least 8".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if let Some(k) = self.topk {
            if k == 0 || k > self.experts {
                return Err(Error::Config(format!(
                    "topk {k} out of range for {} experts",
                    self.experts
                )));
            }
        }
        Ok(())
    }
}

/// Thresholds for scenario classification and risk flagging.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub ttc_risk_s: f64,
    pub yaw_turn_rad: f64,
    pub yaw_uturn_rad: f64,
    pub congested_vehicles: usize,
    pub congested_pedestrians: usize,
    pub brake_accel_mps2: f64,
    pub accel_mps2: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            ttc_risk_s: 2.0,
            yaw_turn_rad: 0.3,
            yaw_uturn_rad: 0.7,
            congested_vehicles: 35,
            congested_pedestrians: 50,
            brake_accel_mps2: -1.5,
            accel_mps2: 2.5,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_uturn_rad > self.yaw_turn_rad && self.yaw_turn_rad > 0.0) {
            return Err(Error::Config(format!(
                "need yaw_uturn_rad > yaw_turn_rad > 0, got {} / {}",
                self.yaw_uturn_rad, self.yaw_turn_rad
            )));
        }
        if self.ttc_risk_s <= 0.0 {
            return Err(Error::Config("ttc_risk_s must be positive".into()));
        }
        Ok(())
    }
}

/// Top-level config file: `{"train": {...}, "curation": {...}}`, both
/// sections optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub curation: CurationConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.train.validate()?;
        cfg.curation.validate()?;
        Ok(cfg)
    }
}
