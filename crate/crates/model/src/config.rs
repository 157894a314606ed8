use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// SAR channels gated by the attention mask: d_vv, d_vh, vvvh.
pub const SAR_CHANNELS: usize = 3;
/// FCN input: the three (masked) SAR channels plus unmasked slope.
pub const FCN_IN_CHANNELS: usize = SAR_CHANNELS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub enabled: bool,
    pub hidden_filters: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden_filters: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcnConfig {
    pub n_blocks: usize,
    pub base_filters: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub in_channels: usize,
    pub attention: AttentionConfig,
}

impl Default for FcnConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            base_filters: 32,
            kernel: 3,
            dropout: 0.1,
            in_channels: FCN_IN_CHANNELS,
            attention: AttentionConfig::default(),
        }
    }
}

impl FcnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_blocks == 0 || self.n_blocks > 8 {
            return bad(format!("n_blocks {} outside 1..=8", self.n_blocks));
        }
        if self.base_filters == 0 {
            return bad("base_filters must be >= 1".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.in_channels != FCN_IN_CHANNELS {
            return bad(format!(
                "in_channels {} does not match the wiring (3 SAR channels + slope = {FCN_IN_CHANNELS})",
                self.in_channels
            ));
        }
        if self.attention.enabled && self.attention.hidden_filters == 0 {
            return bad("attention hidden_filters must be >= 1".into());
        }
        Ok(())
    }

    /// Encoder block widths; the bottleneck doubles the last one.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.n_blocks).map(|i| self.base_filters << i).collect()
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_filters << self.n_blocks
    }

    /// Spatial extents must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << self.n_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum PosWeight {
    /// `neg / pos` over the training patches, capped.
    Auto {
        cap: f64,
    },
    Fixed {
        value: f64,
    },
}

impl Default for PosWeight {
    fn default() -> Self {
        PosWeight::Auto {
            cap: ava_core::dataset::DEFAULT_POS_WEIGHT_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    WeightedBce,
    SoftJaccard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentToggles {
    pub dihedral: bool,
    pub shift: bool,
    pub zoom: bool,
    pub shear: bool,
}

impl Default for AugmentToggles {
    fn default() -> Self {
        Self {
            dihedral: true,
            shift: false,
            zoom: false,
            shear: false,
        }
    }
}

impl AugmentToggles {
    pub fn none() -> Self {
        Self {
            dihedral: false,
            shift: false,
            zoom: false,
            shear: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pos_weight: PosWeight,
    pub augment: AugmentToggles,
    pub seed: u64,
    pub loss: LossKind,
    /// Probability threshold for the per-epoch F1 scores.
    pub threshold: f32,
    /// Stop once the eval-mode training F1 reaches this value.
    pub target_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr: 1e-4,
            pos_weight: PosWeight::default(),
            augment: AugmentToggles::default(),
            seed: 0,
            loss: LossKind::WeightedBce,
            threshold: 0.5,
            target_train_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and >= 0", self.lr));
        }
        match self.pos_weight {
            PosWeight::Auto { cap } if !(cap > 0.0) => return bad(format!("pos_weight cap {cap} must be > 0")),
            PosWeight::Fixed { value } if !(value > 0.0 && value.is_finite()) => {
                return bad(format!("pos_weight {value} must be finite and > 0"))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        Ok(())
    }
}

/// The `--config` file: `{"model": {...}, "train": {...}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: FcnConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
