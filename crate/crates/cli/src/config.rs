//! The run configuration document: a TOML file holding the architecture,
//! training hyperparameters, split protocol, augmentation plan, and
//! preprocessing flags. The shipped defaults reproduce the reference
//! pipeline (78x78 input, C(7,6) P(2) C(4,16) P(3) C(3,32) P(3) F(150)
//! OUT(6); learning rate 0.01, batch 113, momentum 0.9, weight decay 0.0005,
//! dropout 0).

use std::path::Path;

use serde::{Deserialize, Serialize};

use cellcnn_core::dataset::ChannelMode;
use cellcnn_core::error::{Error, Result};
use cellcnn_core::imageproc::AugmentationPlan;
use cellcnn_core::network::NetworkSpec;
use cellcnn_core::trainer::{LrSchedule, TrainConfig};

/// Augmentation settings. `angle_step_degrees = 360` means a single variant,
/// i.e. no augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSettings {
    pub angle_step_degrees: u32,
    /// Rotate before the resize to the network input size instead of after.
    /// The default (false) rotates the resized image, which is cheaper.
    pub rotate_before_resize: bool,
}

impl Default for AugmentationSettings {
    fn default() -> Self {
        AugmentationSettings {
            angle_step_degrees: 360,
            rotate_before_resize: false,
        }
    }
}

impl AugmentationSettings {
    pub fn plan(&self) -> Result<AugmentationPlan> {
        AugmentationPlan::new(self.angle_step_degrees)
    }
}

/// Training hyperparameters as written in the config file (the run seed is
/// global, so it lives outside this table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub mini_batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_ratio: f64,
    pub max_epochs: usize,
    pub snapshot_epochs: Vec<usize>,
    pub schedule: LrSchedule,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            learning_rate: t.learning_rate,
            mini_batch_size: t.mini_batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            dropout_ratio: t.dropout_ratio,
            max_epochs: t.max_epochs,
            snapshot_epochs: t.snapshot_epochs,
            schedule: t.schedule,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            mini_batch_size: self.mini_batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            dropout_ratio: self.dropout_ratio,
            max_epochs: self.max_epochs,
            snapshot_epochs: self.snapshot_epochs.clone(),
            schedule: self.schedule,
            seed,
        }
    }
}

/// Split fractions (the seed is the global run seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub stratified: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            train: 0.64,
            validation: 0.16,
            test: 0.20,
            stratified: false,
        }
    }
}

impl SplitSettings {
    pub fn to_spec(self, seed: u64) -> cellcnn_core::dataset::SplitSpec {
        cellcnn_core::dataset::SplitSpec {
            fractions: (self.train, self.validation, self.test),
            seed,
            stratified: self.stratified,
        }
    }
}

/// The whole run configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Rotate each cell so its mask's principal direction is vertical.
    pub align: bool,
    pub channel_mode: ChannelMode,
    pub network: NetworkSpec,
    pub train: TrainSettings,
    pub split: SplitSettings,
    pub augmentation: AugmentationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            align: false,
            channel_mode: ChannelMode::Grayscale,
            network: NetworkSpec::reference(6),
            train: TrainSettings::default(),
            split: SplitSettings::default(),
            augmentation: AugmentationSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// FNV-1a hash of the canonical TOML rendering; names the run directory.
    pub fn content_hash(&self) -> Result<u64> {
        let text = self.to_toml()?;
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(hash)
    }

    /// `run-<confighash>-s<seed>`, the auditable run directory name.
    pub fn run_name(&self) -> Result<String> {
        Ok(format!("run-{:016x}-s{}", self.content_hash()?, self.seed))
    }
}
