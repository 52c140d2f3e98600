//! Experiment configuration, read from TOML. Every field has a default, so
//! an empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::eval::{default_rank_grid, ApProtocol, DEFAULT_IOU_MATCH};
use crate::gridgen::GridSpec;
use crate::model::{TrainConfig, TrainMode};
use crate::synth::SynthConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub score: f64,
    pub nms: f64,
    pub iou_match: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { score: 0.05, nms: 0.3, iou_match: DEFAULT_IOU_MATCH }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: ApProtocol,
    pub fp_ranks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocol: ApProtocol::Continuous, fp_ranks: default_rank_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub mode: TrainMode,
    pub s_test: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Write flat image dumps next to the manifests.
    pub dump_images: bool,
    /// Clip boxes to the image between iterations.
    pub clip_boxes: bool,
    pub ablation_seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub grid_train: GridSpec,
    pub grid_test: GridSpec,
    pub train: TrainConfig,
    pub thresholds: Thresholds,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            output_dir: PathBuf::from("out"),
            mode: TrainMode::Gcnn,
            s_test: 5,
            n_train: 300,
            n_test: 100,
            dump_images: false,
            clip_boxes: true,
            ablation_seeds: vec![0, 1, 2, 3, 4],
            synth: SynthConfig::default(),
            grid_train: GridSpec::default_train(),
            grid_test: GridSpec::default_test(),
            train: TrainConfig::default(),
            thresholds: Thresholds::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::UnsupportedVersion { what: "config", found: self.version, expected: CONFIG_VERSION });
        }
        self.synth.validate()?;
        self.grid_train.validate()?;
        self.grid_test.validate()?;
        self.train.validate()?;
        self.detect_config().validate()?;
        if self.train.num_classes != self.synth.num_classes as usize {
            return Err(Error::InvalidConfig(format!(
                "train.num_classes {} differs from synth.num_classes {}",
                self.train.num_classes, self.synth.num_classes
            )));
        }
        if !(self.thresholds.iou_match > 0.0 && self.thresholds.iou_match <= 1.0) {
            return Err(Error::InvalidConfig("thresholds.iou_match must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            s_test: self.s_test,
            score_threshold: self.thresholds.score,
            nms_iou: self.thresholds.nms,
            clip: self.clip_boxes,
            ..DetectConfig::default()
        }
    }

    /// Use one seed for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
