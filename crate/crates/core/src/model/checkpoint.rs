//! JSON checkpoint holding both trained networks and the settings needed to
//! run them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridgen::GridSpec;

use super::mlp::{Activation, Mlp};
use super::{ClassifierModel, RegressorModel, TrainConfig, TrainMode};

pub const CHECKPOINT_FORMAT: &str = "gcnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub num_classes: usize,
    /// Per layer: `out x in` row-major weights, then `out` biases.
    pub params: Vec<f64>,
}

impl NetworkRecord {
    fn from_mlp(mlp: &Mlp, num_classes: usize) -> Self {
        Self {
            layer_sizes: mlp.layer_sizes().to_vec(),
            activation: mlp.activation(),
            num_classes,
            params: mlp.params().to_vec(),
        }
    }

    fn to_mlp(&self) -> Result<Mlp> {
        Mlp::from_params(self.layer_sizes.clone(), self.activation, self.params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: TrainMode,
    pub seed: u64,
    /// Number of completed training stages.
    pub stage: usize,
    pub train: TrainConfig,
    pub grid_train: GridSpec,
    pub regressor: NetworkRecord,
    pub classifier: NetworkRecord,
}

impl Checkpoint {
    pub fn new(mode: TrainMode, train: &TrainConfig, grid_train: &GridSpec, regressor: &RegressorModel, classifier: &ClassifierModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            mode,
            seed: train.seed,
            stage: train.s_train,
            train: train.clone(),
            grid_train: grid_train.clone(),
            regressor: NetworkRecord::from_mlp(&regressor.mlp, regressor.num_classes),
            classifier: NetworkRecord::from_mlp(&classifier.mlp, classifier.num_classes),
        }
    }

    pub fn regressor(&self) -> Result<RegressorModel> {
        RegressorModel::from_mlp(self.regressor.to_mlp()?, self.regressor.num_classes)
    }

    pub fn classifier(&self) -> Result<ClassifierModel> {
        ClassifierModel::from_mlp(self.classifier.to_mlp()?, self.classifier.num_classes)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Malformed { what: "checkpoint", line: 1, reason: format!("format {:?}", ck.format) });
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { what: "checkpoint", found: ck.version, expected: CHECKPOINT_VERSION });
        }
        let (r, c) = (ck.regressor()?, ck.classifier()?);
        let want = ck.train.features.input_dim();
        if r.input_dim() != want || c.input_dim() != want {
            return Err(Error::ModelMismatch(format!(
                "network inputs ({}, {}) do not match feature size {want}",
                r.input_dim(),
                c.input_dim()
            )));
        }
        if r.num_classes != c.num_classes {
            return Err(Error::ModelMismatch("regressor and classifier disagree on class count".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
