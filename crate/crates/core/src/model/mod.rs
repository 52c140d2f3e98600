//! Box regressor, classifier and their training.

pub mod checkpoint;
pub mod loss;
pub mod mlp;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::DeltaParams;
use crate::error::{Error, Result};

pub use loss::{classifier_loss, regression_loss, smooth_l1, softmax, LossOutput};
pub use mlp::{Activation, Mlp, Sgd};
pub use train::{train_classifier, train_stepwise, IterationRecord, TrainConfig, TrainLog, TrainedModels};

/// Per-class box regressor: `4 * num_classes` outputs, head `k` at
/// `4 * (k - 1) .. 4 * k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub mlp: Mlp,
    pub num_classes: usize,
}

/// `num_classes + 1` logits; index 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub mlp: Mlp,
    pub num_classes: usize,
}

fn layer_chain(input_dim: usize, hidden: &[usize], output_dim: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input_dim);
    sizes.extend_from_slice(hidden);
    sizes.push(output_dim);
    sizes
}

impl RegressorModel {
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], num_classes: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::init(layer_chain(input_dim, hidden, 4 * num_classes), activation, rng)?;
        Self::from_mlp(mlp, num_classes)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        Self::from_mlp(Mlp::zeros(layer_chain(input_dim, hidden, 4 * num_classes), Activation::Relu)?, num_classes)
    }

    pub fn from_mlp(mlp: Mlp, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || mlp.output_dim() != 4 * num_classes {
            return Err(Error::ModelMismatch(format!(
                "regressor output {} does not equal 4 x {num_classes} classes",
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp, num_classes })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }
}

impl ClassifierModel {
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], num_classes: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::init(layer_chain(input_dim, hidden, num_classes + 1), activation, rng)?;
        Self::from_mlp(mlp, num_classes)
    }

    pub fn from_mlp(mlp: Mlp, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || mlp.output_dim() != num_classes + 1 {
            return Err(Error::ModelMismatch(format!(
                "classifier output {} does not equal {num_classes} classes + background",
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp, num_classes })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Class probabilities, background first.
    pub fn probabilities(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.mlp.forward(input)?))
    }
}

/// One `DeltaParams` per foreground class, class 1 first.
pub fn predict(model: &RegressorModel, input: &[f64]) -> Result<Vec<DeltaParams>> {
    let out = model.mlp.forward(input)?;
    Ok(out.chunks_exact(4).map(DeltaParams::from_slice).collect())
}

/// Which training regime produced the regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    /// Cumulative stage-wise schedule.
    #[serde(rename = "gcnn")]
    Gcnn,
    /// All step tuples pooled and trained in a single phase.
    #[serde(rename = "1step")]
    OneStepGrid,
    /// Initial box regressed straight onto the ground truth, applied
    /// iteratively at test time.
    #[serde(rename = "ifrcnn")]
    IfRcnn,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Gcnn, TrainMode::OneStepGrid, TrainMode::IfRcnn];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Gcnn => "gcnn",
            TrainMode::OneStepGrid => "1step",
            TrainMode::IfRcnn => "ifrcnn",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcnn" => Ok(TrainMode::Gcnn),
            "1step" | "onestepgrid" | "1step-grid" => Ok(TrainMode::OneStepGrid),
            "ifrcnn" | "if-rcnn" => Ok(TrainMode::IfRcnn),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?} (gcnn, 1step, ifrcnn)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_regressor_predicts_zero_deltas() {
        let m = RegressorModel::zeros(7, &[5], 3).unwrap();
        let d = predict(&m, &[0.3; 7]).unwrap();
        assert_eq!(d, vec![DeltaParams::ZERO; 3]);
    }

    #[test]
    fn output_dims_follow_class_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = RegressorModel::new(10, &[8, 6], 4, Activation::Relu, &mut rng).unwrap();
        let c = ClassifierModel::new(10, &[8], 4, Activation::Relu, &mut rng).unwrap();
        assert_eq!(r.mlp.output_dim(), 16);
        assert_eq!(c.mlp.output_dim(), 5);
        let p = c.probabilities(&[0.1; 10]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(RegressorModel::from_mlp(c.mlp.clone(), 4).is_err());
        assert!(ClassifierModel::from_mlp(r.mlp.clone(), 4).is_err());
    }

    #[test]
    fn predict_rejects_wrong_input() {
        let m = RegressorModel::zeros(7, &[5], 3).unwrap();
        assert!(matches!(predict(&m, &[0.0; 6]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
        assert!("foo".parse::<TrainMode>().is_err());
    }
}
