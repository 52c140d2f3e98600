//! Regression and classification objectives with analytic gradients.

use crate::assign::TrainTuple;
use crate::error::{Error, Result};

use super::{ClassifierModel, RegressorModel};

/// Smooth L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Number of samples that contributed to the loss.
    pub contributing: usize,
    /// Set when every tuple in the batch was background: the loss is 0 and
    /// all gradients are zero.
    pub all_background: bool,
}

fn check_batch(batch: &[TrainTuple], inputs: &[Vec<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if batch.len() != inputs.len() {
        return Err(Error::DimensionMismatch { expected: batch.len(), actual: inputs.len() });
    }
    Ok(())
}

/// Mean smooth-L1 over foreground tuples between the class-specific head and
/// the regression target. Background tuples contribute nothing; only the
/// head of each tuple's own class receives gradient.
pub fn regression_loss(model: &RegressorModel, batch: &[TrainTuple], inputs: &[Vec<f64>]) -> Result<LossOutput> {
    check_batch(batch, inputs)?;
    let mut grads = vec![0.0; model.mlp.num_params()];
    let foreground = batch.iter().filter(|t| t.delta_target.is_some()).count();
    if foreground == 0 {
        return Ok(LossOutput { loss: 0.0, grads, contributing: 0, all_background: true });
    }
    let scale = 1.0 / foreground as f64;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; model.mlp.output_dim()];
    for (t, x) in batch.iter().zip(inputs) {
        let Some(target) = t.delta_target else { continue };
        let k = t.class_label.index();
        if k == 0 || k > model.num_classes {
            return Err(Error::ModelMismatch(format!(
                "class {k} outside regressor range 1..={}",
                model.num_classes
            )));
        }
        let trace = model.mlp.forward_trace(x)?;
        let head = 4 * (k - 1);
        d_out.iter_mut().for_each(|v| *v = 0.0);
        for (j, want) in target.as_array().into_iter().enumerate() {
            let r = trace.output()[head + j] - want;
            loss += smooth_l1(r);
            d_out[head + j] = smooth_l1_grad(r) * scale;
        }
        model.mlp.backward(&trace, &d_out, &mut grads);
    }
    Ok(LossOutput { loss: loss * scale, grads, contributing: foreground, all_background: false })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean softmax cross-entropy over `num_classes + 1` outputs (0 = background).
pub fn classifier_loss(model: &ClassifierModel, batch: &[TrainTuple], inputs: &[Vec<f64>]) -> Result<LossOutput> {
    check_batch(batch, inputs)?;
    let mut grads = vec![0.0; model.mlp.num_params()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (t, x) in batch.iter().zip(inputs) {
        let label = t.class_label.index();
        if label > model.num_classes {
            return Err(Error::ModelMismatch(format!(
                "label {label} outside classifier range 0..={}",
                model.num_classes
            )));
        }
        let trace = model.mlp.forward_trace(x)?;
        let logits = trace.output();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
        loss += log_sum - logits[label];
        let mut d_out: Vec<f64> = logits.iter().map(|&z| (z - log_sum).exp() * scale).collect();
        d_out[label] -= scale;
        model.mlp.backward(&trace, &d_out, &mut grads);
    }
    Ok(LossOutput { loss: loss * scale, grads, contributing: batch.len(), all_background: false })
}
