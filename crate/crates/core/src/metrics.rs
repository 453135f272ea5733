//! Dice coefficient, Jaccard coefficient, and the iterative ratio loss.
//!
//! The dice used inside the training loss stays soft (no binarization) so
//! gradients exist; reported metrics binarize predictions first. Scalar
//! metric values are accumulated in f64 regardless of tensor precision.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::network::SegmentationMap;
use crate::tensor::{Scalar, Tensor};

/// A metric in `[0, 1]` tagged with the refinement iteration it measures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub iteration: usize,
}

/// Stabilizer for the ratio loss.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "loss epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Binary mask (`1 x 1 x H x W`, every entry exactly 0 or 1).
#[derive(Clone, Debug)]
pub struct GroundTruthMask<S: Scalar = f32> {
    values: Tensor<S>,
}

impl<S: Scalar> GroundTruthMask<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        let (n, c, _, _) = values.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::Shape(format!(
                "mask must be 1x1xHxW, got {:?}",
                values.shape()
            )));
        }
        if !values
            .data()
            .iter()
            .all(|&v| v == S::zero() || v == S::one())
        {
            return Err(Error::Shape("mask entries must be exactly 0 or 1".into()));
        }
        Ok(GroundTruthMask { values })
    }

    /// Binarizes a segmentation map at `threshold` into a mask.
    pub fn from_map(map: &SegmentationMap<S>, threshold: f64) -> Self {
        GroundTruthMask {
            values: map.binarized(threshold).values().clone(),
        }
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn foreground_pixels(&self) -> usize {
        self.values
            .data()
            .iter()
            .filter(|&&v| v == S::one())
            .count()
    }
}

/// Soft dice coefficient: `2 sum(y yhat) / (sum(y^2) + sum(yhat^2))`.
/// Both inputs identically zero is defined as 1.0 (vacuous agreement).
pub fn dice<S: Scalar>(
    pred: &SegmentationMap<S>,
    truth: &GroundTruthMask<S>,
) -> Result<MetricValue> {
    if pred.values().shape() != truth.values().shape() {
        return Err(Error::Shape(format!(
            "dice resolution mismatch: {:?} vs {:?}",
            pred.values().shape(),
            truth.values().shape()
        )));
    }
    let mut inter = 0.0f64;
    let mut pred_sq = 0.0f64;
    let mut truth_sq = 0.0f64;
    for (&p, &t) in pred.values().data().iter().zip(truth.values().data()) {
        let (p, t) = (p.to_f64(), t.to_f64());
        inter += p * t;
        pred_sq += p * p;
        truth_sq += t * t;
    }
    let den = pred_sq + truth_sq;
    let value = if den == 0.0 { 1.0 } else { 2.0 * inter / den };
    Ok(MetricValue {
        value,
        iteration: pred.iteration(),
    })
}

/// Jaccard coefficient of two binary masks: `|A n B| / |A u B|`, with the
/// empty-union convention 1.0.
pub fn jaccard<S: Scalar>(
    pred: &GroundTruthMask<S>,
    truth: &GroundTruthMask<S>,
) -> Result<MetricValue> {
    if pred.values().shape() != truth.values().shape() {
        return Err(Error::Shape(format!(
            "jaccard resolution mismatch: {:?} vs {:?}",
            pred.values().shape(),
            truth.values().shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.values().data().iter().zip(truth.values().data()) {
        let p = p == S::one();
        let t = t == S::one();
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    let value = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    Ok(MetricValue {
        value,
        iteration: 0,
    })
}

/// Ratio loss `L_t = -(D_t + eps) / (D_{t-1} + eps)` as a plain value.
pub fn iter_loss(d_t: MetricValue, d_prev: MetricValue, cfg: &LossConfig) -> f64 {
    -(d_t.value + cfg.epsilon) / (d_prev.value + cfg.epsilon)
}

/// Soft dice as a graph node so gradients flow into the prediction.
/// `truth` must be a constant node of the same shape.
pub fn dice_node<S: Scalar>(graph: &mut Graph<S>, pred: NodeId, truth: NodeId) -> Result<NodeId> {
    let inter = graph.mul(pred, truth)?;
    let inter_sum = graph.sum(inter);
    let num = graph.scale(inter_sum, S::from_f64(2.0));
    let pred_sq = graph.mul(pred, pred)?;
    let pred_sq_sum = graph.sum(pred_sq);
    let truth_sq = graph.mul(truth, truth)?;
    let truth_sq_sum = graph.sum(truth_sq);
    let den = graph.add(pred_sq_sum, truth_sq_sum)?;
    graph.div(num, den)
}

/// Ratio loss as a graph node. `d_prev` is held constant, so the loss is
/// affine in `D_t` with slope `-1 / (D_{t-1} + eps)`.
pub fn iter_loss_node<S: Scalar>(
    graph: &mut Graph<S>,
    d_t: NodeId,
    d_prev: f64,
    cfg: &LossConfig,
) -> NodeId {
    let slope = -1.0 / (d_prev + cfg.epsilon);
    let offset = -cfg.epsilon / (d_prev + cfg.epsilon);
    let scaled = graph.scale(d_t, S::from_f64(slope));
    graph.add_const(scaled, S::from_f64(offset))
}
