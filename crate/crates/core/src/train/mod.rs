//! Losses, the Adam optimiser, the training loop and block-wise inference.

mod data;
mod fit;
mod infer;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};

pub use data::{
    build_samples, class_counts, inverse_frequency_weights, split_blocks, BlockSpec, Sample,
};
pub use fit::{log_csv, train, EpochRecord, TrainReport};
pub use infer::{
    checkpoint_params, export_features, infer_cloud, predict_cloud, split_checkpoint,
    CloudInference,
};
pub use optim::{adam_step, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Per-class loss weights; `None` uses inverse frequency over the training split.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub val_fraction: f64,
    pub ignore_label: u32,
    /// Stop once an epoch's running training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 16,
            epochs: 100,
            class_weights: None,
            seed: 0,
            val_fraction: 0.1,
            ignore_label: 0,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("class weights must be finite and nonnegative".into());
            }
        }
        Ok(())
    }
}

/// Weighted mean negative log-likelihood over points whose label is not `ignore_label`.
pub fn cross_entropy_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[u32],
    class_weights: &[f64],
    ignore_label: u32,
) -> Result<Var> {
    let c = g.shape(logits).last().copied().unwrap_or(0);
    let mut rows = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore_label {
            rows.push(None);
        } else if (l as usize) < c {
            rows.push(Some(l as usize));
        } else {
            return Err(Error::invalid(format!(
                "label {l} at point {i} is outside {c} classes"
            )));
        }
    }
    g.cross_entropy(logits, rows, class_weights.to_vec())
}

/// `alpha * l1 + (1 - alpha) * l2`.
pub fn late_fusion_loss(g: &mut Graph, l1: Var, l2: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = g.scale(l1, alpha);
    let b = g.scale(l2, 1.0 - alpha);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = cross_entropy_loss(&mut g, z, &[1, 2, 3], &[1.0; 4], 99).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_vanish() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap());
        let l = cross_entropy_loss(&mut g, z, &[0, 1], &[1.0; 2], 9).unwrap();
        assert!(g.value(l).item() < 1e-4);
    }

    #[test]
    fn weights_scale_linearly() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap());
        let a = cross_entropy_loss(&mut g, z, &[0], &[2.0, 1.0], 9).unwrap();
        let z2 = g.constant(Tensor::new(&[1, 2], vec![-0.2, 0.3]).unwrap());
        let b = cross_entropy_loss(&mut g, z2, &[1], &[2.0, 1.0], 9).unwrap();
        assert_eq!(g.value(a).item(), 2.0 * g.value(b).item());
    }

    #[test]
    fn ignored_points_are_skipped() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        assert!(cross_entropy_loss(&mut g, z, &[0, 0], &[1.0; 3], 0).is_err());
        assert!(cross_entropy_loss(&mut g, z, &[0, 7], &[1.0; 3], 0).is_err());
    }

    #[test]
    fn late_fusion_examples() {
        let mut g = Graph::new();
        let l1 = g.constant(Tensor::scalar(2.0));
        let l2 = g.constant(Tensor::scalar(4.0));
        for (alpha, want) in [(0.5, 3.0), (1.0, 2.0), (0.0, 4.0)] {
            let l = late_fusion_loss(&mut g, l1, l2, alpha).unwrap();
            assert_eq!(g.value(l).item(), want);
        }
        assert!(late_fusion_loss(&mut g, l1, l2, 1.5).is_err());
    }
}
