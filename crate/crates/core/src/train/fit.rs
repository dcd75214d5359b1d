use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::data::{mix, Sample};
use super::infer::argmax_rows;
use super::optim::{adam_step, OptimState};
use super::{cross_entropy_loss, late_fusion_loss, TrainConfig};
use crate::error::{Error, Result};
use crate::fuse_io::ParamSet;
use crate::geom::seeded_rng;
use crate::metrics::{scores, ConfusionMatrix};
use crate::model::{Model, Pyramid};
use crate::numcore::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub val_miou: f64,
    /// Accuracy of the training forward passes (before each step).
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// 0 when no epoch completed.
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub best_params: ParamSet,
    pub steps: u64,
    /// Epoch in which a non-finite loss or gradient stopped training.
    pub diverged: Option<usize>,
    pub stopped_early: bool,
}

fn sample_loss(
    model: &Model,
    g: &mut Graph,
    sample: &Sample,
    pyr: &Pyramid,
    weights: &[f64],
    ignore: u32,
) -> Result<(
    crate::model::VarMap,
    crate::numcore::Var,
    crate::numcore::Var,
)> {
    let vars = model.bind(g, true);
    let out = model.forward_with(g, &vars, &sample.input, pyr)?;
    let loss = match out.branch_logits {
        Some((zg, zs)) => {
            let l1 = cross_entropy_loss(g, zg, &sample.labels, weights, ignore)?;
            let l2 = cross_entropy_loss(g, zs, &sample.labels, weights, ignore)?;
            late_fusion_loss(g, l1, l2, model.config.alpha)?
        }
        None => cross_entropy_loss(g, out.logits, &sample.labels, weights, ignore)?,
    };
    Ok((vars, loss, out.logits))
}

/// Validation mIoU over all labelled points of `samples`.
pub(crate) fn evaluate_samples(
    model: &Model,
    samples: &[Sample],
    pyramids: &[Pyramid],
    ignore: u32,
) -> Result<f64> {
    let c = model.config.num_classes;
    let mut cm = ConfusionMatrix::new(c);
    for (s, pyr) in samples.iter().zip(pyramids) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let out = model.forward_with(&mut g, &vars, &s.input, pyr)?;
        let pred = argmax_rows(g.value(out.logits));
        cm.merge(&ConfusionMatrix::from_labels(
            &pred,
            &s.labels,
            c,
            Some(ignore),
        )?)?;
    }
    Ok(scores(&cm)?.miou)
}

/// Adam training with one optimiser step per batch of samples.
///
/// Sample order is reshuffled every epoch from `cfg.seed`. After each epoch
/// the validation mIoU is measured and the parameters of the best epoch (first
/// one wins ties) are kept in the report; `model` ends at the last state.
pub fn train(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    weights: &[f64],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(
            "training needs at least one training and one validation sample".into(),
        ));
    }
    if weights.len() != model.config.num_classes {
        return Err(Error::invalid(format!(
            "{} class weights for {} classes",
            weights.len(),
            model.config.num_classes
        )));
    }
    let train_pyr = train
        .iter()
        .map(|s| model.pyramid(&s.input))
        .collect::<Result<Vec<_>>>()?;
    let val_pyr = val
        .iter()
        .map(|s| model.pyramid(&s.input))
        .collect::<Result<Vec<_>>>()?;
    let mut state = OptimState::new(&model.params);
    let mut report = TrainReport {
        records: Vec::new(),
        best_epoch: 0,
        best_val_miou: f64::NEG_INFINITY,
        best_params: model.params.clone(),
        steps: 0,
        diverged: None,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seeded_rng(mix(cfg.seed, epoch as u64, 0x5eed)));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut correct, mut seen) = (0u64, 0u64);
        for batch in order.chunks(cfg.batch) {
            let mut acc: ParamSet = ParamSet::new();
            let (mut batch_loss, mut used) = (0.0, 0usize);
            for &i in batch {
                let s = &train[i];
                let mut g = Graph::new();
                let (vars, loss, logits) =
                    match sample_loss(model, &mut g, s, &train_pyr[i], weights, cfg.ignore_label) {
                        Ok(v) => v,
                        Err(Error::Empty(_)) => continue,
                        Err(e) => return Err(e),
                    };
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    report.diverged = Some(epoch);
                    break 'epochs;
                }
                for (p, &t) in argmax_rows(g.value(logits)).iter().zip(&s.labels) {
                    if t != cfg.ignore_label {
                        seen += 1;
                        correct += (*p == t) as u64;
                    }
                }
                let grads = g.backward(loss)?;
                for (name, v) in &vars {
                    if let Some(gr) = grads.get(*v) {
                        match acc.get_mut(name) {
                            Some(a) => a
                                .data_mut()
                                .iter_mut()
                                .zip(gr.data())
                                .for_each(|(a, b)| *a += b),
                            None => {
                                acc.insert(name.clone(), gr.clone());
                            }
                        }
                    }
                }
                batch_loss += lv;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            for t in acc.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            match adam_step(&mut model.params, &acc, &mut state, cfg.lr) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => {
                    report.diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            report.steps += 1;
            loss_sum += batch_loss * inv;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Empty("every training sample is unlabelled".into()));
        }
        let val_miou = evaluate_samples(model, val, &val_pyr, cfg.ignore_label)?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_miou,
            train_accuracy: correct as f64 / seen.max(1) as f64,
        };
        on_epoch(&rec);
        if val_miou > report.best_val_miou {
            report.best_val_miou = val_miou;
            report.best_epoch = epoch;
            report.best_params = model.params.clone();
        }
        let reached = cfg
            .target_train_accuracy
            .is_some_and(|t| rec.train_accuracy >= t);
        report.records.push(rec);
        if reached {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// `# `-prefixed header lines followed by `epoch,loss,val_miou` rows.
pub fn log_csv(header: &str, records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("epoch,loss,val_miou\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.loss, r.val_miou);
    }
    out
}
