//! Confusion-matrix scores for point labels and label rasters.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fuse_io::RasterGrid;

/// `C x C` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Counts `(gt, pred)` pairs, skipping rows whose ground truth is `ignore`.
    pub fn from_labels(
        pred: &[u32],
        gt: &[u32],
        classes: usize,
        ignore: Option<u32>,
    ) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (i, (&p, &t)) in pred.iter().zip(gt).enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if p as usize >= classes || t as usize >= classes {
                return Err(Error::invalid(format!(
                    "label at index {i} (gt {t}, pred {p}) is outside {classes} classes"
                )));
            }
            cm.add(t as usize, p as usize);
        }
        Ok(cm)
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(
                "cannot merge confusion matrices of different sizes",
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub oa: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub iou: Vec<f64>,
    /// Classes with at least one ground-truth sample; only these enter the means.
    pub present: Vec<bool>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub miou: f64,
    pub kappa: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Scores from a confusion matrix. Zero denominators give 0 for that class.
/// Kappa is 1 when chance agreement is already perfect and so is the prediction.
pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix holds no samples".into()));
    }
    let t = total as f64;
    let c = cm.num_classes();
    let mut s = Scores {
        oa: 0.0,
        precision: Vec::with_capacity(c),
        recall: Vec::with_capacity(c),
        f1: Vec::with_capacity(c),
        iou: Vec::with_capacity(c),
        present: Vec::with_capacity(c),
        mean_precision: 0.0,
        mean_recall: 0.0,
        mean_f1: 0.0,
        miou: 0.0,
        kappa: 0.0,
    };
    let mut trace = 0.0;
    let mut pe = 0.0;
    for k in 0..c {
        let tp = cm.get(k, k) as f64;
        let row = cm.row_sum(k) as f64;
        let col = cm.col_sum(k) as f64;
        trace += tp;
        pe += row * col;
        let p = ratio(tp, col);
        let r = ratio(tp, row);
        s.precision.push(p);
        s.recall.push(r);
        s.f1.push(ratio(2.0 * p * r, p + r));
        s.iou.push(ratio(tp, row + col - tp));
        s.present.push(row > 0.0);
    }
    s.oa = trace / t;
    let pe = pe / (t * t);
    s.kappa = if pe == 1.0 {
        if s.oa == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (s.oa - pe) / (1.0 - pe)
    };
    let present = s.present.iter().filter(|p| **p).count() as f64;
    let mean = |v: &[f64]| {
        v.iter()
            .zip(&s.present)
            .filter(|(_, p)| **p)
            .map(|(x, _)| x)
            .sum::<f64>()
            / present
    };
    s.mean_precision = mean(&s.precision);
    s.mean_recall = mean(&s.recall);
    s.mean_f1 = mean(&s.f1);
    s.miou = mean(&s.iou);
    Ok(s)
}

impl Scores {
    /// `class,present,precision,recall,f1,iou` rows followed by the summary metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,present,precision,recall,f1,iou\n");
        for k in 0..self.f1.len() {
            let _ = writeln!(
                out,
                "{k},{},{},{},{},{}",
                self.present[k] as u8, self.precision[k], self.recall[k], self.f1[k], self.iou[k]
            );
        }
        out.push_str("metric,value\n");
        for (name, v) in self.summary() {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }

    pub fn summary(&self) -> [(&'static str, f64); 6] {
        [
            ("oa", self.oa),
            ("mean_precision", self.mean_precision),
            ("mean_recall", self.mean_recall),
            ("mean_f1", self.mean_f1),
            ("miou", self.miou),
            ("kappa", self.kappa),
        ]
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("class  precision  recall     f1         iou\n");
        for k in (0..self.f1.len()).filter(|&k| self.present[k]) {
            let _ = writeln!(
                out,
                "{k:<6} {:<10.4} {:<10.4} {:<10.4} {:.4}",
                self.precision[k], self.recall[k], self.f1[k], self.iou[k]
            );
        }
        for (name, v) in self.summary() {
            let _ = writeln!(out, "{name:<15} {v:.4}");
        }
        out
    }
}

/// Pixelwise scores over pixels that hold data in both rasters.
pub fn evaluate_2d(pred: &RasterGrid, gt: &RasterGrid) -> Result<Scores> {
    evaluate_2d_matrix(pred, gt).and_then(|cm| scores(&cm))
}

pub fn evaluate_2d_matrix(pred: &RasterGrid, gt: &RasterGrid) -> Result<ConfusionMatrix> {
    if pred.grid != gt.grid || pred.bands != 1 || gt.bands != 1 {
        return Err(Error::invalid(format!(
            "label rasters differ: {:?} x{} vs {:?} x{}",
            pred.grid, pred.bands, gt.grid, gt.bands
        )));
    }
    let mut pairs = Vec::new();
    for (i, (&p, &t)) in pred.values.iter().zip(&gt.values).enumerate() {
        if pred.is_nodata(p) || gt.is_nodata(t) {
            continue;
        }
        let as_label = |v: f64| {
            (v >= 0.0 && v.fract() == 0.0)
                .then_some(v as u32)
                .ok_or_else(|| Error::invalid(format!("pixel {i} holds non-label value {v}")))
        };
        pairs.push((as_label(p)?, as_label(t)?));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no pixel holds data in both rasters".into()));
    }
    let c = pairs.iter().map(|&(p, t)| p.max(t)).max().unwrap() as usize + 1;
    let mut cm = ConfusionMatrix::new(c);
    for (p, t) in pairs {
        cm.add(t as usize, p as usize);
    }
    Ok(cm)
}
