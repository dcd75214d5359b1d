use super::data::{build_samples, BlockSpec};
use crate::error::{Error, Result};
use crate::fuse_io::{ParamSet, PointCloud};
use crate::geom::{squared_distance, KdTree, SpectralNormalizer};
use crate::model::Model;
use crate::numcore::Tensor;

const NORM_MIN: &str = "norm.min";
const NORM_MAX: &str = "norm.max";

/// Row-wise argmax; ties go to the lower class.
pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Model parameters plus the spectral normaliser, ready for the checkpoint container.
pub fn checkpoint_params(model: &Model, norm: &SpectralNormalizer) -> Result<ParamSet> {
    let mut p = model.params.clone();
    if norm.bands() > 0 {
        p.insert(
            NORM_MIN.into(),
            Tensor::new(&[norm.bands()], norm.min.clone())?,
        );
        p.insert(
            NORM_MAX.into(),
            Tensor::new(&[norm.bands()], norm.max.clone())?,
        );
    }
    Ok(p)
}

/// Inverse of [`checkpoint_params`].
pub fn split_checkpoint(mut params: ParamSet) -> Result<(ParamSet, SpectralNormalizer)> {
    let min = params.remove(NORM_MIN);
    let max = params.remove(NORM_MAX);
    let norm = match (min, max) {
        (Some(a), Some(b)) if a.len() == b.len() => SpectralNormalizer {
            min: a.into_data(),
            max: b.into_data(),
        },
        _ => {
            return Err(Error::Checkpoint(
                "checkpoint lacks the spectral normaliser".into(),
            ))
        }
    };
    Ok((params, norm))
}

/// Per-point outputs of [`infer_cloud`], in cloud order.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudInference {
    pub labels: Vec<u32>,
    /// Row-major `[N, width]` penultimate features.
    pub features: Vec<f64>,
    pub width: usize,
    /// Points that were never sampled and took their nearest labelled neighbour's output.
    pub filled: usize,
}

/// Runs the model over every block of `cloud`.
///
/// A point covered by several blocks keeps the output of the block whose
/// centre is nearest in XY (earlier block on ties; first sample within a
/// block). Points left uncovered copy their nearest covered point.
pub fn infer_cloud(
    model: &Model,
    norm: &SpectralNormalizer,
    cloud: &PointCloud,
    blocks: &BlockSpec,
    seed: u64,
) -> Result<CloudInference> {
    if cloud.bands() != model.config.bands || norm.bands() != model.config.bands {
        return Err(Error::invalid(format!(
            "cloud has {} bands, checkpoint expects {}",
            cloud.bands(),
            model.config.bands
        )));
    }
    cloud.validate()?;
    let parts = blocks.partition(cloud)?;
    let samples = build_samples(cloud, norm, &parts, model.config.n_input, seed)?;
    let n = cloud.len();
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    let mut labels = vec![0u32; n];
    let mut width = 0;
    let mut features = Vec::new();
    for s in &samples {
        let pred = model.predict_block(&s.input)?;
        if width == 0 {
            width = pred.features.last_dim();
            features = vec![0.0; n * width];
        }
        let lab = argmax_rows(&pred.logits);
        let c = parts[s.block].center();
        for (r, &p) in s.points.iter().enumerate() {
            let d = squared_distance(2, &cloud.coords[p], &c);
            let take = match best[p] {
                None => true,
                Some((bd, bb)) => d < bd && bb != s.block,
            };
            if take {
                best[p] = Some((d, s.block));
                labels[p] = lab[r];
                features[p * width..(p + 1) * width].copy_from_slice(pred.features.row(r));
            }
        }
    }
    let covered: Vec<usize> = (0..n).filter(|&i| best[i].is_some()).collect();
    let filled = n - covered.len();
    if filled > 0 {
        let pts: Vec<[f64; 3]> = covered.iter().map(|&i| cloud.coords[i]).collect();
        let tree = KdTree::from_xyz(&pts)?;
        for i in (0..n).filter(|&i| best[i].is_none()) {
            let src = covered[tree.nearest(&cloud.coords[i])];
            labels[i] = labels[src];
            let (a, b) = (src * width, i * width);
            features.copy_within(a..a + width, b);
        }
    }
    Ok(CloudInference {
        labels,
        features,
        width,
        filled,
    })
}

/// Copy of `cloud` carrying the predicted labels.
pub fn predict_cloud(
    model: &Model,
    norm: &SpectralNormalizer,
    cloud: &PointCloud,
    blocks: &BlockSpec,
    seed: u64,
) -> Result<PointCloud> {
    let inf = infer_cloud(model, norm, cloud, blocks, seed)?;
    let mut out = cloud.clone();
    out.labels = Some(inf.labels);
    Ok(out)
}

/// `[N, width]` penultimate features in cloud order.
pub fn export_features(
    model: &Model,
    norm: &SpectralNormalizer,
    cloud: &PointCloud,
    blocks: &BlockSpec,
    seed: u64,
) -> Result<Tensor> {
    let inf = infer_cloud(model, norm, cloud, blocks, seed)?;
    Tensor::new(&[cloud.len(), inf.width], inf.features)
}
