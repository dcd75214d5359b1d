use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse_io::PointCloud;
use crate::geom::{
    cover_block, normalize_coords, partition_blocks, seeded_rng, Block, SpectralNormalizer,
};
use crate::model::BlockInput;

/// Square XY blocks of `size` metres every `stride` metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockSpec {
    pub size: f64,
    pub stride: f64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            size: 75.0,
            stride: 25.0,
        }
    }
}

impl BlockSpec {
    pub fn partition(&self, cloud: &PointCloud) -> Result<Vec<Block>> {
        partition_blocks(&cloud.coords, self.size, self.stride)
    }
}

/// One fixed-size model input cut from a block.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: BlockInput,
    /// Labels of the sampled points (`ignore_label` when the cloud has none).
    pub labels: Vec<u32>,
    /// Cloud index of every sampled point.
    pub points: Vec<usize>,
    pub block: usize,
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Covers every member of each block with samples of exactly `n` points.
///
/// Coordinates are recentred per sample; bands go through `norm`.
pub fn build_samples(
    cloud: &PointCloud,
    norm: &SpectralNormalizer,
    blocks: &[Block],
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if norm.bands() != cloud.bands() {
        return Err(Error::invalid(format!(
            "normaliser has {} bands, cloud has {}",
            norm.bands(),
            cloud.bands()
        )));
    }
    let b = cloud.bands();
    let mut out = Vec::new();
    for (bi, block) in blocks.iter().enumerate() {
        let chunks = cover_block(&block.members, n, mix(seed, bi as u64, 0))?;
        for (ci, points) in chunks.into_iter().enumerate() {
            let raw: Vec<[f64; 3]> = points.iter().map(|&i| cloud.coords[i]).collect();
            let mut attrs = Vec::with_capacity(n * b);
            for &i in &points {
                attrs.extend_from_slice(cloud.attr_row(i));
            }
            let labels = match &cloud.labels {
                Some(l) => points.iter().map(|&i| l[i]).collect(),
                None => vec![cloud.ignore_label; n],
            };
            let fps_start = seeded_rng(mix(seed, bi as u64, ci as u64 + 1)).random_range(0..n);
            out.push(Sample {
                input: BlockInput {
                    coords: normalize_coords(&raw),
                    bands: norm.apply(&attrs)?,
                    fps_start,
                },
                labels,
                points,
                block: bi,
            });
        }
    }
    Ok(out)
}

/// Seeded split of block indices into (train, validation). Both sides get at
/// least one block when there are two or more.
pub fn split_blocks(
    n_blocks: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_blocks < 2 {
        return Err(Error::invalid(format!(
            "{n_blocks} block(s) cannot be split into training and validation sets"
        )));
    }
    let mut idx: Vec<usize> = (0..n_blocks).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let n_val = ((n_blocks as f64 * val_fraction).round() as usize).clamp(1, n_blocks - 1);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Counts of each class over the samples' non-ignored labels.
pub fn class_counts(samples: &[Sample], classes: usize, ignore_label: u32) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for s in samples {
        for &l in &s.labels {
            if l == ignore_label {
                continue;
            }
            *counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::invalid(format!("label {l} outside {classes} classes")))? +=
                1;
        }
    }
    Ok(counts)
}

/// `1 / frequency` for every present class, scaled so present classes average 1;
/// absent classes get 0.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
        .collect();
    let present = counts.iter().filter(|&&c| c > 0).count();
    let mean = inv.iter().sum::<f64>() / present.max(1) as f64;
    inv.iter()
        .map(|v| if mean > 0.0 { v / mean } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_both_sides() {
        let (t, v) = split_blocks(10, 0.1, 3).unwrap();
        assert_eq!((t.len(), v.len()), (9, 1));
        let (t, v) = split_blocks(2, 0.01, 3).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_blocks(1, 0.1, 3).is_err());
    }

    #[test]
    fn weights_average_to_one() {
        let w = inverse_frequency_weights(&[0, 10, 30]);
        assert_eq!(w[0], 0.0);
        assert!((w[1] + w[2] - 2.0).abs() < 1e-12);
        assert!((w[1] / w[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn samples_cover_every_point() {
        let coords: Vec<[f64; 3]> = (0..50).map(|i| [i as f64, (i % 7) as f64, 0.0]).collect();
        let mut cloud = PointCloud::new(coords);
        cloud
            .append_bands(&vec![0.5; 50], vec!["b0".into()])
            .unwrap();
        let norm = SpectralNormalizer::fit(&cloud.attrs, 1).unwrap();
        let blocks = BlockSpec {
            size: 100.0,
            stride: 100.0,
        }
        .partition(&cloud)
        .unwrap();
        let s = build_samples(&cloud, &norm, &blocks, 16, 1).unwrap();
        assert_eq!(s.len(), 4);
        let mut seen: Vec<usize> = s.iter().flat_map(|x| x.points.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 50);
    }
}
