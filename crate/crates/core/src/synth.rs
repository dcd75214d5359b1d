//! Synthetic labelled scenes with 8 spectral bands.
//!
//! Label 0 is reserved for "unlabelled", so real classes start at 1.
//!
//! - `overfit`: a 75 x 75 m tile with ground (1), a box building (2) and a
//!   spheroid tree canopy (3), each with its own spectral signature.
//! - `xor`: a grid of cells, each either low or raised and either band-A or
//!   band-B dominant. The class is `1 + 2 * raised + band_b`, so geometry
//!   alone or spectra alone can only ever separate two of the four classes.
//!   The layout is point-symmetric about the scene centre, which gives every
//!   class the same XY centroid.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fuse_io::PointCloud;
use crate::geom::seeded_rng;
use crate::train::BlockSpec;

pub const BANDS: usize = 8;
pub const SPECTRAL_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthVariant {
    Overfit,
    Xor,
}

impl std::str::FromStr for SynthVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overfit" => Ok(SynthVariant::Overfit),
            "xor" => Ok(SynthVariant::Xor),
            other => Err(Error::invalid(format!(
                "unknown synthetic variant {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cloud: PointCloud,
    /// Including the unlabelled class 0.
    pub num_classes: usize,
    /// Block layout suited to the scene size.
    pub blocks: BlockSpec,
}

/// Class count (including 0) and block layout of a variant.
fn layout(variant: SynthVariant) -> (usize, BlockSpec) {
    match variant {
        SynthVariant::Overfit => (4, BlockSpec::default()),
        SynthVariant::Xor => (
            5,
            BlockSpec {
                size: 20.0,
                stride: 10.0,
            },
        ),
    }
}

pub fn generate(variant: SynthVariant, seed: u64) -> SynthScene {
    let cloud = match variant {
        SynthVariant::Overfit => overfit_scene(seed),
        SynthVariant::Xor => xor_scene(seed),
    };
    let (num_classes, blocks) = layout(variant);
    SynthScene {
        cloud,
        num_classes,
        blocks,
    }
}

/// Seeds of the validation and held-out xor scenes paired with training seed `seed`.
pub fn xor_companion_seeds(seed: u64) -> (u64, u64) {
    let base = seed.wrapping_mul(3);
    (base.wrapping_add(1), base.wrapping_add(2))
}

/// Run configuration for a generated scene written as `scene.csv`, with the
/// xor companions as `val.csv` and `heldout.csv`.
pub fn run_config(variant: SynthVariant, seed: u64) -> RunConfig {
    let (num_classes, blocks) = layout(variant);
    let mut cfg = RunConfig::default();
    cfg.data.cloud = "scene.csv".into();
    cfg.blocks = blocks;
    cfg.model.num_classes = num_classes;
    cfg.model.bands = BANDS;
    cfg.train.seed = seed;
    match variant {
        SynthVariant::Overfit => {
            cfg.data.validate_on_train = true;
            cfg.train.epochs = 300;
            cfg.train.target_train_accuracy = Some(0.95);
        }
        SynthVariant::Xor => {
            cfg.data.val_cloud = Some("val.csv".into());
            cfg.eval.cloud = Some("heldout.csv".into());
            cfg.model.widths = vec![16, 32, 64, 128];
            cfg.model.n_input = 256;
            cfg.train.batch = 8;
            cfg.train.epochs = 40;
        }
    }
    cfg
}

fn band_names() -> Vec<String> {
    (0..BANDS).map(|b| format!("band_{b}")).collect()
}

fn push_spectrum(
    attrs: &mut Vec<f64>,
    mean: &[f64; BANDS],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) {
    attrs.extend(mean.iter().map(|m| m + noise.sample(rng)));
}

const GROUND: [f64; BANDS] = [0.30, 0.33, 0.36, 0.40, 0.43, 0.46, 0.48, 0.50];
const ROOF: [f64; BANDS] = [0.62, 0.61, 0.60, 0.60, 0.59, 0.58, 0.58, 0.57];
const CANOPY: [f64; BANDS] = [0.08, 0.12, 0.10, 0.15, 0.55, 0.70, 0.72, 0.74];

pub fn overfit_scene(seed: u64) -> PointCloud {
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, SPECTRAL_NOISE).unwrap();
    let jitter = Normal::new(0.0, 0.02).unwrap();
    let mut coords = Vec::with_capacity(8192);
    let mut attrs = Vec::with_capacity(8192 * BANDS);
    let mut labels = Vec::with_capacity(8192);

    // building footprint [10, 30]^2, 8 m tall
    let (b0, b1, bh) = (10.0, 30.0, 8.0);
    while labels.len() < 4192 {
        let (x, y) = (rng.random_range(0.0..75.0), rng.random_range(0.0..75.0));
        if (b0..=b1).contains(&x) && (b0..=b1).contains(&y) {
            continue;
        }
        coords.push([x, y, jitter.sample(&mut rng)]);
        push_spectrum(&mut attrs, &GROUND, &noise, &mut rng);
        labels.push(1);
    }
    let side = b1 - b0;
    let roof_area = side * side;
    let wall_area = 4.0 * side * bh;
    for _ in 0..2000 {
        let u = rng.random_range(0.0..roof_area + wall_area);
        let p = if u < roof_area {
            [rng.random_range(b0..b1), rng.random_range(b0..b1), bh]
        } else {
            let t = rng.random_range(b0..b1);
            let z = rng.random_range(0.0..bh);
            match rng.random_range(0..4) {
                0 => [t, b0, z],
                1 => [t, b1, z],
                2 => [b0, t, z],
                _ => [b1, t, z],
            }
        };
        coords.push(p);
        push_spectrum(&mut attrs, &ROOF, &noise, &mut rng);
        labels.push(2);
    }
    // canopy surface of a spheroid centred 7 m above the ground
    let unit = Normal::new(0.0, 1.0).unwrap();
    let (c, r) = ([55.0, 50.0, 7.0], [6.0, 6.0, 3.5]);
    for _ in 0..2000 {
        let d: [f64; 3] = std::array::from_fn(|_| unit.sample(&mut rng));
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
        coords.push(std::array::from_fn(|a| c[a] + r[a] * d[a] / norm));
        push_spectrum(&mut attrs, &CANOPY, &noise, &mut rng);
        labels.push(3);
    }

    PointCloud {
        coords,
        attrs,
        band_names: band_names(),
        labels: Some(labels),
        ignore_label: 0,
    }
}

pub const XOR_GRID: usize = 8;
pub const XOR_CELL: f64 = 5.0;
pub const XOR_POINTS_PER_CELL: usize = 50;
pub const XOR_HEIGHT: f64 = 3.0;

const BAND_A: [f64; BANDS] = [0.70, 0.70, 0.70, 0.70, 0.30, 0.30, 0.30, 0.30];
const BAND_B: [f64; BANDS] = [0.30, 0.30, 0.30, 0.30, 0.70, 0.70, 0.70, 0.70];

pub fn xor_scene(seed: u64) -> PointCloud {
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, SPECTRAL_NOISE).unwrap();
    let jitter = Normal::new(0.0, 0.02).unwrap();
    let g = XOR_GRID;
    // Assign one half of the cells and mirror them through the centre;
    // each class gets the same number of cell pairs.
    let half = g * g / 2;
    let mut kinds: Vec<u32> = (0..half).map(|i| (i % 4) as u32).collect();
    kinds.shuffle(&mut rng);
    let mut cell_kind = vec![0u32; g * g];
    for (slot, &k) in kinds.iter().enumerate() {
        let (i, j) = (slot / g, slot % g);
        cell_kind[i * g + j] = k;
        cell_kind[(g - 1 - i) * g + (g - 1 - j)] = k;
    }
    let n = g * g * XOR_POINTS_PER_CELL;
    let mut coords = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n * BANDS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..g {
        for j in 0..g {
            let kind = cell_kind[i * g + j];
            let (raised, band_b) = (kind / 2, kind % 2);
            for _ in 0..XOR_POINTS_PER_CELL {
                let x = (j as f64 + rng.random::<f64>()) * XOR_CELL;
                let y = (i as f64 + rng.random::<f64>()) * XOR_CELL;
                coords.push([x, y, raised as f64 * XOR_HEIGHT + jitter.sample(&mut rng)]);
                let mean = if band_b == 1 { &BAND_B } else { &BAND_A };
                push_spectrum(&mut attrs, mean, &noise, &mut rng);
                labels.push(1 + kind);
            }
        }
    }
    PointCloud {
        coords,
        attrs,
        band_names: band_names(),
        labels: Some(labels),
        ignore_label: 0,
    }
}

/// Overall accuracy of a nearest-class-centroid rule on `[N, dim]` features
/// (fit and scored on the same points; ties go to the lower class).
pub fn nearest_centroid_accuracy(features: &[f64], dim: usize, labels: &[u32]) -> Result<f64> {
    if dim == 0 || features.len() != labels.len() * dim || labels.is_empty() {
        return Err(Error::invalid("feature table does not match labels"));
    }
    let c = *labels.iter().max().unwrap() as usize + 1;
    let mut sums = vec![0.0; c * dim];
    let mut counts = vec![0usize; c];
    for (row, &l) in features.chunks_exact(dim).zip(labels) {
        counts[l as usize] += 1;
        for (s, v) in sums[l as usize * dim..].iter_mut().zip(row) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = (0..c)
        .map(|k| {
            (counts[k] > 0).then(|| {
                sums[k * dim..(k + 1) * dim]
                    .iter()
                    .map(|s| s / counts[k] as f64)
                    .collect()
            })
        })
        .collect();
    let mut correct = 0usize;
    for (row, &l) in features.chunks_exact(dim).zip(labels) {
        let mut best = (f64::INFINITY, 0usize);
        for (k, cen) in centroids.iter().enumerate() {
            if let Some(cen) = cen {
                let d: f64 = row.iter().zip(cen).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        correct += (best.1 == l as usize) as usize;
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_counts() {
        let c = overfit_scene(1);
        assert_eq!(c.len(), 8192);
        assert_eq!(c.bands(), BANDS);
        let l = c.labels.as_ref().unwrap();
        for (cls, n) in [(1, 4192), (2, 2000), (3, 2000)] {
            assert_eq!(l.iter().filter(|&&v| v == cls).count(), n);
        }
        c.validate().unwrap();
    }

    #[test]
    fn scenes_are_seeded() {
        assert_eq!(xor_scene(4), xor_scene(4));
        assert_ne!(xor_scene(4), xor_scene(5));
        assert_eq!(overfit_scene(9), overfit_scene(9));
    }

    #[test]
    fn xor_classes_are_balanced() {
        let c = xor_scene(2);
        let l = c.labels.as_ref().unwrap();
        for cls in 1..=4 {
            assert_eq!(l.iter().filter(|&&v| v == cls).count(), l.len() / 4);
        }
    }
}
