use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centres XY on the block's bounding-box midpoint, drops Z to the block
/// minimum, then divides every axis by the largest axis extent.
pub fn normalize_coords(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let div = if extent > 0.0 { extent } else { 1.0 };
    let half = [(hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0];
    points
        .iter()
        .map(|p| {
            [
                ((p[0] - lo[0]) - half[0]) / div,
                ((p[1] - lo[1]) - half[1]) / div,
                (p[2] - lo[2]) / div,
            ]
        })
        .collect()
}

/// Per-band min/max fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl SpectralNormalizer {
    /// Fits on row-major `[N, bands]` attributes.
    pub fn fit(attrs: &[f64], bands: usize) -> Result<Self> {
        if bands == 0 {
            return Ok(SpectralNormalizer {
                min: Vec::new(),
                max: Vec::new(),
            });
        }
        check_finite(attrs, bands)?;
        let mut min = vec![f64::INFINITY; bands];
        let mut max = vec![f64::NEG_INFINITY; bands];
        for row in attrs.chunks_exact(bands) {
            for b in 0..bands {
                min[b] = min[b].min(row[b]);
                max[b] = max[b].max(row[b]);
            }
        }
        if attrs.is_empty() {
            min.fill(0.0);
            max.fill(0.0);
        }
        Ok(SpectralNormalizer { min, max })
    }

    pub fn bands(&self) -> usize {
        self.min.len()
    }

    /// Scales into [0, 1], clamping values outside the fitted range; zero-range bands map to 0.
    pub fn apply(&self, attrs: &[f64]) -> Result<Vec<f64>> {
        let bands = self.bands();
        if bands == 0 {
            return Ok(Vec::new());
        }
        if !attrs.len().is_multiple_of(bands) {
            return Err(Error::invalid(format!(
                "{} attribute values do not divide into {bands} bands",
                attrs.len()
            )));
        }
        check_finite(attrs, bands)?;
        Ok(attrs
            .chunks_exact(bands)
            .flat_map(|row| {
                row.iter().enumerate().map(|(b, &v)| {
                    let range = self.max[b] - self.min[b];
                    if range > 0.0 {
                        ((v - self.min[b]) / range).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
            })
            .collect())
    }
}

fn check_finite(attrs: &[f64], bands: usize) -> Result<()> {
    match attrs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            what: "spectral band".into(),
            index: i % bands,
        }),
        None => Ok(()),
    }
}

/// One-shot min-max scaling of `[N, bands]` attributes.
pub fn normalize_spectra(attrs: &[f64], bands: usize) -> Result<Vec<f64>> {
    SpectralNormalizer::fit(attrs, bands)?.apply(attrs)
}
