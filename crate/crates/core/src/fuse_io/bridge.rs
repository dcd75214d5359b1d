//! Moving information between the 2D rasters and the 3D cloud.

use std::path::Path;

use serde::Deserialize;

use super::cloud::PointCloud;
use super::raster::{GridSpec, RasterGrid};
use crate::error::{Error, Result};
use crate::geom::KdTree;

/// Nearest pixel centre (in XY) for every coordinate, via a kd-tree over the
/// raster's pixel centres. Pixel index is `row * width + col`; ties go to the
/// lower pixel index.
pub fn nearest_pixels(grid: &GridSpec, coords: &[[f64; 3]]) -> Result<Vec<usize>> {
    let centers: Vec<[f64; 2]> = (0..grid.height)
        .flat_map(|row| (0..grid.width).map(move |col| (col, row)))
        .map(|(col, row)| grid.center(col, row))
        .collect();
    let tree = KdTree::from_xy(&centers)?;
    Ok(coords.iter().map(|p| tree.nearest(&p[..2])).collect())
}

/// Result of [`attach_spectra`].
#[derive(Debug, Clone)]
pub struct Attached {
    pub cloud: PointCloud,
    /// Points whose nearest pixel holds nodata in at least one band.
    pub nodata_points: Vec<usize>,
}

/// Appends the bands of each point's nearest raster pixel (no resampling).
pub fn attach_spectra(cloud: &PointCloud, raster: &RasterGrid, prefix: &str) -> Result<Attached> {
    cloud.validate()?;
    let pixels = nearest_pixels(&raster.grid, &cloud.coords)?;
    let b = raster.bands;
    let mut values = Vec::with_capacity(cloud.len() * b);
    let mut nodata_points = Vec::new();
    for (i, &px) in pixels.iter().enumerate() {
        let mut flagged = false;
        for band in 0..b {
            let v = raster.get(band, px);
            flagged |= raster.is_nodata(v);
            values.push(v);
        }
        if flagged {
            nodata_points.push(i);
        }
    }
    let offset = cloud.bands();
    let names = (0..b).map(|i| format!("{prefix}{}", offset + i)).collect();
    let mut out = cloud.clone();
    out.append_bands(&values, names)?;
    Ok(Attached {
        cloud: out,
        nodata_points,
    })
}

/// Replaces values flagged by `is_nodata` in bands `first..` with the mean of
/// that band over the remaining points. Returns the number of values replaced.
pub fn fill_nodata(
    cloud: &mut PointCloud,
    first: usize,
    is_nodata: impl Fn(f64) -> bool,
) -> Result<usize> {
    let b = cloud.bands();
    let mut replaced = 0;
    for band in first..b {
        let (mut sum, mut valid) = (0.0, 0usize);
        for row in cloud.attrs.chunks_exact(b) {
            if !is_nodata(row[band]) {
                sum += row[band];
                valid += 1;
            }
        }
        if valid == cloud.len() {
            continue;
        }
        if valid == 0 {
            return Err(Error::Empty(format!(
                "band {} holds no data at any point",
                cloud.band_names[band]
            )));
        }
        let mean = sum / valid as f64;
        for row in cloud.attrs.chunks_exact_mut(b) {
            if is_nodata(row[band]) {
                row[band] = mean;
                replaced += 1;
            }
        }
    }
    Ok(replaced)
}

/// Nadir transfer: each point takes its nearest pixel's label; nodata becomes `ignore_label`.
pub fn transfer_labels_2d_to_3d(cloud: &PointCloud, labels: &RasterGrid) -> Result<PointCloud> {
    if labels.bands != 1 {
        return Err(Error::invalid(format!(
            "label raster must have one band, has {}",
            labels.bands
        )));
    }
    let pixels = nearest_pixels(&labels.grid, &cloud.coords)?;
    let mut out = cloud.clone();
    let mut assigned = Vec::with_capacity(cloud.len());
    for &px in &pixels {
        let v = labels.get(0, px);
        if labels.is_nodata(v) {
            assigned.push(cloud.ignore_label);
        } else if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            assigned.push(v as u32);
        } else {
            return Err(Error::invalid(format!(
                "label raster holds non-label value {v}"
            )));
        }
    }
    out.labels = Some(assigned);
    Ok(out)
}

/// Ground / non-ground flag for every class in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundClassMap {
    ground: Vec<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundMapFile {
    ground: Vec<u32>,
    non_ground: Vec<u32>,
}

impl GroundClassMap {
    /// Every class below `max + 1` must appear in exactly one of the two lists.
    pub fn new(ground: &[u32], non_ground: &[u32]) -> Result<Self> {
        let c = ground
            .iter()
            .chain(non_ground)
            .max()
            .map_or(0, |m| *m as usize + 1);
        let mut flags: Vec<Option<bool>> = vec![None; c];
        for (&cls, is_ground) in ground
            .iter()
            .map(|c| (c, true))
            .chain(non_ground.iter().map(|c| (c, false)))
        {
            if flags[cls as usize].replace(is_ground).is_some() {
                return Err(Error::Config(format!("class {cls} is flagged twice")));
            }
        }
        let ground = flags
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.ok_or_else(|| Error::Config(format!("class {i} has no ground flag"))))
            .collect::<Result<_>>()?;
        Ok(GroundClassMap { ground })
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let f: GroundMapFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::new(&f.ground, &f.non_ground)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_toml(&text)
    }

    pub fn num_classes(&self) -> usize {
        self.ground.len()
    }

    pub fn flag(&self, class: u32) -> Option<bool> {
        self.ground.get(class as usize).copied()
    }
}

/// Two-stage nadir projection of 3D labels onto `grid`.
///
/// Stage 1 gives every pixel that contains a point the label of the nearest
/// ground-class point in XY. Stage 2 overwrites each pixel containing a
/// non-ground point with the label of its highest such point (ties: lower
/// point index). Pixels containing no point stay nodata.
pub fn project_labels_3d_to_2d(
    cloud: &PointCloud,
    grid: GridSpec,
    ground_map: &GroundClassMap,
    nodata: f64,
) -> Result<RasterGrid> {
    grid.validate()?;
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("projection needs a labelled cloud"))?;
    let mut is_ground = Vec::with_capacity(labels.len());
    for &l in labels {
        is_ground.push(ground_map.flag(l).ok_or_else(|| {
            Error::Config(format!("ground map has no flag for predicted class {l}"))
        })?);
    }
    let mut out = RasterGrid::filled(grid, 1, nodata, nodata);
    let mut occupied = vec![false; grid.pixels()];
    // (z, point) of the highest non-ground point per pixel
    let mut top: Vec<Option<(f64, usize)>> = vec![None; grid.pixels()];
    for (i, p) in cloud.coords.iter().enumerate() {
        let Some((c, r)) = grid.cell_of(p[0], p[1]) else {
            continue;
        };
        let px = r * grid.width + c;
        occupied[px] = true;
        if !is_ground[i] {
            match top[px] {
                Some((z, _)) if z >= p[2] => {}
                _ => top[px] = Some((p[2], i)),
            }
        }
    }
    let ground_pts: Vec<usize> = (0..cloud.len()).filter(|&i| is_ground[i]).collect();
    if !ground_pts.is_empty() {
        let xy: Vec<[f64; 2]> = ground_pts
            .iter()
            .map(|&i| [cloud.coords[i][0], cloud.coords[i][1]])
            .collect();
        let tree = KdTree::from_xy(&xy)?;
        for row in 0..grid.height {
            for col in 0..grid.width {
                let px = row * grid.width + col;
                if occupied[px] {
                    let nearest = ground_pts[tree.nearest(&grid.center(col, row))];
                    out.set(0, px, labels[nearest] as f64);
                }
            }
        }
    }
    for (px, t) in top.iter().enumerate() {
        if let Some((_, i)) = t {
            out.set(0, px, labels[*i] as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(w: usize, h: usize) -> GridSpec {
        GridSpec {
            origin: [0.0, 0.0],
            cell: 1.0,
            width: w,
            height: h,
        }
    }

    #[test]
    fn attach_uses_unique_nearest_centre() {
        let grid = unit_grid(2, 2);
        let raster = RasterGrid::new(grid, 1, vec![10.0, 11.0, 12.0, 13.0], -1.0).unwrap();
        let cloud = PointCloud::new(vec![[0.4, 0.6, 5.0]]);
        let out = attach_spectra(&cloud, &raster, "band_").unwrap();
        assert_eq!(out.cloud.attrs, vec![10.0]);
        assert_eq!(out.cloud.band_names, vec!["band_0".to_string()]);
    }

    #[test]
    fn nodata_filled_with_band_mean() {
        let mut c = PointCloud::new(vec![[0.0; 3]; 3]);
        c.append_bands(
            &[1.0, 5.0, -1.0, 6.0, 3.0, 7.0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(fill_nodata(&mut c, 0, |v| v == -1.0).unwrap(), 1);
        assert_eq!(c.attrs, vec![1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        let mut all = PointCloud::new(vec![[0.0; 3]]);
        all.append_bands(&[-1.0], vec!["a".into()]).unwrap();
        assert!(fill_nodata(&mut all, 0, |v| v == -1.0).is_err());
    }

    #[test]
    fn attach_tie_takes_lower_pixel() {
        let raster = RasterGrid::new(unit_grid(2, 1), 1, vec![1.0, 2.0], -1.0).unwrap();
        let cloud = PointCloud::new(vec![[1.0, 0.5, 0.0]]);
        assert_eq!(
            attach_spectra(&cloud, &raster, "b").unwrap().cloud.attrs,
            vec![1.0]
        );
    }

    #[test]
    fn attach_flags_nodata() {
        let raster = RasterGrid::new(unit_grid(2, 1), 1, vec![-1.0, 2.0], -1.0).unwrap();
        let cloud = PointCloud::new(vec![[0.2, 0.5, 0.0], [1.7, 0.5, 0.0]]);
        let out = attach_spectra(&cloud, &raster, "b").unwrap();
        assert_eq!(out.nodata_points, vec![0]);
        assert_eq!(out.cloud.attrs, vec![-1.0, 2.0]);
    }

    #[test]
    fn labels_from_uniform_raster_and_nodata() {
        let raster = RasterGrid::new(unit_grid(2, 1), 1, vec![3.0, -9999.0], -9999.0).unwrap();
        let cloud = PointCloud::new(vec![[0.1, 0.1, 0.0], [1.9, 0.1, 0.0]]);
        let out = transfer_labels_2d_to_3d(&cloud, &raster).unwrap();
        assert_eq!(out.labels, Some(vec![3, 0]));
    }

    fn map() -> GroundClassMap {
        // 1 = grass (ground), 2 = tree, 3 = building
        GroundClassMap::new(&[0, 1], &[2, 3]).unwrap()
    }

    #[test]
    fn tree_above_grass_wins_pixel() {
        let mut cloud = PointCloud::new(vec![[0.5, 0.5, 0.0], [0.5, 0.5, 8.0]]);
        cloud.labels = Some(vec![1, 2]);
        let r = project_labels_3d_to_2d(&cloud, unit_grid(1, 1), &map(), -1.0).unwrap();
        assert_eq!(r.values, vec![2.0]);
    }

    #[test]
    fn ground_only_and_empty_pixels() {
        let mut cloud = PointCloud::new(vec![[0.5, 0.5, 0.0]]);
        cloud.labels = Some(vec![1]);
        let r = project_labels_3d_to_2d(&cloud, unit_grid(2, 1), &map(), -1.0).unwrap();
        assert_eq!(r.values, vec![1.0, -1.0]);
    }

    #[test]
    fn highest_non_ground_point_wins() {
        let mut cloud = PointCloud::new(vec![[0.5, 0.5, 3.0], [0.4, 0.4, 9.0], [0.6, 0.6, 1.0]]);
        cloud.labels = Some(vec![3, 2, 1]);
        let r = project_labels_3d_to_2d(&cloud, unit_grid(1, 1), &map(), -1.0).unwrap();
        assert_eq!(r.values, vec![2.0]);
    }

    #[test]
    fn ground_map_must_be_complete() {
        assert!(GroundClassMap::new(&[0, 1], &[3]).is_err());
        assert!(GroundClassMap::new(&[0, 1], &[1]).is_err());
        let mut cloud = PointCloud::new(vec![[0.5, 0.5, 0.0]]);
        cloud.labels = Some(vec![7]);
        assert!(project_labels_3d_to_2d(&cloud, unit_grid(1, 1), &map(), -1.0).is_err());
    }

    #[test]
    fn ground_map_toml() {
        let m = GroundClassMap::parse_toml("ground = [0, 1]\nnon_ground = [2]\n").unwrap();
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.flag(2), Some(false));
        assert!(GroundClassMap::parse_toml("ground = [0]\nnon_ground = [1]\nextra = 1\n").is_err());
    }
}
