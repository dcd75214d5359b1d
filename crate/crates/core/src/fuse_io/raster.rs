use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Placement of a north-up grid: lower-left corner, square cell size, extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub cell: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Centre of pixel `(col, row)`; row 0 is the southernmost row.
    pub fn center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell,
            self.origin[1] + (row as f64 + 0.5) * self.cell,
        ]
    }

    /// Pixel whose cell contains `(x, y)`; cells are half-open `[lo, lo + cell)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin[0]) / self.cell).floor();
        let r = ((y - self.origin[1]) / self.cell).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((c as usize, r as usize))
    }

    /// Parses `"x0,y0,cell,width,height"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::invalid(format!("grid spec {s:?} is not x0,y0,cell,width,height"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        let u = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let spec = GridSpec {
            origin: [f(0)?, f(1)?],
            cell: f(2)?,
            width: u(3)?,
            height: u(4)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell.is_nan() || self.cell <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }
}

/// Georeferenced multi-band grid; values are band-major, then row-major from the south.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub grid: GridSpec,
    pub bands: usize,
    pub values: Vec<f64>,
    pub nodata: f64,
}

pub const DEFAULT_NODATA: f64 = -9999.0;

impl RasterGrid {
    pub fn filled(grid: GridSpec, bands: usize, value: f64, nodata: f64) -> Self {
        RasterGrid {
            grid,
            bands,
            values: vec![value; grid.pixels() * bands],
            nodata,
        }
    }

    pub fn new(grid: GridSpec, bands: usize, values: Vec<f64>, nodata: f64) -> Result<Self> {
        grid.validate()?;
        if bands == 0 || values.len() != grid.pixels() * bands {
            return Err(Error::invalid(format!(
                "{} raster values for {}x{} pixels x {bands} bands",
                values.len(),
                grid.width,
                grid.height
            )));
        }
        Ok(RasterGrid {
            grid,
            bands,
            values,
            nodata,
        })
    }

    pub fn pixel_index(&self, col: usize, row: usize) -> usize {
        row * self.grid.width + col
    }

    pub fn get(&self, band: usize, pixel: usize) -> f64 {
        self.values[band * self.grid.pixels() + pixel]
    }

    pub fn set(&mut self, band: usize, pixel: usize, v: f64) {
        let n = self.grid.pixels();
        self.values[band * n + pixel] = v;
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || (v.is_nan() && self.nodata.is_nan())
    }

    pub fn band(&self, band: usize) -> RasterGrid {
        let n = self.grid.pixels();
        RasterGrid {
            grid: self.grid,
            bands: 1,
            values: self.values[band * n..(band + 1) * n].to_vec(),
            nodata: self.nodata,
        }
    }

    /// Stacks single- or multi-band rasters sharing one grid.
    pub fn stack(parts: Vec<RasterGrid>) -> Result<RasterGrid> {
        let mut iter = parts.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| Error::Empty("no rasters to stack".into()))?;
        for r in iter {
            if r.grid != out.grid {
                return Err(Error::invalid(format!(
                    "raster grids differ: {:?} vs {:?}",
                    out.grid, r.grid
                )));
            }
            // Remap nodata so the stacked raster has a single sentinel.
            out.values.extend(r.values.iter().map(
                |&v| {
                    if r.is_nodata(v) {
                        out.nodata
                    } else {
                        v
                    }
                },
            ));
            out.bands += r.bands;
        }
        Ok(out)
    }

    /// ESRI ASCII grid text for one band.
    pub fn to_ascii_grid(&self, band: usize) -> String {
        let g = &self.grid;
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", g.width);
        let _ = writeln!(out, "nrows {}", g.height);
        let _ = writeln!(out, "xllcorner {}", g.origin[0]);
        let _ = writeln!(out, "yllcorner {}", g.origin[1]);
        let _ = writeln!(out, "cellsize {}", g.cell);
        let _ = writeln!(out, "NODATA_value {}", self.nodata);
        for row in (0..g.height).rev() {
            for col in 0..g.width {
                if col > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}", self.get(band, self.pixel_index(col, row)));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_ascii_grid(text: &str, path: &Path) -> Result<RasterGrid> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let mut header = [None::<f64>; 6];
        const KEYS: [&str; 6] = [
            "ncols",
            "nrows",
            "xllcorner",
            "yllcorner",
            "cellsize",
            "nodata_value",
        ];
        let mut values = Vec::new();
        let mut first_data = None;
        for (i, line) in lines.by_ref() {
            let mut toks = line.split_whitespace();
            let key = toks.next().unwrap_or_default().to_ascii_lowercase();
            if let Some(slot) = KEYS.iter().position(|k| *k == key) {
                let v = toks
                    .next()
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::parse(path, i + 1, format!("bad header value for {key}"))
                    })?;
                header[slot] = Some(v);
            } else {
                first_data = Some((i, line));
                break;
            }
        }
        let need = |slot: usize| {
            header[slot]
                .ok_or_else(|| Error::parse(path, 1, format!("missing header {}", KEYS[slot])))
        };
        let (w, h) = (need(0)?, need(1)?);
        if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 {
            return Err(Error::parse(
                path,
                1,
                "ncols/nrows must be positive integers",
            ));
        }
        let grid = GridSpec {
            origin: [need(2)?, need(3)?],
            cell: need(4)?,
            width: w as usize,
            height: h as usize,
        };
        let nodata = header[5].unwrap_or(DEFAULT_NODATA);
        for (i, line) in first_data.into_iter().chain(lines) {
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad value {tok:?}")))?;
                values.push(v);
            }
        }
        if values.len() != grid.pixels() {
            return Err(Error::parse(
                path,
                0,
                format!(
                    "header declares {} cells, found {} values",
                    grid.pixels(),
                    values.len()
                ),
            ));
        }
        // File rows run north to south.
        let mut south_up = Vec::with_capacity(values.len());
        for row in (0..grid.height).rev() {
            south_up.extend_from_slice(&values[row * grid.width..(row + 1) * grid.width]);
        }
        RasterGrid::new(grid, 1, south_up, nodata).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

/// Writes one ESRI ASCII grid per band. A single-band raster goes to `path`;
/// band `i` of a multi-band raster goes to `<stem>_<i>.asc` next to it.
pub fn save_raster(path: &Path, raster: &RasterGrid) -> Result<Vec<std::path::PathBuf>> {
    let paths = band_paths(path, raster.bands);
    for (b, p) in paths.iter().enumerate() {
        fs::write(p, raster.to_ascii_grid(b)).map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}

pub fn band_paths(path: &Path, bands: usize) -> Vec<std::path::PathBuf> {
    if bands == 1 {
        return vec![path.to_path_buf()];
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("band");
    (0..bands)
        .map(|b| path.with_file_name(format!("{stem}_{b}.asc")))
        .collect()
}

pub fn load_raster(path: &Path) -> Result<RasterGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RasterGrid::parse_ascii_grid(&text, path)
}

/// Loads band files in order and stacks them into one raster.
pub fn load_raster_bands(paths: &[&Path]) -> Result<RasterGrid> {
    RasterGrid::stack(
        paths
            .iter()
            .map(|p| load_raster(p))
            .collect::<Result<_>>()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2() -> GridSpec {
        GridSpec {
            origin: [10.0, 20.0],
            cell: 0.5,
            width: 2,
            height: 2,
        }
    }

    #[test]
    fn rows_are_written_north_first() {
        let r = RasterGrid::new(grid2(), 1, vec![1.0, 2.0, 3.0, 4.0], -9999.0).unwrap();
        let text = r.to_ascii_grid(0);
        assert!(text.ends_with("3 4\n1 2\n"), "{text}");
        assert!(text.contains("cellsize 0.5\n"));
        let back = RasterGrid::parse_ascii_grid(&text, Path::new("mem")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let text =
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -1\n1 2 3\n";
        assert!(RasterGrid::parse_ascii_grid(text, Path::new("mem")).is_err());
    }

    #[test]
    fn cell_lookup_and_centres() {
        let g = grid2();
        assert_eq!(g.center(1, 0), [10.75, 20.25]);
        assert_eq!(g.cell_of(10.6, 20.9), Some((1, 1)));
        assert_eq!(g.cell_of(9.0, 20.0), None);
    }

    #[test]
    fn grid_spec_parsing() {
        let g = GridSpec::parse("0, 0, 0.5, 4, 3").unwrap();
        assert_eq!((g.width, g.height, g.cell), (4, 3, 0.5));
        assert!(GridSpec::parse("0,0,0,4,3").is_err());
        assert!(GridSpec::parse("0,0,1").is_err());
    }
}
