use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Points with XYZ coordinates, per-point spectral attributes and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `[N, bands]`.
    pub attrs: Vec<f64>,
    pub band_names: Vec<String>,
    pub labels: Option<Vec<u32>>,
    pub ignore_label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    Csv,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
        {
            Some(e) if e == "ply" => Ok(CloudFormat::PlyAscii),
            Some(e) if e == "csv" => Ok(CloudFormat::Csv),
            _ => Err(Error::invalid(format!(
                "{}: cannot infer cloud format (expected .ply or .csv)",
                path.display()
            ))),
        }
    }
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        PointCloud {
            coords,
            attrs: Vec::new(),
            band_names: Vec::new(),
            labels: None,
            ignore_label: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn attr_row(&self, i: usize) -> &[f64] {
        let b = self.bands();
        &self.attrs[i * b..(i + 1) * b]
    }

    pub fn validate(&self) -> Result<()> {
        if self.attrs.len() != self.len() * self.bands() {
            return Err(Error::invalid(format!(
                "{} attribute values for {} points x {} bands",
                self.attrs.len(),
                self.len(),
                self.bands()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::invalid(format!(
                    "{} labels for {} points",
                    l.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    /// Appends `names.len()` bands from row-major `[N, names.len()]` values.
    pub fn append_bands(&mut self, values: &[f64], names: Vec<String>) -> Result<()> {
        let (old, add) = (self.bands(), names.len());
        if values.len() != self.len() * add {
            return Err(Error::invalid(format!(
                "{} values for {} points x {add} new bands",
                values.len(),
                self.len()
            )));
        }
        let mut attrs = Vec::with_capacity(self.len() * (old + add));
        for i in 0..self.len() {
            attrs.extend_from_slice(&self.attrs[i * old..(i + 1) * old]);
            attrs.extend_from_slice(&values[i * add..(i + 1) * add]);
        }
        self.attrs = attrs;
        self.band_names.extend(names);
        Ok(())
    }

    /// Subset of points in the given order (indices may repeat).
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let b = self.bands();
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            attrs: idx
                .iter()
                .flat_map(|&i| self.attrs[i * b..(i + 1) * b].iter().copied())
                .collect(),
            band_names: self.band_names.clone(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            ignore_label: self.ignore_label,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match CloudFormat::from_path(path)? {
            CloudFormat::PlyAscii => parse_ply(&text, path),
            CloudFormat::Csv => parse_csv(&text, path),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = match CloudFormat::from_path(path)? {
            CloudFormat::PlyAscii => self.to_ply(None),
            CloudFormat::Csv => self.to_csv(),
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// PLY with per-class colours from a fixed palette appended to each vertex.
    pub fn save_colorized_ply(&self, path: &Path) -> Result<()> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("colorized PLY needs labels"))?;
        let colors: Vec<[u8; 3]> = labels.iter().map(|&l| class_color(l)).collect();
        fs::write(path, self.to_ply(Some(&colors))).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z");
        for name in &self.band_names {
            out.push(',');
            out.push_str(name);
        }
        if self.labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for i in 0..self.len() {
            let [x, y, z] = self.coords[i];
            let _ = write!(out, "{x},{y},{z}");
            for v in self.attr_row(i) {
                let _ = write!(out, ",{v}");
            }
            if let Some(l) = &self.labels {
                let _ = write!(out, ",{}", l[i]);
            }
            out.push('\n');
        }
        out
    }

    fn to_ply(&self, colors: Option<&[[u8; 3]]>) -> String {
        let mut out = String::from("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.len());
        for name in ["x", "y", "z"]
            .into_iter()
            .chain(self.band_names.iter().map(|s| s.as_str()))
        {
            let _ = writeln!(out, "property double {name}");
        }
        if self.labels.is_some() {
            out.push_str("property int label\n");
        }
        if colors.is_some() {
            out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        out.push_str("end_header\n");
        for i in 0..self.len() {
            let [x, y, z] = self.coords[i];
            let _ = write!(out, "{x} {y} {z}");
            for v in self.attr_row(i) {
                let _ = write!(out, " {v}");
            }
            if let Some(l) = &self.labels {
                let _ = write!(out, " {}", l[i]);
            }
            if let Some(c) = colors {
                let _ = write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]);
            }
            out.push('\n');
        }
        out
    }
}

/// Fixed 20-entry palette, cycled for larger label values.
pub fn class_color(label: u32) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 20] = [
        [0, 0, 0],
        [0, 205, 0],
        [127, 255, 0],
        [46, 139, 87],
        [0, 139, 0],
        [160, 82, 45],
        [0, 255, 255],
        [255, 255, 255],
        [216, 191, 216],
        [255, 0, 0],
        [170, 160, 150],
        [128, 128, 128],
        [160, 0, 0],
        [80, 0, 0],
        [232, 161, 24],
        [255, 255, 0],
        [238, 154, 0],
        [255, 0, 255],
        [0, 0, 255],
        [176, 196, 222],
    ];
    PALETTE[label as usize % PALETTE.len()]
}

struct Columns {
    xyz: [usize; 3],
    label: Option<usize>,
    bands: Vec<(usize, String)>,
}

fn map_columns(names: &[String], path: &Path, line: usize) -> Result<Columns> {
    let find = |want: &str| names.iter().position(|n| n.eq_ignore_ascii_case(want));
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(Error::parse(path, line, "missing x, y or z column")),
    };
    let label = find("label");
    let bands = names
        .iter()
        .enumerate()
        .filter(|(i, _)| !xyz.contains(i) && Some(*i) != label)
        .map(|(i, n)| (i, n.clone()))
        .collect();
    Ok(Columns { xyz, label, bands })
}

fn ingest_row(
    cloud: &mut PointCloud,
    cols: &Columns,
    fields: &[&str],
    width: usize,
    path: &Path,
    line: usize,
) -> Result<()> {
    if fields.len() != width {
        return Err(Error::parse(
            path,
            line,
            format!("expected {width} fields, found {}", fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(path, line, format!("bad number {:?}", fields[i])))
    };
    cloud
        .coords
        .push([num(cols.xyz[0])?, num(cols.xyz[1])?, num(cols.xyz[2])?]);
    for (i, _) in &cols.bands {
        cloud.attrs.push(num(*i)?);
    }
    if let Some(li) = cols.label {
        let v = num(li)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::parse(
                path,
                line,
                format!("bad label {:?}", fields[li]),
            ));
        }
        cloud.labels.get_or_insert_with(Vec::new).push(v as u32);
    }
    Ok(())
}

fn empty_cloud(cols: &Columns) -> PointCloud {
    PointCloud {
        coords: Vec::new(),
        attrs: Vec::new(),
        band_names: cols.bands.iter().map(|(_, n)| n.clone()).collect(),
        labels: cols.label.map(|_| Vec::new()),
        ignore_label: 0,
    }
}

pub(crate) fn parse_csv(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Empty(format!("{}: no header", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let cols = map_columns(&names, path, hline + 1)?;
    let mut cloud = empty_cloud(&cols);
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        ingest_row(&mut cloud, &cols, &fields, names.len(), path, i + 1)?;
    }
    if cloud.is_empty() {
        return Err(Error::Empty(format!("{}: no points", path.display())));
    }
    Ok(cloud)
}

pub(crate) fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(path, 1, "missing 'ply' magic")),
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut names = Vec::new();
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("unsupported format {other}"),
                ))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse()
                        .map_err(|_| Error::parse(path, i + 1, "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    "list properties are not supported",
                ))
            }
            ["property", _ty, name] => {
                if in_vertex {
                    names.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("unexpected header line {line:?}"),
                ))
            }
        }
    }
    let header_end = header_end.ok_or_else(|| Error::parse(path, 1, "missing end_header"))?;
    let count = vertex_count.ok_or_else(|| Error::parse(path, header_end, "no vertex element"))?;
    if count == 0 {
        return Err(Error::Empty(format!(
            "{}: PLY has 0 vertices",
            path.display()
        )));
    }
    let cols = map_columns(&names, path, header_end)?;
    let mut cloud = empty_cloud(&cols);
    for _ in 0..count {
        let (i, line) = lines
            .next()
            .ok_or_else(|| Error::parse(path, header_end, format!("expected {count} vertices")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        ingest_row(&mut cloud, &cols, &fields, names.len(), path, i + 1)?;
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn csv_with_one_band() {
        let c = parse_csv("x,y,z,b0\n0,0,0,1\n1,0,0,2\n2,0,0,3\n", p()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.bands(), 1);
        assert!(c.labels.is_none());
        assert_eq!(c.attrs, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        match parse_csv("x,y,z\n0,0,0\n1,oops,0\n", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_needs_xyz() {
        assert!(matches!(
            parse_csv("x,y,b\n0,0,0\n", p()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn ply_without_vertices_is_empty() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
        assert!(matches!(parse_ply(text, p()), Err(Error::Empty(_))));
    }

    #[test]
    fn ply_reads_labels_and_bands() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nir\nproperty int label\nend_header\n0 1 2 0.5 3\n1 1 1 0.25 0\n";
        let c = parse_ply(text, p()).unwrap();
        assert_eq!(c.band_names, vec!["nir".to_string()]);
        assert_eq!(c.labels, Some(vec![3, 0]));
        assert_eq!(c.coords[0], [0.0, 1.0, 2.0]);
    }

    #[test]
    fn append_bands_interleaves_rows() {
        let mut c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]);
        c.append_bands(&[1.0, 2.0], vec!["a".into()]).unwrap();
        c.append_bands(&[3.0, 4.0, 5.0, 6.0], vec!["b".into(), "c".into()])
            .unwrap();
        assert_eq!(c.attrs, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
