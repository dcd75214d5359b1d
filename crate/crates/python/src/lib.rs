//! Python bindings: point clouds, synthetic scenes, training, prediction and metrics.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hpformer::attention::coverage_table as coverage_rows;
use hpformer::config::{load_run, run_training, save_run, RunConfig};
use hpformer::fuse_io::PointCloud as CoreCloud;
use hpformer::geom::{fps_from, KdTree};
use hpformer::metrics::{scores as core_scores, ConfusionMatrix};
use hpformer::model::Model as CoreModel;
use hpformer::synth;
use hpformer::train::infer_cloud;
use hpformer::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "PointCloud", module = "hpformer_py")]
pub struct PyPointCloud {
    inner: CoreCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (coords, bands=None, labels=None))]
    fn new(
        coords: Vec<[f64; 3]>,
        bands: Option<Vec<Vec<f64>>>,
        labels: Option<Vec<u32>>,
    ) -> PyResult<Self> {
        let n = coords.len();
        let mut inner = CoreCloud::new(coords);
        if let Some(rows) = bands {
            if rows.len() != n {
                return Err(PyValueError::new_err(format!(
                    "{} band rows for {n} points",
                    rows.len()
                )));
            }
            let b = rows.first().map_or(0, Vec::len);
            let names = (0..b).map(|i| format!("band_{i}")).collect();
            inner.append_bands(&rows.concat(), names).map_err(py_err)?;
        }
        inner.labels = labels;
        inner.validate().map_err(py_err)?;
        Ok(PyPointCloud { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CoreCloud::load(Path::new(path))
            .map(|inner| PyPointCloud { inner })
            .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn coords(&self) -> Vec<[f64; 3]> {
        self.inner.coords.clone()
    }

    #[getter]
    fn bands(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len())
            .map(|i| self.inner.attr_row(i).to_vec())
            .collect()
    }

    #[getter]
    fn band_names(&self) -> Vec<String> {
        self.inner.band_names.clone()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels.clone()
    }

    #[setter]
    fn set_labels(&mut self, labels: Option<Vec<u32>>) -> PyResult<()> {
        let old = std::mem::replace(&mut self.inner.labels, labels);
        if let Err(e) = self.inner.validate() {
            self.inner.labels = old;
            return Err(py_err(e));
        }
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "PointCloud(points={}, bands={}, labelled={})",
            self.inner.len(),
            self.inner.bands(),
            self.inner.labels.is_some()
        )
    }
}

#[pyclass(name = "Scores", module = "hpformer_py", get_all)]
pub struct PyScores {
    oa: f64,
    kappa: f64,
    miou: f64,
    mean_f1: f64,
    mean_precision: f64,
    mean_recall: f64,
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    iou: Vec<f64>,
}

/// A trained model loaded from an HPF1 checkpoint and its `.toml` sidecar.
#[pyclass(name = "Model", module = "hpformer_py")]
pub struct PyModel {
    cfg: RunConfig,
    model: CoreModel,
    norm: hpformer::geom::SpectralNormalizer,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: &str) -> PyResult<Self> {
        let (cfg, model, norm) = load_run(Path::new(checkpoint)).map_err(py_err)?;
        Ok(PyModel { cfg, model, norm })
    }

    /// Trains from a TOML run configuration and writes `checkpoint` plus its sidecar.
    #[staticmethod]
    fn train(config: &str, checkpoint: &str) -> PyResult<Self> {
        let path = Path::new(config);
        let cfg = RunConfig::load(path).map_err(py_err)?;
        let paths = cfg.resolved(path.parent().unwrap_or(Path::new(".")));
        let cloud = CoreCloud::load(&paths.data.cloud).map_err(py_err)?;
        let val = match &paths.data.val_cloud {
            Some(p) => Some(CoreCloud::load(p).map_err(py_err)?),
            None => None,
        };
        let out = run_training(&cfg, &cloud, val.as_ref(), |_| {}).map_err(py_err)?;
        save_run(Path::new(checkpoint), &cfg, &out.model, &out.norm).map_err(py_err)?;
        Ok(PyModel {
            cfg,
            model: out.model,
            norm: out.norm,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.num_parameters()
    }

    #[getter]
    fn config_toml(&self) -> String {
        self.cfg.to_toml()
    }

    fn predict(&self, cloud: &PyPointCloud) -> PyResult<Vec<u32>> {
        infer_cloud(
            &self.model,
            &self.norm,
            &cloud.inner,
            &self.cfg.blocks,
            self.cfg.train.seed,
        )
        .map(|inf| inf.labels)
        .map_err(py_err)
    }

    /// Penultimate-layer features, one row per point in input order.
    fn features(&self, cloud: &PyPointCloud) -> PyResult<Vec<Vec<f64>>> {
        let inf = infer_cloud(
            &self.model,
            &self.norm,
            &cloud.inner,
            &self.cfg.blocks,
            self.cfg.train.seed,
        )
        .map_err(py_err)?;
        Ok(inf
            .features
            .chunks_exact(inf.width)
            .map(<[f64]>::to_vec)
            .collect())
    }
}

/// Synthetic scene: `variant` is `"overfit"` or `"xor"`.
#[pyfunction]
#[pyo3(signature = (variant, seed=0))]
fn synth_scene(variant: &str, seed: u64) -> PyResult<PyPointCloud> {
    let v = variant.parse().map_err(py_err)?;
    Ok(PyPointCloud {
        inner: synth::generate(v, seed).cloud,
    })
}

#[pyfunction]
#[pyo3(signature = (pred, gt, num_classes, ignore=None))]
fn scores(
    pred: Vec<u32>,
    gt: Vec<u32>,
    num_classes: usize,
    ignore: Option<u32>,
) -> PyResult<PyScores> {
    let cm = ConfusionMatrix::from_labels(&pred, &gt, num_classes, ignore).map_err(py_err)?;
    let s = core_scores(&cm).map_err(py_err)?;
    Ok(PyScores {
        oa: s.oa,
        kappa: s.kappa,
        miou: s.miou,
        mean_f1: s.mean_f1,
        mean_precision: s.mean_precision,
        mean_recall: s.mean_recall,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        iou: s.iou,
    })
}

/// `(points, coverage, numerator, denominator)` per encoder stage.
#[pyfunction]
fn coverage_table(
    n_input: usize,
    k: usize,
    stages: usize,
) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let rows = coverage_rows(n_input, k, stages).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.points, r.coverage, r.fraction.0, r.fraction.1))
        .collect())
}

/// The `k` nearest points (self included) of every point.
#[pyfunction]
fn knn(coords: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let tree = KdTree::from_xyz(&coords).map_err(py_err)?;
    let (table, kk) = tree.knn_table(&coords, k).map_err(py_err)?;
    Ok(table.chunks_exact(kk).map(<[usize]>::to_vec).collect())
}

#[pyfunction]
#[pyo3(signature = (coords, m, start=0))]
fn fps(coords: Vec<[f64; 3]>, m: usize, start: usize) -> PyResult<Vec<usize>> {
    fps_from(&coords, m, start).map_err(py_err)
}

#[pymodule]
fn hpformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyScores>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_table, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    Ok(())
}
