//! Python bindings for `splatocc`.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use splatocc::metrics::iou_miou_grids;
use splatocc::model::{Aabb, GaussianPrimitive, Provenance, Quat};
use splatocc::pipeline::{PipelineConfig, RefineMode};
use splatocc::{io, render, sampler, Error, GridGeometry, VoxelGridSpec};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::UndefinedMetric(_) | Error::UndefinedMean(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

#[pyfunction]
fn covariance_of(scale: [f64; 3], rotation: [f64; 4]) -> PyResult<[[f64; 3]; 3]> {
    let q = Quat::new(rotation[0], rotation[1], rotation[2], rotation[3]);
    let c = splatocc::covariance_of(&Vector3::from(scale), &q).map_err(to_py)?;
    let m = c.matrix;
    Ok([0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]))
}

/// Set of 3D Gaussians with per-class semantic logits.
#[pyclass(name = "GaussianSet", module = "splatocc")]
struct PyGaussianSet {
    inner: splatocc::GaussianSet,
}

#[pymethods]
impl PyGaussianSet {
    /// Builds a set from parallel lists. Rotations are `(w, x, y, z)`.
    #[new]
    #[pyo3(signature = (means, scales, rotations, opacities, logits))]
    fn new(
        means: Vec<[f64; 3]>,
        scales: Vec<[f64; 3]>,
        rotations: Vec<[f64; 4]>,
        opacities: Vec<f64>,
        logits: Vec<Vec<f64>>,
    ) -> PyResult<Self> {
        let n = means.len();
        if [scales.len(), rotations.len(), opacities.len(), logits.len()].iter().any(|&l| l != n) {
            return Err(PyValueError::new_err("all attribute lists must have the same length"));
        }
        let classes = logits.first().map_or(0, Vec::len);
        let mut prims = Vec::with_capacity(n);
        for i in 0..n {
            let r = rotations[i];
            prims.push(
                GaussianPrimitive::new(
                    Vector3::from(means[i]),
                    Vector3::from(scales[i]),
                    Quat::new(r[0], r[1], r[2], r[3]),
                    opacities[i],
                    logits[i].clone(),
                )
                .map_err(to_py)?,
            );
        }
        let prov = (0..n as u32).map(|i| Provenance::new(0, 0, i)).collect();
        let inner = splatocc::GaussianSet::new(classes, prims, prov).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_gsb(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_gsb(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn means(&self) -> Vec<[f64; 3]> {
        self.inner.means().iter().map(|m| [m.x, m.y, m.z]).collect()
    }

    /// `(view, row, col)` of the pixel each Gaussian came from.
    fn provenance(&self) -> Vec<(u32, u32, u32)> {
        self.inner.provenance().iter().map(|p| (p.view, p.row, p.col)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("GaussianSet(len={}, num_classes={})", self.inner.len(), self.inner.num_classes())
    }
}

/// Dense semantic label grid; the label `num_classes` marks empty voxels.
#[pyclass(name = "OccupancyGrid", module = "splatocc")]
struct PyOccupancyGrid {
    inner: splatocc::OccupancyGrid,
}

#[pymethods]
impl PyOccupancyGrid {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_occ(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_occ(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.geometry.dims
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn empty_id(&self) -> u8 {
        self.inner.empty_id()
    }

    /// Labels in x-fastest order.
    fn labels(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }

    fn occupied_count(&self) -> usize {
        self.inner.occupied_count()
    }

    fn __repr__(&self) -> String {
        let [x, y, z] = self.inner.geometry.dims;
        format!("OccupancyGrid({x}x{y}x{z}, num_classes={})", self.inner.num_classes)
    }
}

/// Keeps one Gaussian per occupied sampling voxel.
#[pyfunction]
#[pyo3(signature = (gaussians, grid_size, extents_min, extents_max, seed=0))]
fn sample(
    gaussians: &PyGaussianSet,
    grid_size: f64,
    extents_min: [f64; 3],
    extents_max: [f64; 3],
    seed: u64,
) -> PyResult<PyGaussianSet> {
    let spec = VoxelGridSpec::new(Aabb::new(Vector3::from(extents_min), Vector3::from(extents_max)), grid_size)
        .map_err(to_py)?;
    Ok(PyGaussianSet {
        inner: sampler::sample_representatives(&gaussians.inner, &spec, seed),
    })
}

/// Renders a set into a label grid. Returns the grid and the flat probability field.
#[pyfunction]
fn render_grid(
    gaussians: &PyGaussianSet,
    dims: [usize; 3],
    origin: [f64; 3],
    voxel_size: f64,
) -> PyResult<(PyOccupancyGrid, Vec<f64>)> {
    let geo = GridGeometry::new(dims, Vector3::from(origin), voxel_size).map_err(to_py)?;
    let field = render::render_grid(&gaussians.inner, &geo).map_err(to_py)?;
    let grid = PyOccupancyGrid { inner: field.to_grid() };
    Ok((grid, field.probs))
}

#[pyfunction]
fn iou(pred: &PyOccupancyGrid, gt: &PyOccupancyGrid) -> PyResult<(f64, f64)> {
    let r = iou_miou_grids(&pred.inner, &gt.inner, None).map_err(to_py)?;
    Ok((r.iou, r.miou))
}

/// Runs the synthetic pipeline into `out` and returns the run summary.
#[pyfunction]
#[pyo3(signature = (out, seed=0, refine="zero", config=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    refine: &str,
    config: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(&p).map_err(to_py)?,
        None => PipelineConfig::default(),
    };
    cfg.seed = seed;
    cfg.out = out;
    cfg.refine = match refine {
        "off" => RefineMode::Off,
        "zero" => RefineMode::Zero,
        "oracle-snap" => RefineMode::OracleSnap,
        other => return Err(PyValueError::new_err(format!("unknown refine mode {other:?}"))),
    };
    let s = py
        .detach(|| splatocc::pipeline::run_pipeline(&cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("views", s.views)?;
    d.set_item("initialized", s.initialized)?;
    d.set_item("sampled", s.sampled)?;
    d.set_item("refined", s.refined)?;
    d.set_item("predicted_occupied", s.predicted_occupied)?;
    d.set_item("gt_occupied", s.gt_occupied)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "splatocc")]
fn splatocc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussianSet>()?;
    m.add_class::<PyOccupancyGrid>()?;
    m.add_function(wrap_pyfunction!(covariance_of, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(render_grid, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
