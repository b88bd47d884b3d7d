//! Python bindings for the avatar core: configs, models, latent codes,
//! motion signals, cameras and the gradient-check suite.

use std::path::PathBuf;

use avatar_core::config::RunConfig;
use avatar_core::controller::{Codebook, MotionSignal};
use avatar_core::diagnostics::{run_suite, SuiteConfig};
use avatar_core::engine::{checksum, Tensor};
use avatar_core::generator::{interpolate_identity as blend, LatentCodePlus};
use avatar_core::model::{add_codes, Model as CoreModel};
use avatar_core::renderer::Camera as CoreCamera;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: avatar_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_tensor(rows: &[Vec<f32>]) -> PyResult<Tensor<f32>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Tensor::new(&[rows.len(), d], rows.concat()).map_err(err)
}

fn tensor_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data().chunks(cols.max(1)).map(<[f32]>::to_vec).collect()
}

#[pyclass(module = "avatar_py", from_py_object)]
#[derive(Clone)]
struct Config(RunConfig);

#[pymethods]
impl Config {
    /// Desk defaults, or `path`, then `key=value` overrides.
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(&p).map_err(err)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&overrides).map_err(err)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.0.model.latent_dim
    }

    #[getter]
    fn layers(&self) -> usize {
        self.0.model.layers
    }

    #[getter]
    fn window(&self) -> usize {
        self.0.model.window
    }

    #[getter]
    fn coefficient_dims(&self) -> usize {
        self.0.model.expression_dims + self.0.model.pose_dims
    }
}

/// A W+ code: `layers` rows of `dim` values.
#[pyclass(module = "avatar_py", from_py_object)]
#[derive(Clone)]
struct Latent(LatentCodePlus<f32>);

#[pymethods]
impl Latent {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        Ok(Self(LatentCodePlus::new(rows_to_tensor(&rows)?).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(LatentCodePlus::load(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.layers(), self.0.dim())
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        tensor_rows(self.0.tensor())
    }

    /// FNV-1a hash of the values; equal codes hash equal.
    fn checksum(&self) -> u64 {
        checksum([self.0.tensor()])
    }

    fn __add__(&self, other: &Latent) -> PyResult<Latent> {
        Ok(Latent(add_codes(&self.0, &other.0).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!("Latent({}x{})", self.0.layers(), self.0.dim())
    }
}

#[pyclass(module = "avatar_py", from_py_object)]
#[derive(Clone)]
struct Camera(CoreCamera);

#[pymethods]
impl Camera {
    /// Pinhole camera on a sphere around the origin, looking at it.
    #[staticmethod]
    #[pyo3(signature = (radius, azimuth, elevation, size, fov_y=0.7, near=1.3, far=3.7))]
    fn orbit(radius: f64, azimuth: f64, elevation: f64, size: usize, fov_y: f64, near: f64, far: f64) -> Self {
        Self(CoreCamera::orbit([0.0; 3], radius, azimuth, elevation, fov_y, size, near, far))
    }

    #[getter]
    fn size(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }
}

#[pyclass(module = "avatar_py")]
struct Model {
    inner: CoreModel<f32>,
    config: RunConfig,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &Config, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: CoreModel::init(&config.0.model, seed).map_err(err)?, config: config.0.clone() })
    }

    #[staticmethod]
    fn load(config: &Config, path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreModel::load(&config.0.model, &path).map_err(err)?, config: config.0.clone() })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// The average latent repeated into every W+ row.
    fn average_code(&self) -> Latent {
        Latent(self.inner.w_avg_plus())
    }

    /// Controller output for one window of `[frames][coefficients]`.
    fn motion_code(&self, window: Vec<Vec<f32>>) -> PyResult<Latent> {
        let signal = MotionSignal::new(rows_to_tensor(&window)?, self.config.model.expression_dims).map_err(err)?;
        Ok(Latent(self.inner.motion_code(&signal).map_err(err)?))
    }

    /// Renders `code` and returns `(height, width, rgb values)`.
    fn render(&self, code: &Latent, camera: &Camera) -> PyResult<(usize, usize, Vec<f32>)> {
        let img = self.inner.render_code(&code.0, &camera.0, &self.config.render).map_err(err)?;
        Ok((img.shape()[0], img.shape()[1], img.into_data()))
    }

    fn generator_checksum(&self) -> u64 {
        self.inner.generator_checksum()
    }

    fn controller_checksum(&self) -> u64 {
        self.inner.controller_checksum()
    }
}

/// `alpha * a + (1 - alpha) * b`.
#[pyfunction]
fn interpolate_identity(a: &Latent, b: &Latent, alpha: f64) -> PyResult<Latent> {
    Ok(Latent(blend(&a.0, &b.0, alpha).map_err(err)?))
}

/// Gram-Schmidt over the rows in order, without renormalizing.
#[pyfunction]
fn orthogonalize(rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let mut cb = Codebook { bases: rows_to_tensor(&rows)? };
    cb.orthogonalize().map_err(err)?;
    Ok(tensor_rows(&cb.bases))
}

/// Runs the gradient-check suite; returns `(passed, report text)`.
#[pyfunction]
#[pyo3(signature = (f64=false, trials=10))]
fn gradcheck(f64: bool, trials: usize) -> PyResult<(bool, String)> {
    let cfg = SuiteConfig { trials, ..SuiteConfig::default() };
    let report = if f64 { run_suite::<f64>(&cfg) } else { run_suite::<f32>(&cfg) }.map_err(err)?;
    Ok((report.passed(), report.render()))
}

#[pymodule]
fn avatar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Latent>()?;
    m.add_class::<Camera>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(interpolate_identity, m)?)?;
    m.add_function(wrap_pyfunction!(orthogonalize, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
