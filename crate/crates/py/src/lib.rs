//! Python bindings: the CLI, config defaults, the gradient suite and
//! checkpoint rendering and meshing.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use triplane_mimic::config::{RunConfig, KEYS};
use triplane_mimic::evalkit::{density_grid, marching_cubes};
use triplane_mimic::gradcheck::{run_suite, SuiteOptions};
use triplane_mimic::renderer::{render_image, CameraPose, RenderOptions};
use triplane_mimic::trainer::read_checkpoint;
use triplane_mimic::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::Invalid(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    triplane_mimic::cli::run(std::iter::once("triplane-mimic".to_string()).chain(args))
}

/// Every config key with its default value.
#[pyfunction]
fn default_config() -> Vec<(String, String)> {
    let cfg = RunConfig::default();
    KEYS.iter().map(|(k, ..)| (k.to_string(), cfg.raw(k).to_string())).collect()
}

/// `(op, max_rel_err, passed)` per differentiable operation.
#[pyfunction]
#[pyo3(signature = (seed=0, configs=20))]
fn gradcheck(seed: u64, configs: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let opts = SuiteOptions { seed, configs, ..SuiteOptions::default() };
    let reports = run_suite(&opts).map_err(py_err)?;
    Ok(reports.into_iter().map(|r| (r.name.to_string(), r.max_rel_err, r.passed)).collect())
}

/// Renders a checkpoint from an orbit pose; returns `(height, width, rgb)`
/// with `rgb` row-major and interleaved.
#[pyfunction]
#[pyo3(signature = (checkpoint, yaw_deg=0.0, pitch_deg=0.0, size=64, radius=3.0, fov_deg=30.0, samples=48, seed=0))]
#[allow(clippy::too_many_arguments)]
fn render(checkpoint: &str, yaw_deg: f64, pitch_deg: f64, size: usize, radius: f64, fov_deg: f64, samples: usize, seed: u64) -> PyResult<(usize, usize, Vec<f64>)> {
    let (student, _) = read_checkpoint(checkpoint.as_ref()).map_err(py_err)?;
    let field = student.resolve().map_err(py_err)?;
    let cam = CameraPose::orbit(yaw_deg.to_radians(), pitch_deg.to_radians(), radius, fov_deg, size);
    cam.validate().map_err(py_err)?;
    let img = render_image(&field, &cam, &RenderOptions::hierarchical(samples, samples), seed).map_err(py_err)?;
    Ok((img.height(), img.width(), img.data().to_vec()))
}

/// Iso-surface of a checkpoint's density: `(vertices, triangles)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, grid=64, iso=2.5))]
fn mesh(checkpoint: &str, grid: usize, iso: f64) -> PyResult<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let (student, _) = read_checkpoint(checkpoint.as_ref()).map_err(py_err)?;
    let field = student.resolve().map_err(py_err)?;
    let m = marching_cubes(&density_grid(&field, grid).map_err(py_err)?, iso).map_err(py_err)?;
    Ok((m.vertices, m.triangles))
}

#[pymodule]
fn triplane_mimic_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(mesh, m)?)?;
    Ok(())
}
