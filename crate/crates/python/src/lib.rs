//! Python module `civsf`: configuration hashing, data generation, mask
//! inspection, reference tables and the full command line.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use civsf::datamodel::write_container;
use civsf::harness::config::Config;
use civsf::harness::report::render_reference_tables;
use civsf::masking::build_uniform_mask;
use civsf::synthworld::gen_dataset;

fn to_py(e: civsf::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse(config: &str) -> PyResult<Config> {
    let cfg = Config::parse(config).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Canonical `key = value` text of the default configuration.
#[pyfunction]
pub fn default_config() -> String {
    Config::default().canonical()
}

/// Hash of a configuration given as `key = value` text.
#[pyfunction]
#[pyo3(signature = (config = ""))]
pub fn config_hash(config: &str) -> PyResult<String> {
    Ok(parse(config)?.hash())
}

/// Dataset container bytes for the world described by `config`.
#[pyfunction]
#[pyo3(signature = (config = "", seed = None))]
pub fn generate<'py>(py: Python<'py>, config: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyBytes>> {
    let mut cfg = parse(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = gen_dataset(cfg.samples, &cfg.world_config(), cfg.seed).map_err(to_py)?;
    let bytes = write_container(&samples).map_err(to_py)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Uniform mask as rows of booleans, `True` where a patch is masked.
#[pyfunction]
#[pyo3(signature = (timestamps, locations, ratio, seed = 0))]
pub fn mask(timestamps: usize, locations: usize, ratio: f64, seed: u64) -> PyResult<Vec<Vec<bool>>> {
    let plan = build_uniform_mask(timestamps, locations, ratio, seed).map_err(to_py)?;
    Ok((0..timestamps)
        .map(|t| (0..locations).map(|g| plan.is_masked(t, g)).collect())
        .collect())
}

#[pyfunction]
pub fn reference_tables() -> String {
    render_reference_tables()
        .iter()
        .map(|t| t.to_text())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
pub fn run(args: Vec<String>) -> i32 {
    civsf::harness::cli::run(std::iter::once("civsf".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "civsf")]
fn civsf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(mask, m)?)?;
    m.add_function(wrap_pyfunction!(reference_tables, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
