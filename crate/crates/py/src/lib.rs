use pyo3::prelude::*;

#[pyfunction]
fn probe() -> f64 { snl_core::probe() }

#[pymodule]
fn snl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    Ok(())
}
