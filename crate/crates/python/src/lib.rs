use pyo3::prelude::*;

#[pymodule]
fn cloudmamba_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
