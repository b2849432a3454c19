use pyo3::prelude::*;

#[pymodule]
fn mloc(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
