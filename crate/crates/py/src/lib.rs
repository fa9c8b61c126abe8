use pyo3::prelude::*;

#[pymodule]
fn jointva_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
