use pyo3::prelude::*;

#[pymodule]
fn sfalab(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
