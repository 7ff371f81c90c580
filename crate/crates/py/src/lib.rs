//! Python bindings for the core types: datastore search, the prediction
//! distributions, the dual-form identity, and output-projection tuning.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use knnmt_core::datastore;
use knnmt_core::finetune;
use knnmt_core::io;
use knnmt_core::meta;
use knnmt_core::prediction;

fn err(e: knnmt_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_metric(s: &str) -> PyResult<datastore::Metric> {
    s.parse().map_err(PyValueError::new_err)
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Datastore {
    inner: datastore::Datastore,
}

#[pymethods]
impl Datastore {
    #[staticmethod]
    fn build(pairs: Vec<(Vec<f32>, u32)>, dim: usize, vocab_size: u32) -> PyResult<Self> {
        let inner = datastore::Datastore::build(
            pairs.iter().map(|(v, t)| (v.as_slice(), *t)),
            dim,
            vocab_size,
        )
        .map_err(err)?;
        Ok(Datastore { inner })
    }

    #[pyo3(signature = (query, k, metric="ip"))]
    fn search(&self, query: Vec<f32>, k: usize, metric: &str) -> PyResult<NeighborSet> {
        let m = parse_metric(metric)?;
        let inner = self.inner.search(&query, k, m).map_err(err)?;
        Ok(NeighborSet { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_path(path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Datastore {
            inner: datastore::Datastore::load_path(path).map_err(err)?,
        })
    }

    #[getter]
    fn count(&self) -> usize {
        self.inner.count()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.inner.vocab_size()
    }
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct NeighborSet {
    inner: datastore::NeighborSet,
}

#[pymethods]
impl NeighborSet {
    /// (index, value, score) triples in retrieval order.
    fn entries(&self) -> Vec<(usize, u32, f64)> {
        self.inner
            .entries
            .iter()
            .map(|n| (n.index, n.value, n.score))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Projection {
    inner: prediction::Projection,
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("ragged weight rows"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymethods]
impl Projection {
    #[staticmethod]
    fn zeros(vocab_size: usize, dim: usize) -> Self {
        Projection {
            inner: prediction::Projection::zeros(vocab_size, dim),
        }
    }

    #[staticmethod]
    fn from_weights(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Projection {
            inner: prediction::Projection::from_weights(rows_to_array(rows)?).map_err(err)?,
        })
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner
            .weights()
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_projection_path(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Projection {
            inner: io::load_projection_path(path).map_err(err)?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

#[pyfunction]
fn nmt_probs(proj: &Projection, h: Vec<f32>) -> PyResult<Vec<f64>> {
    let p = prediction::nmt_distribution(&proj.inner, &h).map_err(err)?;
    Ok(p.probs().to_vec())
}

#[pyfunction]
fn knn_probs(nbrs: &NeighborSet, temperature: f64, vocab_size: usize) -> PyResult<Vec<f64>> {
    let p = prediction::knn_distribution(&nbrs.inner, temperature, vocab_size).map_err(err)?;
    Ok(p.probs().to_vec())
}

#[pyfunction]
fn interpolate(p_knn: Vec<f64>, p_nmt: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let a = prediction::ProbVector::new(p_knn).map_err(err)?;
    let b = prediction::ProbVector::new(p_nmt).map_err(err)?;
    let p = prediction::interpolate(&a, &b, lam).map_err(err)?;
    Ok(p.probs().to_vec())
}

#[pyfunction]
fn meta_gradient(nbrs: &NeighborSet, proj: &Projection, temperature: f64) -> PyResult<Vec<Vec<f64>>> {
    let g = meta::meta_gradient(&nbrs.inner, &proj.inner, temperature).map_err(err)?;
    Ok(g.delta.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn dual_residual(
    proj: &Projection,
    nbrs: &NeighborSet,
    h: Vec<f32>,
    lam: f64,
    temperature: f64,
) -> PyResult<f64> {
    meta::dual_residual(&proj.inner, &nbrs.inner, &h, lam, temperature).map_err(err)
}

#[pyfunction]
fn opl_loss(proj: &Projection, nbrs: &NeighborSet, alpha: f64) -> PyResult<f64> {
    finetune::opl_loss(&proj.inner, &nbrs.inner, alpha).map_err(err)
}

#[pyfunction]
fn opl_gradient(proj: &Projection, nbrs: &NeighborSet, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let g = finetune::opl_gradient(&proj.inner, &nbrs.inner, alpha).map_err(err)?;
    Ok(g.delta.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn ascent_step(proj: &Projection, nbrs: &NeighborSet, alpha: f64, lr: f64) -> PyResult<Projection> {
    let g = finetune::opl_gradient(&proj.inner, &nbrs.inner, alpha).map_err(err)?;
    Ok(Projection {
        inner: finetune::sgd_step(&proj.inner, &g, lr).map_err(err)?,
    })
}

#[pyfunction]
fn perplexity(probs: Vec<f64>) -> PyResult<f64> {
    let series = knnmt_core::analysis::GoldProbSeries {
        variant: String::new(),
        probs,
    };
    knnmt_core::analysis::perplexity(&series).map_err(err)
}

#[pymodule]
fn knnmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Datastore>()?;
    m.add_class::<NeighborSet>()?;
    m.add_class::<Projection>()?;
    m.add_function(wrap_pyfunction!(nmt_probs, m)?)?;
    m.add_function(wrap_pyfunction!(knn_probs, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(meta_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(dual_residual, m)?)?;
    m.add_function(wrap_pyfunction!(opl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(opl_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(ascent_step, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    Ok(())
}
