//! Python module `fqat`: quantizers, the synthetic dataset, configs and
//! experiment runs.

use std::path::{Path, PathBuf};

use fqat_core::config::{parse_config, ExperimentConfig};
use fqat_core::data::{generate_domains, DomainDataset, GeneratorParams, SplitPlan};
use fqat_core::freeze::gradient_disorder as disorder;
use fqat_core::harness::{run_experiment, Method};
use fqat_core::matrix::{run_matrix, summarize as summarize_dir, SummaryRow};
use fqat_core::quantizer::{fake_quantize_slice, mse_init_scale, QuantKind, QuantSpec};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: fqat_core::Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e.kind() {
        "config" | "parse" | "argument" | "quantizer" | "freeze" | "numeric" => PyValueError::new_err(msg),
        "io" => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

#[pyclass(name = "QuantSpec", frozen)]
struct PyQuantSpec {
    inner: QuantSpec,
}

#[pymethods]
impl PyQuantSpec {
    /// `kind` is "weight" or "activation".
    #[new]
    fn new(bits: u32, kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "weight" => QuantKind::Weight,
            "activation" => QuantKind::Activation,
            other => return Err(PyValueError::new_err(format!("unknown kind `{other}`"))),
        };
        Ok(Self {
            inner: QuantSpec::new(bits, kind).map_err(err)?,
        })
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            QuantKind::Weight => "weight",
            QuantKind::Activation => "activation",
        }
    }

    #[getter]
    fn lower(&self) -> i64 {
        self.inner.lower()
    }

    #[getter]
    fn upper(&self) -> i64 {
        self.inner.upper()
    }

    fn fake_quantize(&self, values: Vec<f64>, scale: f64) -> PyResult<Vec<f64>> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(PyValueError::new_err(format!("scale must be positive, got {scale}")));
        }
        Ok(fake_quantize_slice(&values, scale, &self.inner))
    }

    /// Scale with the lowest quantization MSE on the search grid.
    fn mse_init_scale(&self, values: Vec<f64>) -> PyResult<f64> {
        Ok(mse_init_scale(&values, self.inner, "py").map_err(err)?.scale.value())
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantSpec(bits={}, kind='{}', lower={}, upper={})",
            self.bits(),
            self.kind(),
            self.lower(),
            self.upper()
        )
    }
}

/// Fraction of sign changes between consecutive entries.
#[pyfunction]
fn gradient_disorder(seq: Vec<f64>) -> PyResult<f64> {
    disorder(&seq).map_err(err)
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: DomainDataset,
}

impl PyDataset {
    fn domain(&self, i: usize) -> PyResult<&fqat_core::data::Domain> {
        self.inner
            .domains
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("no domain {i}")))
    }
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed, n_domains=4, n_per_domain=300, n_classes=4, dim=8))]
    fn generate(seed: u64, n_domains: usize, n_per_domain: usize, n_classes: usize, dim: usize) -> PyResult<Self> {
        let inner = generate_domains(
            seed,
            n_domains,
            n_per_domain,
            n_classes,
            dim,
            &GeneratorParams::default(),
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DomainDataset::from_text(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DomainDataset::load(&path).map_err(err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn domain_names(&self) -> Vec<String> {
        self.inner.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// Feature rows of one domain.
    fn features(&self, domain: usize) -> PyResult<Vec<Vec<f64>>> {
        let d = self.domain(domain)?;
        let (n, _) = d.features.dims2();
        Ok((0..n).map(|i| d.features.row(i).to_vec()).collect())
    }

    fn labels(&self, domain: usize) -> PyResult<Vec<usize>> {
        Ok(self.domain(domain)?.labels.clone())
    }

    fn __len__(&self) -> usize {
        self.inner.domains.len()
    }
}

fn summary_dicts<'py>(py: Python<'py>, rows: &[SummaryRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", &r.method)?;
            d.set_item("domain", r.domain)?;
            d.set_item("bits", r.bits)?;
            d.set_item("n_runs", r.n_runs)?;
            d.set_item("val_mean", r.val_mean)?;
            d.set_item("val_std_pop", r.val_std_pop)?;
            d.set_item("test_mean", r.test_mean)?;
            d.set_item("test_std_pop", r.test_std_pop)?;
            Ok(d)
        })
        .collect()
}

#[pyclass(name = "ExperimentConfig", frozen)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_config(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    /// Resolved config; parsing it again gives the same config.
    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.methods().iter().map(|m| m.to_string()).collect()
    }

    #[getter]
    fn test_domains(&self) -> Vec<usize> {
        self.inner.test_domains()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.train.seeds.clone()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    /// Trains one (method, held-out domain, seed) cell.
    ///
    /// Returns final accuracies and the run record as JSON lines.
    #[pyo3(signature = (test_domain, seed, method=None))]
    fn run_cell<'py>(
        &self,
        py: Python<'py>,
        test_domain: usize,
        seed: u64,
        method: Option<&str>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method: Method = match method {
            Some(m) => m.parse().map_err(err)?,
            None => self.inner.method,
        };
        let cfg = &self.inner;
        let out = py
            .detach(|| {
                let ds = cfg.dataset.generate()?;
                let split = SplitPlan::leave_one_out(&ds, test_domain, cfg.train.val_fraction)?;
                let out = run_experiment(
                    &ds,
                    &split,
                    &cfg.model_spec(),
                    cfg.quant.bits,
                    method,
                    &cfg.hyper(),
                    seed,
                )?;
                let jsonl = out.record.to_jsonl()?;
                Ok((out.record.final_row, jsonl))
            })
            .map_err(err)?;
        let (final_row, jsonl) = out;
        let f = final_row.ok_or_else(|| PyRuntimeError::new_err("run produced no final row"))?;
        let d = PyDict::new(py);
        d.set_item("method", method.to_string())?;
        d.set_item("test_domain", test_domain)?;
        d.set_item("seed", seed)?;
        d.set_item("bits", method.is_quantized().then_some(cfg.quant.bits))?;
        d.set_item("best_val_step", f.best_val_step)?;
        d.set_item("val_acc", f.val_acc)?;
        d.set_item("test_acc", f.test_acc)?;
        d.set_item("record_jsonl", jsonl)?;
        Ok(d)
    }

    /// Runs or resumes the whole matrix under `out_dir` (default: the config's).
    #[pyo3(signature = (out_dir=None))]
    fn run_matrix<'py>(&self, py: Python<'py>, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
        let dir = out_dir.unwrap_or_else(|| self.inner.output_dir.clone());
        let cfg = &self.inner;
        let report = py.detach(|| run_matrix(cfg, &dir)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("executed", report.executed)?;
        d.set_item("skipped", report.skipped)?;
        d.set_item("summary", summary_dicts(py, &report.summary)?)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(methods={:?}, bits={}, total_steps={})",
            self.methods(),
            self.inner.quant.bits,
            self.inner.train.total_steps
        )
    }
}

/// Recomputes `summary.csv` of a matrix directory and returns its rows.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, out_dir: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = summarize_dir(Path::new(&out_dir)).map_err(err)?;
    summary_dicts(py, &rows)
}

#[pymodule]
fn fqat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(gradient_disorder, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
