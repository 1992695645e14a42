//! Python bindings: the finite-budget Sinkhorn teacher, sliced-dual
//! calibration, and the compiled attention operators, over plain lists of
//! floats (desk-scale surface, no numpy dependency).

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dsattn::calibration::{build_fit_dataset, fit_kl, fit_ls, FitObjective};
use dsattn::ctransform::ReconstructionMode;
use dsattn::harness;
use dsattn::metrics;
use dsattn::sinkhorn::{self, KernelKind, KeyMask};
use dsattn::sliced::SliceBank;

fn to_py_err(e: dsattn::Error) -> PyErr {
    match e {
        dsattn::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>, name: &str) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{name} must be non-empty")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{name} must be rectangular and non-empty")));
    }
    Ok(Array2::from_shape_vec((rows.len(), cols), rows.into_iter().flatten().collect())
        .expect("shape checked"))
}

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_kernel(text: &str) -> PyResult<KernelKind> {
    match text {
        "score" => Ok(KernelKind::Score),
        "quadratic_cost" => Ok(KernelKind::QuadraticCost),
        other => Err(PyValueError::new_err(format!(
            "unknown kernel '{other}' (use 'score' or 'quadratic_cost')"
        ))),
    }
}

fn parse_mode(text: &str) -> PyResult<ReconstructionMode> {
    match text {
        "one_sided" => Ok(ReconstructionMode::OneSided),
        "two_sided" => Ok(ReconstructionMode::TwoSided),
        other => Err(PyValueError::new_err(format!(
            "unknown mode '{other}' (use 'one_sided' or 'two_sided')"
        ))),
    }
}

/// Sinkhorn convention of the frozen teacher layer.
#[pyclass(name = "TeacherConfig", from_py_object)]
#[derive(Clone)]
struct PyTeacherConfig {
    inner: sinkhorn::TeacherConfig,
}

#[pymethods]
impl PyTeacherConfig {
    #[new]
    #[pyo3(signature = (epsilon=1.0, budget=20, kernel="score"))]
    fn new(epsilon: f64, budget: u32, kernel: &str) -> PyResult<Self> {
        let cfg = sinkhorn::TeacherConfig::new(epsilon, budget, parse_kernel(kernel)?);
        cfg.validate().map_err(to_py_err)?;
        Ok(Self { inner: cfg })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn budget(&self) -> u32 {
        self.inner.budget
    }

    #[getter]
    fn kernel(&self) -> &'static str {
        match self.inner.kernel {
            KernelKind::Score => "score",
            KernelKind::QuadraticCost => "quadratic_cost",
        }
    }

    /// "row" or "column", derived from the budget parity.
    #[getter]
    fn ending_side(&self) -> &'static str {
        match self.inner.ending_side() {
            sinkhorn::EndingSide::Row => "row",
            sinkhorn::EndingSide::Column => "column",
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "TeacherConfig(epsilon={}, budget={}, kernel='{}')",
            self.inner.epsilon,
            self.inner.budget,
            self.kernel()
        )
    }
}

/// One attention head's Q, K, V and optional active-key mask.
#[pyclass(name = "AttentionCase", from_py_object)]
#[derive(Clone)]
struct PyAttentionCase {
    inner: sinkhorn::AttentionCase,
}

#[pymethods]
impl PyAttentionCase {
    #[new]
    #[pyo3(signature = (q, k, v, active_keys=None))]
    fn new(
        q: Vec<Vec<f64>>,
        k: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        active_keys: Option<Vec<bool>>,
    ) -> PyResult<Self> {
        let mask = active_keys.map(KeyMask::new).transpose().map_err(to_py_err)?;
        let case = sinkhorn::AttentionCase::new(
            matrix_from_rows(q, "q")?,
            matrix_from_rows(k, "k")?,
            matrix_from_rows(v, "v")?,
            mask,
        )
        .map_err(to_py_err)?;
        Ok(Self { inner: case })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d_h(&self) -> usize {
        self.inner.d_h()
    }

    #[getter]
    fn d_v(&self) -> usize {
        self.inner.d_v()
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.q)
    }

    #[getter]
    fn k(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.k)
    }

    #[getter]
    fn v(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.v)
    }

    #[getter]
    fn active_keys(&self) -> Option<Vec<bool>> {
        self.inner.key_mask.as_ref().map(|m| m.flags().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "AttentionCase(n={}, d_h={}, d_v={}, masked={})",
            self.inner.n(),
            self.inner.d_h(),
            self.inner.d_v(),
            self.inner.key_mask.is_some()
        )
    }
}

/// Deterministic synthetic head (anisotropic Gaussian tokens).
#[pyfunction]
#[pyo3(signature = (seed, n, d_h, d_v, mask_fraction=0.0))]
fn gen_case(
    seed: u64,
    n: usize,
    d_h: usize,
    d_v: usize,
    mask_fraction: f64,
) -> PyResult<PyAttentionCase> {
    Ok(PyAttentionCase {
        inner: harness::gen_case(seed, n, d_h, d_v, mask_fraction).map_err(to_py_err)?,
    })
}

/// Attention-scale matrix of the finite-budget teacher.
#[pyfunction]
fn teacher_attention(case: &PyAttentionCase, cfg: &PyTeacherConfig) -> PyResult<Vec<Vec<f64>>> {
    let trace = sinkhorn::sinkhorn_run(&case.inner, &cfg.inner).map_err(to_py_err)?;
    Ok(matrix_to_rows(&trace.final_plan.attention))
}

/// Centered closure-ready teacher source dual (the calibration target).
#[pyfunction]
fn teacher_dual(case: &PyAttentionCase, cfg: &PyTeacherConfig) -> PyResult<Vec<f64>> {
    let trace = sinkhorn::sinkhorn_run(&case.inner, &cfg.inner).map_err(to_py_err)?;
    let (f_t, _) = sinkhorn::teacher_reference(&trace, &cfg.inner);
    Ok(f_t.to_vec())
}

/// Row/column marginal errors of an attention matrix, column error averaged
/// over active keys only.
#[pyfunction]
#[pyo3(signature = (attention, active_keys=None))]
fn marginal_errors(
    attention: Vec<Vec<f64>>,
    active_keys: Option<Vec<bool>>,
) -> PyResult<(f64, f64)> {
    let a = matrix_from_rows(attention, "attention")?;
    let mask = active_keys.map(KeyMask::new).transpose().map_err(to_py_err)?;
    Ok(metrics::marginal_errors(&a, mask.as_ref()))
}

/// (output RMSE, attention relative l2) of one head against a reference.
#[pyfunction]
fn teacher_agreement(
    a_hat: Vec<Vec<f64>>,
    a_ref: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
) -> PyResult<(f64, f64)> {
    Ok(metrics::teacher_agreement(
        &matrix_from_rows(a_hat, "a_hat")?,
        &matrix_from_rows(a_ref, "a_ref")?,
        &matrix_from_rows(v, "v")?,
    ))
}

/// Compiled layer: slice bank, coefficients, and the teacher convention.
#[pyclass(name = "CompiledLayer")]
struct PyCompiledLayer {
    inner: dsattn::CompiledLayer,
}

#[pymethods]
impl PyCompiledLayer {
    /// Fit on unlabeled cases under the teacher convention.
    #[staticmethod]
    #[pyo3(signature = (cases, cfg, slices=32, bank_seed=7, ridge=1e-3, objective="ls"))]
    fn fit(
        cases: Vec<PyAttentionCase>,
        cfg: &PyTeacherConfig,
        slices: usize,
        bank_seed: u64,
        ridge: f64,
        objective: &str,
    ) -> PyResult<Self> {
        if cases.is_empty() {
            return Err(PyValueError::new_err("need at least one calibration case"));
        }
        let objective = match objective {
            "ls" => FitObjective::LeastSquares,
            "kl" => FitObjective::Kl,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown objective '{other}' (use 'ls' or 'kl')"
                )))
            }
        };
        let raw: Vec<sinkhorn::AttentionCase> =
            cases.iter().map(|c| c.inner.clone()).collect();
        let bank = SliceBank::sample(bank_seed, slices, raw[0].d_h());
        let data = build_fit_dataset(&raw, &bank, &cfg.inner, objective == FitObjective::Kl)
            .map_err(to_py_err)?;
        let layer = match objective {
            FitObjective::LeastSquares => fit_ls(&data, &bank, &cfg.inner, ridge),
            FitObjective::Kl => fit_kl(&data, &bank, &cfg.inner, ridge),
        }
        .map_err(to_py_err)?;
        Ok(Self { inner: layer })
    }

    /// Attention-scale matrix of the compiled operator on a new case.
    #[pyo3(signature = (case, mode="two_sided"))]
    fn attention(&self, case: &PyAttentionCase, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        let plan = self.inner.apply(&case.inner, parse_mode(mode)?);
        Ok(matrix_to_rows(&plan.attention))
    }

    /// Head output y = A V of the compiled operator.
    #[pyo3(signature = (case, mode="two_sided"))]
    fn head_output(&self, case: &PyAttentionCase, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(matrix_to_rows(&self.inner.head_forward(&case.inner, parse_mode(mode)?)))
    }

    /// Centered predicted source dual on a new case.
    fn predicted_dual(&self, case: &PyAttentionCase) -> Vec<f64> {
        let feats = dsattn::sliced::feature_matrix(
            &case.inner.q,
            &case.inner.k,
            &self.inner.bank,
            case.inner.key_mask.as_ref(),
        );
        self.inner.predict_dual(&feats).to_vec()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        harness::save_layer(&self.inner, std::path::Path::new(path)).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: harness::load_layer(std::path::Path::new(path)).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn omega(&self) -> Vec<f64> {
        self.inner.omega.to_vec()
    }

    #[getter]
    fn slices(&self) -> usize {
        self.inner.bank.len()
    }

    #[getter]
    fn objective(&self) -> &'static str {
        self.inner.objective.label()
    }

    #[getter]
    fn ridge(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn fit_residual(&self) -> f64 {
        self.inner.fit_stats.residual
    }

    #[getter]
    fn fit_seconds(&self) -> f64 {
        self.inner.fit_stats.fit_seconds
    }

    #[getter]
    fn teacher(&self) -> PyTeacherConfig {
        PyTeacherConfig { inner: self.inner.teacher_cfg.clone() }
    }

    fn __repr__(&self) -> String {
        format!(
            "CompiledLayer(objective='{}', L={}, cases={}, residual={:.3e})",
            self.inner.objective.label(),
            self.inner.bank.len(),
            self.inner.fit_stats.cases,
            self.inner.fit_stats.residual
        )
    }
}

/// Sliced feature matrix X (N x L) for a case under a sampled bank.
#[pyfunction]
#[pyo3(signature = (case, slices=32, bank_seed=7))]
fn sliced_features(case: &PyAttentionCase, slices: usize, bank_seed: u64) -> Vec<Vec<f64>> {
    let bank = SliceBank::sample(bank_seed, slices, case.inner.d_h());
    let feats = dsattn::sliced::feature_matrix(
        &case.inner.q,
        &case.inner.k,
        &bank,
        case.inner.key_mask.as_ref(),
    );
    matrix_to_rows(&feats.x)
}

/// Uncentered 1D source potential for sorted-matching transport.
#[pyfunction]
fn slice_potential_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PyValueError::new_err("supports must be non-empty and equal length"));
    }
    Ok(dsattn::sliced::slice_potential_1d(&a, &b))
}

/// Run the deterministic property suite; returns (name, passed, detail).
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    dsattn::selftest::run_all()
        .into_iter()
        .map(|(name, result, _)| match result {
            Ok(detail) => (name.to_string(), true, detail),
            Err(msg) => (name.to_string(), false, msg),
        })
        .collect()
}

#[pymodule]
fn pydsattn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTeacherConfig>()?;
    m.add_class::<PyAttentionCase>()?;
    m.add_class::<PyCompiledLayer>()?;
    m.add_function(wrap_pyfunction!(gen_case, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_attention, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_dual, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_errors, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(sliced_features, m)?)?;
    m.add_function(wrap_pyfunction!(slice_potential_1d, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
