//! Python bindings. Sequences cross the boundary as rendered strings and
//! reward tables as `dict[str, float]` of raw scores (scaled by `beta`).

use std::collections::HashMap;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use mellow_core::regularizers as reg;
use mellow_core::train::policy_from_q;
use mellow_core::uncertainty::{self as unc, Region};
use mellow_core::{Error, RewardModel, Token};

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mellow_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "GmParams", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGmParams(mellow_core::GmParams);

#[pymethods]
impl PyGmParams {
    #[new]
    #[pyo3(signature = (q=0.0, alpha=0.0, omega=1.0, beta=1.0))]
    fn new(q: f64, alpha: f64, omega: f64, beta: f64) -> PyResult<Self> {
        Ok(PyGmParams(mellow_core::GmParams::new(q, alpha, omega, beta).py()?))
    }

    /// The `q = 0, omega = 1` setting.
    #[staticmethod]
    #[pyo3(signature = (beta=1.0))]
    fn gfn(beta: f64) -> Self {
        PyGmParams(mellow_core::GmParams::gfn(beta))
    }

    #[getter]
    fn q(&self) -> f64 {
        self.0.q
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }
    #[getter]
    fn omega(&self) -> f64 {
        self.0.omega
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    fn policy_temperature(&self) -> f64 {
        self.0.policy_temperature()
    }

    fn __repr__(&self) -> String {
        let p = self.0;
        format!("GmParams(q={}, alpha={}, omega={}, beta={})", p.q, p.alpha, p.omega, p.beta)
    }
}

#[pyfunction]
fn softmax(values: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    reg::softmax(&values, tau).py()
}

#[pyfunction]
fn gm_backup(q_values: Vec<f64>, params: PyGmParams) -> PyResult<f64> {
    reg::gm_backup(&q_values, &params.0).py()
}

#[pyfunction]
fn gm_optimal_policy(q_values: Vec<f64>, params: PyGmParams) -> PyResult<Vec<f64>> {
    reg::gm_optimal_policy(&q_values, &params.0).py()
}

#[pyfunction]
fn gm_consistency_term(q_values: Vec<f64>, action: usize, params: PyGmParams) -> PyResult<f64> {
    reg::gm_consistency_term(&q_values, action, &params.0).py()
}

#[pyfunction]
fn omega_gm(pi: Vec<f64>, d: Vec<f64>, params: PyGmParams) -> PyResult<f64> {
    reg::omega_gm(&pi, &d, &params.0).py()
}

/// Convex conjugate of the regularizer `kind` ("neg-shannon", "kl", "gm").
#[pyfunction]
fn conjugate(kind: &str, arg: Vec<f64>, d: Vec<f64>, params: PyGmParams) -> PyResult<f64> {
    let kind: reg::RegularizerKind = kind.parse().py()?;
    reg::conjugate(kind, &arg, &d, &params.0).py()
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    mellow_core::tasks::levenshtein(&a, &b)
}

#[pyclass(name = "SequenceSpace", frozen, from_py_object)]
#[derive(Clone)]
struct PySpace(mellow_core::SequenceSpace);

#[pymethods]
impl PySpace {
    #[new]
    #[pyo3(signature = (alphabet, min_len, max_len, variable_length=false))]
    fn new(alphabet: Vec<String>, min_len: usize, max_len: usize, variable_length: bool) -> PyResult<Self> {
        Ok(PySpace(mellow_core::SequenceSpace::new(alphabet, min_len, max_len, variable_length).py()?))
    }

    #[getter]
    fn alphabet(&self) -> Vec<String> {
        self.0.alphabet().to_vec()
    }

    fn terminal_count(&self) -> u128 {
        self.0.terminal_count()
    }

    /// Every terminal object, rendered, in lexicographic order.
    fn enumerate_terminals(&self) -> PyResult<Vec<String>> {
        Ok(self.0.enumerate_terminals().py()?.map(|x| self.0.render(&x)).collect())
    }
}

struct Table {
    beta: f64,
    scores: HashMap<Vec<Token>, f64>,
}

impl RewardModel for Table {
    fn score(&self, x: &[Token]) -> mellow_core::Result<f64> {
        self.scores.get(x).copied().ok_or_else(|| Error::MissingSequence(format!("{x:?}")))
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

fn table(space: &PySpace, scores: HashMap<String, f64>, beta: f64) -> PyResult<Table> {
    let scores = scores
        .into_iter()
        .map(|(k, v)| Ok((space.0.parse(&k).py()?, v)))
        .collect::<PyResult<_>>()?;
    Ok(Table { beta, scores })
}

fn rendered_distribution(space: &PySpace, dist: mellow_core::solver::TerminalDistribution) -> Vec<(String, f64)> {
    dist.entries.into_iter().map(|(x, p)| (space.0.render(&x), p)).collect()
}

/// Exact backward recursion. Returns `(root_value, [(sequence, prob), ...])`.
#[pyfunction]
fn solve(py: Python<'_>, space: PySpace, scores: HashMap<String, f64>, params: PyGmParams) -> PyResult<(f64, Vec<(String, f64)>)> {
    let reward = table(&space, scores, params.0.beta)?;
    py.detach(|| {
        let sol = mellow_core::solve_backward(&space.0, &reward, &params.0).py()?;
        let dist = mellow_core::terminal_distribution(&space.0, &sol.policy).py()?;
        Ok((sol.values.root(), rendered_distribution(&space, dist)))
    })
}

/// Trains a tabular Q-function and returns `(losses, [(sequence, prob), ...])`
/// with the terminal distribution of the learned policy.
#[pyfunction]
#[pyo3(signature = (space, scores, params, steps=1000, learning_rate=0.01, batch_size=16, seed=0))]
fn train(
    py: Python<'_>,
    space: PySpace,
    scores: HashMap<String, f64>,
    params: PyGmParams,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<(String, f64)>)> {
    let reward = table(&space, scores, params.0.beta)?;
    let config = mellow_core::TrainConfig {
        params: params.0,
        steps,
        learning_rate,
        batch_size,
        seed,
        ..Default::default()
    };
    py.detach(|| {
        let (q, log) = mellow_core::train(&space.0, &reward, &config).py()?;
        let policy = policy_from_q(&q, &params.0, 1.0).py()?;
        let dist = mellow_core::terminal_distribution(&space.0, &policy).py()?;
        Ok((log.records.iter().map(|r| r.loss).collect(), rendered_distribution(&space, dist)))
    })
}

#[pyclass(name = "BitSequenceTask", frozen)]
struct PyBitTask(mellow_core::BitSequenceTask);

#[pymethods]
impl PyBitTask {
    #[new]
    #[pyo3(signature = (n, k, modes, beta=1.0))]
    fn new(n: usize, k: usize, modes: Vec<String>, beta: f64) -> PyResult<Self> {
        let modes = mellow_core::BitSequenceTask::parse_modes(&modes.join("\n")).py()?;
        Ok(PyBitTask(mellow_core::BitSequenceTask::new(n, k, modes, beta).py()?))
    }

    #[staticmethod]
    fn random_modes(n: usize, m: usize, seed: u64) -> PyResult<Vec<String>> {
        let modes = mellow_core::BitSequenceTask::random_modes(n, m, seed).py()?;
        Ok(mellow_core::BitSequenceTask::format_modes(&modes).lines().map(String::from).collect())
    }

    fn space(&self) -> PyResult<PySpace> {
        Ok(PySpace(self.0.space().py()?))
    }

    /// `1 - min_mode lev(x, mode) / n` for a sequence of `k`-bit words.
    fn reward(&self, sequence: &str) -> PyResult<f64> {
        let space = self.0.space().py()?;
        self.0.bitseq_reward(&space.parse(sequence).py()?).py()
    }
}

/// Membership of `r` in the uncertainty set of `kind` ("neg-shannon", "kl",
/// "gm"), optionally as a `steps`-fold Minkowski sum. Returns
/// `(region, margin)` with region one of "inside", "boundary", "outside".
#[pyfunction]
#[pyo3(signature = (kind, r, omega=1.0, d=None, q=1.0, steps=1))]
fn uncertainty_membership(
    kind: &str,
    r: Vec<f64>,
    omega: f64,
    d: Option<Vec<f64>>,
    q: f64,
    steps: usize,
) -> PyResult<(&'static str, f64)> {
    let n = r.len();
    let d = d.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let spec = match kind.parse::<reg::RegularizerKind>().py()? {
        reg::RegularizerKind::NegShannon => unc::UncertaintySetSpec::neg_shannon(omega, n),
        reg::RegularizerKind::Kl => unc::UncertaintySetSpec::kl(omega, d),
        reg::RegularizerKind::Gm => unc::UncertaintySetSpec::gm(q, omega, d),
    };
    let m = unc::minkowski_membership(&spec, steps, &r).py()?;
    let region = match m.region {
        Region::Inside => "inside",
        Region::Boundary => "boundary",
        Region::Outside => "outside",
    };
    Ok((region, m.margin))
}

#[pymodule]
fn mellow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGmParams>()?;
    m.add_class::<PySpace>()?;
    m.add_class::<PyBitTask>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gm_backup, m)?)?;
    m.add_function(wrap_pyfunction!(gm_optimal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(gm_consistency_term, m)?)?;
    m.add_function(wrap_pyfunction!(omega_gm, m)?)?;
    m.add_function(wrap_pyfunction!(conjugate, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(uncertainty_membership, m)?)?;
    Ok(())
}
