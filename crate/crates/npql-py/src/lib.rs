//! Python bindings: the tabular oracle, the 2-D manipulation environments,
//! training runs, checkpoint policies, and the verification suites.

use ndarray::{Array1, Array2};
use npql::dist::HybridAction;
use npql::env::{EnvConfig, ManipEnv, Task};
use npql::error::NpqlError;
use npql::oracle;
use npql::run::{run_training, Checkpoint, RunConfig};
use npql::verify;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: NpqlError) -> PyErr {
    match e {
        NpqlError::InvalidConfig(_) | NpqlError::EmptyInput(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Finite KL-regularized MDP with a behavior prior.
#[pyclass(name = "TabularRmdp")]
struct PyTabularRmdp {
    inner: oracle::TabularRmdp,
}

#[pymethods]
impl PyTabularRmdp {
    /// Random instance from the fixed generator family.
    #[staticmethod]
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: oracle::TabularRmdp::random(&mut rng),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: oracle::TabularRmdp::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.discount
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    /// Solve to the regularized fixed point: (Q*, policy, iterations).
    fn value_iteration(&self, tol: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
        let (q, pi, iters) = oracle::value_iteration(&self.inner, tol).map_err(err)?;
        Ok((rows(&q), rows(&pi), iters))
    }

    /// One application of the regularized Bellman operator.
    fn bellman_apply(&self, q: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let q = matrix(q)?;
        Ok(rows(
            &oracle::regularized_bellman_apply(&self.inner, &q).map_err(err)?,
        ))
    }

    /// Max contraction ratio observed over random Q-pairs.
    fn check_contraction(&self, trials: usize, seed: u64) -> PyResult<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        oracle::check_contraction(&self.inner, trials, &mut rng).map_err(err)
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(PyValueError::new_err("ragged or empty matrix"));
    }
    Ok(Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).unwrap())
}

/// Optimal temperature for one Q row under the KL budget.
#[pyfunction]
fn solve_alpha(q_row: Vec<f64>, b_row: Vec<f64>, eps: f64) -> PyResult<f64> {
    let q = Array1::from_vec(q_row);
    let b = Array1::from_vec(b_row);
    oracle::solve_alpha(&q.view(), &b.view(), eps).map_err(err)
}

/// pi(a) proportional to b(a) exp(Q(a)/alpha).
#[pyfunction]
fn closed_form_policy(q_row: Vec<f64>, b_row: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let q = Array1::from_vec(q_row);
    let b = Array1::from_vec(b_row);
    let pi = oracle::closed_form_policy(&q.view(), &b.view(), alpha).map_err(err)?;
    Ok(pi.to_vec())
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> f64 {
    let p = Array1::from_vec(p);
    let q = Array1::from_vec(q);
    oracle::kl_divergence(&p.view(), &q.view())
}

/// 2-D manipulation environment ("push" or "pickplace") with velocity +
/// gripper actions and a sparse terminal reward.
#[pyclass(name = "Env")]
struct PyEnv {
    env: ManipEnv,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task, seed=0))]
    fn new(task: &str, seed: u64) -> PyResult<Self> {
        let task: Task = task.parse().map_err(err)?;
        let env = ManipEnv::new(EnvConfig::new(task)).map_err(err)?;
        Ok(Self {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn reset(&mut self) -> Vec<f64> {
        self.env.reset(&mut self.rng)
    }

    /// step(velocity, gripper) -> (obs, reward, done)
    fn step(&mut self, velocity: Vec<f64>, gripper: bool) -> PyResult<(Vec<f64>, f64, bool)> {
        self.env
            .step(&HybridAction::new(velocity, gripper))
            .map_err(err)
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        npql::env::OBS_DIM
    }

    #[getter]
    fn action_dim(&self) -> usize {
        npql::env::ACTION_DIM
    }

    /// One scripted-expert action for the current state.
    fn expert_action(&mut self) -> (Vec<f64>, bool) {
        let a = npql::env::scripted_expert(&self.env.state, &self.env.cfg, &mut self.rng);
        (a.velocity.clone(), a.gripper)
    }
}

/// A trained policy restored from a checkpoint file.
#[pyclass(name = "Policy")]
struct PyPolicy {
    ckpt: Checkpoint,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (path, seed=0))]
    fn new(path: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(std::path::Path::new(path)).map_err(err)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    #[getter]
    fn algorithm(&self) -> String {
        self.ckpt.config.algorithm.name().to_string()
    }

    #[getter]
    fn env_steps(&self) -> usize {
        self.ckpt.env_steps
    }

    fn act(&mut self, obs: Vec<f64>) -> PyResult<(Vec<f64>, bool)> {
        let a = self.ckpt.learner.act(&obs, &mut self.rng).map_err(err)?;
        Ok((a.velocity.clone(), a.gripper))
    }
}

/// Run a training job from a TOML config string (with optional dotted-path
/// overrides) and return (run_dir, final_success_rate).
#[pyfunction]
#[pyo3(signature = (config_toml="", overrides=vec![]))]
fn train(config_toml: &str, overrides: Vec<String>) -> PyResult<(String, f64)> {
    let mut cfg = if config_toml.trim().is_empty() {
        RunConfig::default()
    } else {
        RunConfig::from_toml(config_toml).map_err(err)?
    };
    for spec in &overrides {
        cfg = cfg.with_override(spec).map_err(err)?;
    }
    let result = run_training(&cfg, None).map_err(err)?;
    Ok((result.dir.display().to_string(), result.final_success))
}

/// Run one verification suite; returns a dict report.
#[pyfunction]
#[pyo3(signature = (suite, seed=42))]
fn run_suite(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Py<PyDict>> {
    let r = verify::run_suite(suite, seed).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("suite", r.suite)?;
    d.set_item("passed", r.passed)?;
    d.set_item("checks", r.checks)?;
    d.set_item("failures", r.failures)?;
    d.set_item("seconds", r.seconds)?;
    Ok(d.unbind())
}

#[pyfunction]
fn suites() -> Vec<String> {
    verify::SUITES.iter().map(|s| s.to_string()).collect()
}

#[pymodule]
fn npql_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTabularRmdp>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(solve_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_policy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(suites, m)?)?;
    Ok(())
}
