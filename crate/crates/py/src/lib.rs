//! Python bindings: configs, environments, policies, training and the
//! benchmark. Structured results cross the boundary as JSON strings.

use more_core::amp::{gen_reference_clip, ClipGait, ClipParams};
use more_core::bench;
use more_core::checkpoint;
use more_core::config::{Ablation, RunConfig};
use more_core::env::{self, CommandState, DrConfig, ObservationBundle, TerrainKind};
use more_core::gait::N_GAITS;
use more_core::latents::analyze_latents;
use more_core::policy::LatentRow;
use more_core::trainer;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: more_core::Error) -> PyErr {
    match e {
        more_core::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "RunConfig", unsendable, from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        RunConfig::load(path).map(|inner| Self { inner }).map_err(err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn apply_ablation(&mut self, name: &str) -> PyResult<()> {
        let a: Ablation = name.parse().map_err(err)?;
        a.apply(&mut self.inner);
        Ok(())
    }
}

#[pyclass(name = "Observation", unsendable, from_py_object)]
#[derive(Clone)]
struct PyObservation {
    inner: ObservationBundle,
}

#[pymethods]
impl PyObservation {
    #[getter]
    fn gait(&self) -> Vec<f64> {
        self.inner.gait.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }
}

#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    inner: env::Env,
    config: RunConfig,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyRunConfig>) -> Self {
        let config = config.map(|c| c.inner).unwrap_or_default();
        Self {
            inner: env::Env::new(config.train.env.clone()),
            config,
        }
    }

    /// Nominal dynamics on a generated terrain.
    #[pyo3(signature = (terrain="flat", difficulty=0.0, lin_vel=0.5, gait=0, seed=0))]
    fn reset(&mut self, terrain: &str, difficulty: f64, lin_vel: f64, gait: usize, seed: u64) -> PyResult<PyObservation> {
        let kind: TerrainKind = terrain.parse().map_err(err)?;
        if gait >= N_GAITS {
            return Err(PyValueError::new_err(format!("gait {gait} out of range (0..{N_GAITS})")));
        }
        let field = env::generate_terrain(kind, difficulty, seed, &self.config.train.env.terrain).map_err(err)?;
        let commands = CommandState::new(lin_vel, 0.0, gait, N_GAITS);
        let inner = self.inner.reset(field, DrConfig::identity(), commands, seed).map_err(err)?;
        Ok(PyObservation { inner })
    }

    /// Returns (observation, locomotion reward, termination name, done).
    fn step(&mut self, action: Vec<f64>) -> PyResult<(PyObservation, f64, String, bool)> {
        let r = self.inner.step(&action).map_err(err)?;
        let term = serde_json::to_value(r.termination)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Ok((
            PyObservation { inner: r.observation },
            r.rewards.total,
            term,
            r.termination.is_done(),
        ))
    }

    fn distance(&self) -> f64 {
        self.inner.distance()
    }

    fn base(&self) -> (f64, f64) {
        let b = self.inner.state().base;
        (b[0], b[1])
    }
}

#[pyclass(name = "Policy", unsendable, from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: more_core::policy::Policy,
}

#[pymethods]
impl PyPolicy {
    /// Random initialization sized for `config`'s environment.
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=0))]
    fn random(config: Option<PyRunConfig>, seed: u64) -> Self {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let dims = more_core::policy::PolicyDims::from_env(&cfg.train.env, N_GAITS);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: more_core::policy::Policy::new(dims, cfg.train.policy.clone(), &mut rng),
        }
    }

    /// Reads a policy or training checkpoint directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::load_policy(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_policy(path, &self.inner).map_err(err)
    }

    /// Mean action, or a sample when `seed` is given.
    #[pyo3(signature = (obs, seed=None))]
    fn act(&self, obs: &PyObservation, seed: Option<u64>) -> PyResult<Vec<f64>> {
        let out = match seed {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                self.inner.act(&obs.inner, Some(&mut rng))
            }
            None => self.inner.act(&obs.inner, None::<&mut ChaCha8Rng>),
        };
        out.map(|o| o.action).map_err(err)
    }

    #[getter]
    fn has_residual(&self) -> bool {
        self.inner.residual.is_some()
    }
}

#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: trainer::Trainer,
    config: RunConfig,
}

#[pymethods]
impl PyTrainer {
    #[staticmethod]
    #[pyo3(signature = (config, seed=0))]
    fn stage1(config: &PyRunConfig, seed: u64) -> PyResult<Self> {
        let inner = trainer::stage1_trainer(&config.inner, seed).map_err(err)?;
        Ok(Self {
            inner,
            config: config.inner.clone(),
        })
    }

    /// Stage-2 trainer with warmed-up discriminators.
    #[staticmethod]
    #[pyo3(signature = (config, base=None, seed=0))]
    fn stage2(config: &PyRunConfig, base: Option<PyPolicy>, seed: u64) -> PyResult<Self> {
        let mut inner = trainer::stage2_trainer(&config.inner, base.map(|p| p.inner), seed).map_err(err)?;
        trainer::warmup_discriminators(&mut inner).map_err(err)?;
        Ok(Self {
            inner,
            config: config.inner.clone(),
        })
    }

    /// One iteration; returns its metrics record as JSON.
    fn iterate(&mut self) -> PyResult<String> {
        let m = self.inner.iterate().map_err(err)?;
        serde_json::to_string(&m).map_err(json_err)
    }

    fn policy(&self) -> PyPolicy {
        PyPolicy {
            inner: self.inner.policy.clone(),
        }
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::save_trainer(path, &self.inner, &self.config).map_err(err)
    }
}

/// Reference clip for `gait` ("walk", "run", "high_knees", "squat") as JSON.
#[pyfunction]
#[pyo3(signature = (gait, seed=0))]
fn reference_clip(gait: &str, seed: u64) -> PyResult<String> {
    let g = ClipGait::ALL
        .into_iter()
        .find(|g| g.as_str() == gait)
        .ok_or_else(|| PyValueError::new_err(format!("unknown gait `{gait}`")))?;
    let cfg = RunConfig::default();
    let clip = gen_reference_clip(&ClipParams::preset(g), &cfg.train.env.robot, seed).map_err(err)?;
    serde_json::to_string(&clip).map_err(json_err)
}

/// Succ./Dist. benchmark; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (policy, config, seed=0, method="MoRE"))]
fn run_benchmark(policy: &PyPolicy, config: &PyRunConfig, seed: u64, method: &str) -> PyResult<String> {
    let c = &config.inner;
    let report = bench::run_benchmark(
        &policy.inner,
        &c.train.env,
        &c.train.rewards,
        &c.bench,
        method,
        &c.hash(),
        seed,
        None,
    )
    .map_err(err)?;
    report.to_json().map_err(err)
}

/// Latent report for JSONL latent rows.
#[pyfunction]
fn latent_report(jsonl: &str) -> PyResult<String> {
    let rows = jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<LatentRow>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(json_err)?;
    let report = analyze_latents(&rows).map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pyfunction]
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    trainer::derive_seed(seed, stream, index)
}

#[pymodule]
fn more_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyObservation>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(reference_clip, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(latent_report, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add("N_GAITS", N_GAITS)?;
    Ok(())
}
