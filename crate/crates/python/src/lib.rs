//! Python bindings. Token sequences cross the boundary as lists of ints and
//! episodes as opaque `Episode` objects.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use prefinfer::checkpoint::{Checkpoint, SeedState};
use prefinfer::config::RunConfig;
use prefinfer::eval::{self, DecodeMode, DescriptionSource};
use prefinfer::grpo;
use prefinfer::oracles::{self, GenOracle, JudgeOracle};
use prefinfer::pipeline::{self, RunOptions, Stage};
use prefinfer::policy::{self, DecodeConfig, PolicyConfig, PolicyParams};
use prefinfer::prefworld::{self, SignalKind, WorldConfig};
use prefinfer::rng;
use prefinfer::symlang::{self, Token, Vocab};

fn py_err(e: prefinfer::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn tokens(dims: usize, ids: &[i64]) -> PyResult<Vec<Token>> {
    Vocab::new(dims).from_ids(ids).map_err(py_err)
}

fn ids(tokens: &[Token]) -> Vec<i64> {
    tokens.iter().map(|t| t.0 as i64).collect()
}

fn kind(name: &str) -> PyResult<SignalKind> {
    match name {
        "pairs" => Ok(SignalKind::Pairs),
        "ugc" => Ok(SignalKind::Ugc),
        "mixed" => Ok(SignalKind::Mixed),
        other => Err(PyValueError::new_err(format!("unknown signal kind {other:?}"))),
    }
}

/// A synthetic preference episode.
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Episode {
    inner: prefworld::Episode,
}

#[pymethods]
impl Episode {
    #[getter]
    fn user(&self) -> Vec<i8> {
        self.inner.user.p.clone()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn test_chosen(&self) -> Vec<i8> {
        self.inner.test.chosen.clone()
    }

    #[getter]
    fn test_rejected(&self) -> Vec<i8> {
        self.inner.test.rejected.clone()
    }

    /// Token ids of the encoded prompt.
    fn prompt(&self) -> PyResult<Vec<i64>> {
        let vocab = Vocab::new(self.inner.dims());
        symlang::encode_episode(vocab, &self.inner).map(|t| ids(&t)).map_err(py_err)
    }

    fn reversed(&self) -> Episode {
        Episode {
            inner: prefworld::reverse_episode(&self.inner),
        }
    }

    /// A well-formed output whose description is the user's own vector.
    fn golden_output(&self) -> Vec<i64> {
        ids(&prefworld::golden_description(&self.inner.user).wrap(&[]))
    }

    fn to_json(&self) -> String {
        prefworld::episode_to_json(&self.inner)
    }

    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Episode> {
        prefworld::episode_from_json(line).map(|inner| Episode { inner }).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Episode(dims={}, signals={})", self.inner.dims(), self.inner.signals.len())
    }
}

/// Generator for synthetic preference episodes.
#[pyclass(frozen)]
struct World {
    config: WorldConfig,
}

#[pymethods]
impl World {
    #[new]
    #[pyo3(signature = (dims=8, active=2, attr_density=0.5, label_noise=0.0, signals=4, signal_kind="pairs"))]
    fn new(dims: usize, active: usize, attr_density: f64, label_noise: f64, signals: usize, signal_kind: &str) -> PyResult<Self> {
        let config = WorldConfig {
            dims,
            active,
            attr_density,
            label_noise,
            signals,
            signal_kind: kind(signal_kind)?,
            ..WorldConfig::default()
        };
        config.validate().map_err(py_err)?;
        Ok(World { config })
    }

    /// `count` episodes from the stream `(seed, domain)`.
    #[pyo3(signature = (seed, count, domain=rng::domain::TEST))]
    fn episodes(&self, py: Python<'_>, seed: u64, count: usize, domain: u64) -> PyResult<Vec<Episode>> {
        let config = self.config.clone();
        let eps = py
            .detach(|| prefworld::generate_dataset(&config, seed, domain, count))
            .map_err(py_err)?;
        Ok(eps.into_iter().map(|inner| Episode { inner }).collect())
    }

    /// Exact accuracy of naming one random dimension with a random sign.
    fn single_dimension_baseline(&self) -> PyResult<f64> {
        eval::single_dimension_baseline(&self.config).map_err(py_err)
    }
}

/// Autoregressive policy over the symbolic vocabulary.
#[pyclass]
struct Policy {
    params: PolicyParams,
    dims: usize,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (dims, embed_dim=16, window=4, hidden=64, init_scale=0.08, seed=7))]
    fn new(dims: usize, embed_dim: usize, window: usize, hidden: usize, init_scale: f64, seed: u64) -> PyResult<Self> {
        let config = PolicyConfig {
            embed_dim,
            window,
            hidden,
            init_scale,
        };
        config.validate().map_err(py_err)?;
        let shape = config.shape(Vocab::new(dims).size());
        let params = PolicyParams::init(shape, init_scale, &mut rng::stream(seed, &[rng::domain::INIT]));
        Ok(Policy { params, dims })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.data.len()
    }

    /// Sampled continuation: `(tokens, model log-probs)`.
    #[pyo3(signature = (prompt, seed, temperature=0.9, top_k=10, nucleus_p=0.95, max_len=64))]
    fn sample(
        &self,
        prompt: Vec<i64>,
        seed: u64,
        temperature: f64,
        top_k: usize,
        nucleus_p: f64,
        max_len: usize,
    ) -> PyResult<(Vec<i64>, Vec<f64>)> {
        let decode = DecodeConfig {
            temperature,
            top_k,
            nucleus_p,
            max_len,
        };
        decode.validate().map_err(py_err)?;
        let prompt = tokens(self.dims, &prompt)?;
        let out = policy::sample(&self.params, &prompt, &decode, &mut rng::stream(seed, &[rng::domain::ROLLOUT])).map_err(py_err)?;
        Ok((ids(&out.tokens), out.model_logprobs))
    }

    #[pyo3(signature = (prompt, max_len=64))]
    fn greedy(&self, prompt: Vec<i64>, max_len: usize) -> PyResult<Vec<i64>> {
        let prompt = tokens(self.dims, &prompt)?;
        policy::greedy(&self.params, &prompt, max_len).map(|s| ids(&s.tokens)).map_err(py_err)
    }

    /// Total log-probability of `output` given `prompt`.
    fn logprob(&self, prompt: Vec<i64>, output: Vec<i64>) -> PyResult<f64> {
        let prompt = tokens(self.dims, &prompt)?;
        let output = tokens(self.dims, &output)?;
        policy::sequence_logprob(&self.params, &prompt, &output).map(|l| l.total).map_err(py_err)
    }

    #[pyo3(signature = (path, force=false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        let ck = Checkpoint {
            config: serde_json::json!({ "dims": self.dims }),
            seed_state: SeedState {
                master_seed: 0,
                stage: "python".into(),
                step: 0,
            },
            params: self.params.clone(),
        };
        ck.save(&path, force).map_err(py_err)
    }

    /// Load a checkpoint written by `save` or by the `sft`/`rl` stages.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Policy> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let vocab = ck.params.shape.vocab;
        if vocab < Token::FIXED + 1 {
            return Err(PyValueError::new_err("checkpoint vocabulary has no dimension tokens"));
        }
        Ok(Policy {
            dims: vocab - Token::FIXED,
            params: ck.params,
        })
    }

    fn __repr__(&self) -> String {
        let s = self.params.shape;
        format!("Policy(dims={}, embed_dim={}, window={}, hidden={})", self.dims, s.embed, s.window, s.hidden)
    }
}

#[pyfunction]
fn check_format(dims: usize, output: Vec<i64>) -> bool {
    match Vocab::new(dims).from_ids(&output) {
        Ok(t) => symlang::check_format(Vocab::new(dims), &t),
        Err(_) => false,
    }
}

/// The signed description vector of a well-formed output, else `None`.
#[pyfunction]
fn parse_description(dims: usize, output: Vec<i64>) -> Option<Vec<i8>> {
    let vocab = Vocab::new(dims);
    let t = vocab.from_ids(&output).ok()?;
    symlang::parse_output(vocab, &t).description().map(|d| d.q.clone())
}

/// Token ids of an output carrying description `q` after `reasoning`.
#[pyfunction]
#[pyo3(signature = (q, reasoning=Vec::new()))]
fn encode_description(q: Vec<i8>, reasoning: Vec<i64>) -> PyResult<Vec<i64>> {
    if q.iter().any(|v| !(-1..=1).contains(v)) {
        return Err(PyValueError::new_err("description entries must be -1, 0 or 1"));
    }
    let reasoning = tokens(q.len(), &reasoning)?;
    Ok(ids(&symlang::ParsedDescription { q }.wrap(&reasoning)))
}

#[pyfunction]
fn advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    if rewards.is_empty() {
        return Err(PyValueError::new_err("rewards must be non-empty"));
    }
    Ok(grpo::compute_advantages(&rewards))
}

#[pyfunction]
#[pyo3(signature = (output, episode, beta=2.0))]
fn reward_jud(output: Vec<i64>, episode: &Episode, beta: f64) -> PyResult<u8> {
    let judge = JudgeOracle::new(beta);
    judge.validate().map_err(py_err)?;
    let vocab = Vocab::new(episode.inner.dims());
    let t = tokens(episode.inner.dims(), &output)?;
    Ok(oracles::reward_jud(&judge, vocab, &t, &episode.inner))
}

#[pyfunction]
#[pyo3(signature = (output, episode, seed, sigma_noise=0.5, alpha=1.0))]
fn reward_gen(output: Vec<i64>, episode: &Episode, seed: u64, sigma_noise: f64, alpha: f64) -> PyResult<u8> {
    let gen = GenOracle {
        alpha,
        sigma_noise,
        ..GenOracle::default()
    };
    gen.validate().map_err(py_err)?;
    let vocab = Vocab::new(episode.inner.dims());
    let t = tokens(episode.inner.dims(), &output)?;
    Ok(oracles::reward_gen(&gen, vocab, &t, &episode.inner, &mut rng::stream(seed, &[rng::domain::REWARD])))
}

/// Greedy-decoded judging accuracy of `policy` on `episodes`.
#[pyfunction]
#[pyo3(signature = (policy, episodes, beta=2.0, max_len=64))]
fn acc_jud(py: Python<'_>, policy: &Policy, episodes: Vec<Episode>, beta: f64, max_len: usize) -> PyResult<f64> {
    let eps: Vec<prefworld::Episode> = episodes.into_iter().map(|e| e.inner).collect();
    if eps.iter().any(|e| e.dims() != policy.dims) {
        return Err(PyValueError::new_err("episode dimensionality does not match the policy"));
    }
    let judge = JudgeOracle::new(beta);
    judge.validate().map_err(py_err)?;
    let decode = DecodeConfig {
        max_len,
        ..DecodeConfig::default()
    };
    let params = policy.params.clone();
    py.detach(|| {
        let source = DescriptionSource::Policy {
            params: &params,
            mode: DecodeMode::Greedy,
        };
        eval::acc_jud(&source, &eps, &judge, &decode)
    })
    .map_err(py_err)
}

fn stage(name: &str) -> PyResult<Stage> {
    Ok(match name {
        "gen-world" => Stage::GenWorld,
        "teach" => Stage::Teach,
        "sft" => Stage::Sft,
        "rl" => Stage::Rl,
        "eval" => Stage::Eval,
        "report" => Stage::Report,
        other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
    })
}

/// Run one pipeline stage; returns the paths written.
#[pyfunction]
#[pyo3(signature = (name, config=None, seed=None, out=None, force=false, from_init=false))]
fn run_stage(
    py: Python<'_>,
    name: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
    from_init: bool,
) -> PyResult<Vec<String>> {
    let stage = stage(name)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(py_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let result = py.detach(|| pipeline::run_stage(stage, &cfg, RunOptions { force, from_init })).map_err(py_err)?;
    Ok(result.files.iter().map(|p| p.display().to_string()).collect())
}

/// Cold-start fine-tuning through the pipeline's `sft` stage.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None, out=None, force=false))]
fn train_sft(py: Python<'_>, config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>, force: bool) -> PyResult<Vec<String>> {
    run_stage(py, "sft", config, seed, out, force, false)
}

/// Policy optimisation through the pipeline's `rl` stage.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None, out=None, force=false, from_init=false))]
fn train_rl(
    py: Python<'_>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
    from_init: bool,
) -> PyResult<Vec<String>> {
    run_stage(py, "rl", config, seed, out, force, from_init)
}

#[pymodule(name = "prefinfer")]
fn prefinfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Episode>()?;
    m.add_class::<World>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(check_format, m)?)?;
    m.add_function(wrap_pyfunction!(parse_description, m)?)?;
    m.add_function(wrap_pyfunction!(encode_description, m)?)?;
    m.add_function(wrap_pyfunction!(advantages, m)?)?;
    m.add_function(wrap_pyfunction!(reward_jud, m)?)?;
    m.add_function(wrap_pyfunction!(reward_gen, m)?)?;
    m.add_function(wrap_pyfunction!(acc_jud, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(train_sft, m)?)?;
    m.add_function(wrap_pyfunction!(train_rl, m)?)?;
    Ok(())
}
