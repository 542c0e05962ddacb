use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use omniweave::config::RunConfig;
use omniweave::data::Split;
use omniweave::model::Checkpoint;
use omniweave::pipeline;
use omniweave::session::MetricsSink;
use omniweave::trainer::BalancerConfig;
use omniweave::verify::{gradcheck as run_gradcheck, GradOptions};
use omniweave::Error;

create_exception!(omniweave, CheckpointError, PyException);
create_exception!(omniweave, NumericError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Checkpoint(_) => CheckpointError::new_err(e.to_string()),
        Error::Numeric(_) => NumericError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(text: Option<&str>) -> omniweave::Result<RunConfig> {
    let cfg = match text {
        Some(t) => RunConfig::from_toml(t)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn stage_run(stage: u32, cfg: Option<&str>, input: Option<PathBuf>, out: PathBuf, cold: bool, stop_after: Option<u64>) -> omniweave::Result<Vec<f64>> {
    let cfg = config(cfg)?;
    let suite = cfg.suite()?;
    let input = input.as_deref().map(Checkpoint::load).transpose()?;
    let mut sink = match &cfg.paths.metrics {
        Some(p) => MetricsSink::append(p)?,
        None => MetricsSink::memory(),
    };
    let run = match stage {
        3 => pipeline::train::<f32>(&cfg, &suite, input.as_ref(), cold, &mut sink, stop_after)?,
        s => pipeline::pretrain::<f32>(s, &cfg, &suite, input.as_ref(), &mut sink, stop_after)?,
    };
    run.checkpoint.save(&out)?;
    Ok(run.losses)
}

type Report = (String, String, f64, usize);

fn eval_run(cfg: Option<&str>, checkpoint: PathBuf, split: &str) -> omniweave::Result<Vec<Report>> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        s => return Err(Error::Invalid(format!("split must be `train` or `test`, got `{s}`"))),
    };
    let cfg = config(cfg)?;
    let ck = Checkpoint::load(&checkpoint)?;
    let mut bundle = pipeline::trained_bundle::<f32>(&cfg, &ck)?;
    let reports = pipeline::evaluate_all(&mut bundle, &cfg.suite()?, split)?;
    Ok(reports.into_iter().map(|r| (r.task, r.metric, r.value, r.n)).collect())
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(to_py)
}

#[pyfunction]
fn mask_count(n: usize, ratio: f64) -> PyResult<usize> {
    omniweave::pretrain::mask_count(n, ratio).map_err(to_py)
}

/// Normalized pair weights from two convergence rates.
#[pyfunction]
#[pyo3(signature = (rho_q, rho_r, gamma=1.0, floor=0.2, cap=5.0))]
fn balance_weights(rho_q: f64, rho_r: f64, gamma: f64, floor: f64, cap: f64) -> PyResult<(f64, f64)> {
    let cfg = BalancerConfig { gamma, floor, cap };
    omniweave::trainer::balance_weights(&cfg, rho_q, rho_r).map_err(to_py)
}

/// Finite-difference check on the miniature model; returns
/// `(passed, worst_relative_error)`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn gradcheck(py: Python<'_>, config: Option<String>) -> PyResult<(bool, f64)> {
    py.detach(|| {
        let cfg = self::config(config.as_deref())?;
        let report = run_gradcheck(&cfg, &GradOptions::default())?;
        Ok((report.passed(), report.worst()))
    })
    .map_err(to_py)
}

/// Runs pretraining stage 1 or 2, writes the checkpoint to `out` and
/// returns the per-step losses.
#[pyfunction]
#[pyo3(signature = (stage, out, config=None, checkpoint=None, stop_after=None))]
fn pretrain(
    py: Python<'_>,
    stage: u32,
    out: PathBuf,
    config: Option<String>,
    checkpoint: Option<PathBuf>,
    stop_after: Option<u64>,
) -> PyResult<Vec<f64>> {
    if !(1..=2).contains(&stage) {
        return Err(PyValueError::new_err(format!("pretraining stage must be 1 or 2, got {stage}")));
    }
    py.detach(|| stage_run(stage, config.as_deref(), checkpoint, out, false, stop_after)).map_err(to_py)
}

/// Supervised multitask training.
#[pyfunction]
#[pyo3(signature = (out, config=None, checkpoint=None, cold_start=false, stop_after=None))]
fn train(
    py: Python<'_>,
    out: PathBuf,
    config: Option<String>,
    checkpoint: Option<PathBuf>,
    cold_start: bool,
    stop_after: Option<u64>,
) -> PyResult<Vec<f64>> {
    py.detach(|| stage_run(3, config.as_deref(), checkpoint, out, cold_start, stop_after)).map_err(to_py)
}

/// `(task, metric, value, n)` rows for every task.
#[pyfunction]
#[pyo3(signature = (checkpoint, config=None, split="test"))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, config: Option<String>, split: &str) -> PyResult<Vec<Report>> {
    let split = split.to_owned();
    py.detach(|| eval_run(config.as_deref(), checkpoint, &split)).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "omniweave")]
fn omniweave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(balance_weights, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_overrides_defaults() {
        let cfg = config(Some("seed = 11\n[stage3]\nsteps = 5\n")).unwrap();
        assert_eq!((cfg.seed, cfg.stage3.steps), (11, 5));
        assert_eq!(cfg.stage1, RunConfig::default().stage1);
        assert!(matches!(config(Some("[stage3]\nbatch = 3\n")), Err(Error::Config { .. })));
    }

    #[test]
    fn evaluation_rejects_unknown_split() {
        let err = eval_run(None, PathBuf::from("missing.owck"), "valid").unwrap_err();
        assert!(err.to_string().contains("split"));
    }

    #[test]
    fn missing_checkpoint_is_an_io_error() {
        let dir = std::env::temp_dir().join("omniweave-py-missing.owck");
        assert!(matches!(stage_run(2, None, Some(dir.clone()), dir, false, None), Err(Error::Io(_))));
    }
}
