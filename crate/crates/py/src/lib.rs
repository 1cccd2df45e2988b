//! Python bindings: baselines, evaluation, theory sweeps and checkpoint
//! inspection. Curves come back as lists of `(length, ser, stderr)`.

use std::path::PathBuf;

use defined_core::constellation::Scheme;
use defined_core::eval::{run_eval, EvalConfig, EvalCurve, Method};
use defined_core::model::{load_checkpoint, predict, ModelConfig};
use defined_core::theory::{thm1_sweep, thm2_sweep, BinaryGaussianTask};
use defined_core::Error;
use nalgebra::DVector;
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

type Curve = (Vec<(usize, f64, f64)>, Option<f64>);

fn curve_tuple(c: EvalCurve) -> Curve {
    (c.points.iter().map(|p| (p.length, p.ser, p.stderr)).collect(), c.gain_df)
}

/// Exact parameter count of a model.
#[pyfunction]
#[pyo3(signature = (modulation, d_model = 64, layers = 8, heads = 8, n_t = 1, n_r = 1))]
fn param_count(modulation: &str, d_model: usize, layers: usize, heads: usize, n_t: usize, n_r: usize) -> PyResult<usize> {
    let cfg = ModelConfig::new(parse::<Scheme>(modulation)?, n_t, n_r).with_size(d_model, layers, heads);
    cfg.validate().map_err(to_py)?;
    Ok(cfg.param_count())
}

/// SER curve of one method. Returns `(points, gain_df)`.
#[pyfunction]
#[pyo3(signature = (method, modulation, snr = 20.0, pilots = 1, frame_len = 31, prompts = 1000, seed = 0, ckpt = None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    method: &str,
    modulation: &str,
    snr: f64,
    pilots: usize,
    frame_len: usize,
    prompts: usize,
    seed: u64,
    ckpt: Option<PathBuf>,
) -> PyResult<Curve> {
    let mut cfg = EvalConfig::new(parse::<Method>(method)?, parse::<Scheme>(modulation)?);
    cfg.snr_db = snr;
    cfg.k = pilots;
    cfg.t = frame_len;
    cfg.n_prompts = prompts;
    cfg.seed = seed;
    cfg.validate().map_err(to_py)?;
    let params = match ckpt {
        Some(p) => Some(load_checkpoint(&p).map_err(to_py)?.params),
        None => None,
    };
    let curve = py
        .detach(|| run_eval(&cfg, params.as_ref()))
        .map_err(to_py)?;
    Ok(curve_tuple(curve))
}

/// Class probabilities for a query given `(y, label)` context pairs of a
/// SISO checkpoint; `y` values are complex numbers.
#[pyfunction]
fn detect(ckpt: PathBuf, context: Vec<(Complex64, usize)>, query: Complex64) -> PyResult<(Vec<f64>, usize)> {
    let params = load_checkpoint(&ckpt).map_err(to_py)?.params;
    let ys: Vec<[Complex64; 1]> = context.iter().map(|(y, _)| [*y]).collect();
    let pairs: Vec<(&[Complex64], usize)> = ys.iter().zip(&context).map(|(y, (_, l))| (y.as_slice(), *l)).collect();
    let p = predict(&params, &pairs, &[query]).map_err(to_py)?;
    Ok((p.probabilities, p.index))
}

/// `(k, mc_error, stderr, leading_term, ratio)` rows for means ±e_1 and
/// covariance σ²I.
#[pyfunction]
#[pyo3(signature = (k_grid, trials = 10_000, d = 2, sigma2 = 0.25, query = None, seed = 0))]
fn thm1(
    py: Python<'_>,
    k_grid: Vec<usize>,
    trials: usize,
    d: usize,
    sigma2: f64,
    query: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<Vec<(usize, f64, f64, f64, f64)>> {
    let task = BinaryGaussianTask::symmetric(d, sigma2).map_err(to_py)?;
    let q = query.unwrap_or_else(|| {
        let mut q = vec![0.0; d];
        q[0] = sigma2;
        q
    });
    if q.len() != d {
        return Err(PyValueError::new_err(format!("query has {} entries, d is {d}", q.len())));
    }
    let rows = py
        .detach(|| thm1_sweep(&task, &DVector::from_vec(q), &k_grid, trials, seed))
        .map_err(to_py)?;
    Ok(rows.iter().map(|r| (r.k, r.mc_error, r.stderr, r.leading_term, r.ratio)).collect())
}

/// `(k, agreement, stderr)` rows for a detector trained at covariance
/// ξ²I and tested at σ²I.
#[pyfunction]
#[pyo3(signature = (k_grid, xi2, sigma2 = 1.0, trials = 10_000, d = 2, seed = 0))]
fn thm2(
    py: Python<'_>,
    k_grid: Vec<usize>,
    xi2: f64,
    sigma2: f64,
    trials: usize,
    d: usize,
    seed: u64,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let task = BinaryGaussianTask::symmetric(d, sigma2).map_err(to_py)?;
    let rows = py
        .detach(|| thm2_sweep(&task, xi2, &k_grid, trials, seed))
        .map_err(to_py)?;
    Ok(rows.iter().map(|r| (r.k, r.agreement, r.stderr)).collect())
}

#[pymodule]
fn defined_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(thm1, m)?)?;
    m.add_function(wrap_pyfunction!(thm2, m)?)?;
    Ok(())
}
