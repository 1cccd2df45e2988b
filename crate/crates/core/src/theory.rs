//! Monte Carlo checks for the one-layer linear-attention detector on
//! binary Gaussian tasks: labels x = ±1 with equal probability and
//! y | x ~ N(μ_x, Λ).
//!
//! With weight W the detector outputs S((1/k Σ x_i y_iᵀ) W q) for query q.
//! At W = 2Λ⁻¹ this is S(pᵀΛ⁻¹q) with p = (2/k) Σ y_i x_i, an unbiased
//! estimate of μ = μ1 − μ0, while the Bayes posterior is S(μᵀΛ⁻¹q). A
//! delta-method expansion around p = μ gives the 1/k leading term of the
//! mean squared gap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::channel::{mix_seed, task_rng};
use crate::error::{Error, Result};

/// Tolerance on μ0ᵀΛ⁻¹μ0 = μ1ᵀΛ⁻¹μ1.
pub const ASSUMPTION_TOL: f64 = 1e-10;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

#[derive(Debug, Clone)]
pub struct BinaryGaussianTask {
    mu0: DVector<f64>,
    mu1: DVector<f64>,
    lambda: DMatrix<f64>,
    lambda_inv: DMatrix<f64>,
    /// Lower Cholesky factor of Λ, row-major.
    chol: Vec<f64>,
}

impl BinaryGaussianTask {
    pub fn new(mu0: DVector<f64>, mu1: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let d = mu0.len();
        if d == 0 || mu1.len() != d || lambda.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "means of length {} and {} with a {}x{} covariance",
                d,
                mu1.len(),
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        if (&lambda - lambda.transpose()).amax() > 1e-12 * lambda.amax().max(1.0) {
            return Err(Error::Config("covariance is not symmetric".into()));
        }
        let chol = lambda
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("covariance is not positive definite".into()))?;
        let lambda_inv = chol.inverse();
        let l = chol.l();
        let chol = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| l[(r, c)]).collect();
        Ok(Self {
            mu0,
            mu1,
            lambda,
            lambda_inv,
            chol,
        })
    }

    /// Means `μ0`, `μ1` with covariance `σ²I`.
    pub fn isotropic(mu0: &[f64], mu1: &[f64], sigma2: f64) -> Result<Self> {
        let d = mu0.len();
        Self::new(
            DVector::from_column_slice(mu0),
            DVector::from_column_slice(mu1),
            DMatrix::identity(d, d) * sigma2,
        )
    }

    /// μ1 = −μ0 = e_1 in `d` dimensions, covariance `σ²I`.
    pub fn symmetric(d: usize, sigma2: f64) -> Result<Self> {
        let mut mu1 = vec![0.0; d];
        if d > 0 {
            mu1[0] = 1.0;
        }
        let mu0: Vec<f64> = mu1.iter().map(|v| -v).collect();
        Self::isotropic(&mu0, &mu1, sigma2)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn mu1(&self) -> &DVector<f64> {
        &self.mu1
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn lambda_inv(&self) -> &DMatrix<f64> {
        &self.lambda_inv
    }

    /// |μ1ᵀΛ⁻¹μ1 − μ0ᵀΛ⁻¹μ0|.
    pub fn assumption_gap(&self) -> f64 {
        let q1 = self.mu1.dot(&(&self.lambda_inv * &self.mu1));
        let q0 = self.mu0.dot(&(&self.lambda_inv * &self.mu0));
        (q1 - q0).abs()
    }

    fn require_assumption(&self) -> Result<()> {
        let gap = self.assumption_gap();
        if gap > ASSUMPTION_TOL {
            return Err(Error::Assumption(format!(
                "the two means have different Mahalanobis norms (gap {gap:e})"
            )));
        }
        Ok(())
    }

    fn check_query(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::Shape(format!("query of length {}, task dimension {}", q.len(), self.dim())));
        }
        Ok(())
    }

    /// One labeled draw, written into `y`; returns the label.
    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], y: &mut [f64]) -> f64 {
        let d = self.dim();
        let x = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mu = if x > 0.0 { &self.mu1 } else { &self.mu0 };
        for r in 0..d {
            let row = &self.chol[r * d..r * d + r + 1];
            y[r] = mu[r] + row.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        x
    }

    /// Σ x_i y_i over `k` fresh pairs.
    fn label_weighted_sum<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let (mut z, mut y) = (vec![0.0; d], vec![0.0; d]);
        let mut sum = vec![0.0; d];
        for _ in 0..k {
            let x = self.draw_into(rng, &mut z, &mut y);
            for (s, v) in sum.iter_mut().zip(&y) {
                *s += x * v;
            }
        }
        DVector::from_vec(sum)
    }
}

/// In-context pairs plus a labeled query.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPrompt {
    pub pairs: Vec<(DVector<f64>, f64)>,
    pub query: DVector<f64>,
    pub query_label: f64,
}

pub fn sample_prompt<R: Rng + ?Sized>(task: &BinaryGaussianTask, k: usize, rng: &mut R) -> BinaryPrompt {
    let d = task.dim();
    let (mut z, mut y) = (vec![0.0; d], vec![0.0; d]);
    let mut pairs = Vec::with_capacity(k);
    for _ in 0..k {
        let x = task.draw_into(rng, &mut z, &mut y);
        pairs.push((DVector::from_column_slice(&y), x));
    }
    let query_label = task.draw_into(rng, &mut z, &mut y);
    BinaryPrompt {
        pairs,
        query: DVector::from_column_slice(&y),
        query_label,
    }
}

/// S((1/k Σ x_i y_iᵀ) W q).
pub fn linear_tf_output(w: &DMatrix<f64>, pairs: &[(DVector<f64>, f64)], query: &DVector<f64>) -> Result<f64> {
    let d = query.len();
    if pairs.is_empty() {
        return Err(Error::Config("need at least one in-context pair".into()));
    }
    if w.shape() != (d, d) || pairs.iter().any(|(y, _)| y.len() != d) {
        return Err(Error::Shape("weight, pairs and query dimensions disagree".into()));
    }
    let mut mean = DVector::zeros(d);
    for (y, x) in pairs {
        mean.axpy(*x, y, 1.0);
    }
    mean /= pairs.len() as f64;
    Ok(sigmoid(mean.dot(&(w * query))))
}

/// The optimal weight 2Λ⁻¹.
pub fn optimal_weight(task: &BinaryGaussianTask) -> DMatrix<f64> {
    task.lambda_inv() * 2.0
}

/// Bayes posterior P(x = 1 | q) = S(μᵀΛ⁻¹q), μ = μ1 − μ0.
pub fn posterior_true(task: &BinaryGaussianTask, query: &DVector<f64>) -> Result<f64> {
    task.require_assumption()?;
    task.check_query(query)?;
    let mu = task.mu1() - task.mu0();
    Ok(sigmoid(mu.dot(&(task.lambda_inv() * query))))
}

/// (1/k) S′(a)² [(uᵀΛ⁻¹q)²/4 + 4qᵀΛ⁻¹q] with a = μᵀΛ⁻¹q and u = 2(μ1 + μ0).
pub fn thm1_leading_term(task: &BinaryGaussianTask, query: &DVector<f64>, k: usize) -> Result<f64> {
    task.require_assumption()?;
    task.check_query(query)?;
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let li_q = task.lambda_inv() * query;
    let a = (task.mu1() - task.mu0()).dot(&li_q);
    let u = (task.mu1() + task.mu0()) * 2.0;
    let ul = u.dot(&li_q);
    Ok(sigmoid_prime(a).powi(2) * (ul * ul / 4.0 + 4.0 * query.dot(&li_q)) / k as f64)
}

/// Neumaier-compensated sum, order-preserving.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn trial_rng(seed: u64, k: usize, trial: usize) -> ChaCha8Rng {
    task_rng(mix_seed(seed, k as u64), trial as u64)
}

/// Mean and standard error of the squared gap between the optimal
/// linear detector and the Bayes posterior over `n_trials` fresh
/// `k`-pair prompts, the query held fixed. Trial `i` uses its own
/// random stream derived from `seed`.
pub fn thm1_mc_error(
    task: &BinaryGaussianTask,
    query: &DVector<f64>,
    k: usize,
    n_trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_trials < 2 || k == 0 {
        return Err(Error::Config("need k >= 1 and at least two trials".into()));
    }
    let target = posterior_true(task, query)?;
    let lq = task.lambda_inv() * query;
    let scale = 2.0 / k as f64;
    let errs: Vec<f64> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, k, i);
            let p = task.label_weighted_sum(k, &mut rng) * scale;
            let gap = sigmoid(p.dot(&lq)) - target;
            gap * gap
        })
        .collect();
    let n = n_trials as f64;
    let mean = compensated_sum(errs.iter().copied()) / n;
    let var = compensated_sum(errs.iter().map(|e| (e - mean) * (e - mean))) / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Fraction of trials, and its standard error, where the thresholded
/// output of the detector trained at covariance ξ²I agrees with the
/// optimal rule sign((μ1 − μ0)ᵀq) on a test task with covariance σ²I.
/// Query and prompt are redrawn every trial.
pub fn thm2_mismatch_agreement(
    test_task: &BinaryGaussianTask,
    train_xi2: f64,
    k: usize,
    n_trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = test_task.dim();
    let s2 = test_task.lambda()[(0, 0)];
    if (test_task.lambda() - DMatrix::identity(d, d) * s2).amax() > 1e-12 {
        return Err(Error::Assumption("test covariance must be isotropic".into()));
    }
    if !(train_xi2 > 0.0) || n_trials == 0 || k == 0 {
        return Err(Error::Config("need ξ² > 0, k >= 1 and at least one trial".into()));
    }
    let w = DMatrix::identity(d, d) * (2.0 / train_xi2);
    let mu = test_task.mu1() - test_task.mu0();
    let agree: Vec<bool> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, k, i);
            let s = test_task.label_weighted_sum(k, &mut rng);
            let (mut z, mut y) = (vec![0.0; d], vec![0.0; d]);
            test_task.draw_into(&mut rng, &mut z, &mut y);
            let q = DVector::from_vec(y);
            let out = sigmoid((&s / k as f64).dot(&(&w * &q)));
            (out > 0.5) == (mu.dot(&q) > 0.0)
        })
        .collect();
    let p = agree.iter().filter(|&&a| a).count() as f64 / n_trials as f64;
    Ok((p, (p * (1.0 - p) / n_trials as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thm1Row {
    pub k: usize,
    pub mc_error: f64,
    pub stderr: f64,
    pub leading_term: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thm2Row {
    pub k: usize,
    pub agreement: f64,
    pub stderr: f64,
}

pub fn thm1_sweep(
    task: &BinaryGaussianTask,
    query: &DVector<f64>,
    k_grid: &[usize],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Thm1Row>> {
    k_grid
        .iter()
        .map(|&k| {
            let (mc, se) = thm1_mc_error(task, query, k, n_trials, seed)?;
            let lead = thm1_leading_term(task, query, k)?;
            Ok(Thm1Row {
                k,
                mc_error: mc,
                stderr: se,
                leading_term: lead,
                ratio: mc / lead,
            })
        })
        .collect()
}

pub fn thm2_sweep(
    test_task: &BinaryGaussianTask,
    train_xi2: f64,
    k_grid: &[usize],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Thm2Row>> {
    k_grid
        .iter()
        .map(|&k| {
            let (agreement, stderr) = thm2_mismatch_agreement(test_task, train_xi2, k, n_trials, seed)?;
            Ok(Thm2Row { k, agreement, stderr })
        })
        .collect()
}

pub fn thm1_csv(rows: &[Thm1Row]) -> String {
    let mut s = String::from("k,mc_error,stderr,leading_term,ratio\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.k, r.mc_error, r.stderr, r.leading_term, r.ratio));
    }
    s
}

pub fn thm2_csv(rows: &[Thm2Row]) -> String {
    let mut s = String::from("k,agreement,stderr\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.k, r.agreement, r.stderr));
    }
    s
}

/// Least-squares slope of ln(value) against ln(k).
pub fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(k, _)| (*k as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
