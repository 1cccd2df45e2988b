//! Classical detectors: LMMSE channel estimation with projection,
//! decision-directed MMSE, and non-coherent exhaustive sequence detection.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::Frame;
use crate::constellation::{nearest_joint_symbol, Constellation, JointTable};
use crate::error::{Error, Result};

type CMatrix = DMatrix<Complex64>;

/// Known transmit symbols (N_t × m) and what was received (N_r × m).
#[derive(Debug, Clone)]
pub struct PilotBlock {
    pub x: CMatrix,
    pub y: CMatrix,
    pub sigma2: f64,
}

impl PilotBlock {
    pub fn new(x: CMatrix, y: CMatrix, sigma2: f64) -> Result<Self> {
        if x.ncols() != y.ncols() || x.ncols() == 0 {
            return Err(Error::Shape(format!(
                "pilot block needs matching nonzero column counts, got X {}x{} and Y {}x{}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(Self { x, y, sigma2 })
    }

    /// The first `m` pairs of a frame, with ground-truth symbols.
    pub fn from_frame(frame: &Frame, table: &JointTable, m: usize) -> Result<Self> {
        let labels = &frame.x_indices[..m];
        Self::from_pairs(frame, table, labels)
    }

    /// Pairs `(y_t, labels[t])` for the first `labels.len()` slots of a frame.
    pub fn from_pairs(frame: &Frame, table: &JointTable, labels: &[usize]) -> Result<Self> {
        let m = labels.len();
        let x = CMatrix::from_fn(table.n_t(), m, |r, c| table.symbol(labels[c])[r]);
        let y = CMatrix::from_fn(frame.n_r(), m, |r, c| frame.y[c][r]);
        Self::new(x, y, frame.task.sigma2)
    }
}

/// Channel estimate; `pseudo_inverse` is set when the regularized Gram
/// matrix was singular and a pseudo-inverse had to stand in.
#[derive(Debug, Clone)]
pub struct LmmseEstimate {
    pub h_hat: CMatrix,
    pub pseudo_inverse: bool,
}

/// Ĥ = Y Xᴴ (X Xᴴ + σ² I)⁻¹.
pub fn lmmse_estimate(block: &PilotBlock) -> Result<LmmseEstimate> {
    let xh = block.x.adjoint();
    let cross = &block.y * &xh;
    let gram = &block.x * &xh;
    lmmse_from_moments(&cross, &gram, block.sigma2)
}

/// LMMSE from accumulated moments `Y Xᴴ` and `X Xᴴ`.
fn lmmse_from_moments(cross: &CMatrix, gram: &CMatrix, sigma2: f64) -> Result<LmmseEstimate> {
    let n_t = gram.nrows();
    let reg = gram + CMatrix::identity(n_t, n_t) * Complex64::new(sigma2, 0.0);
    if sigma2 > 0.0 {
        if let Some(inv) = reg.clone().try_inverse() {
            return Ok(LmmseEstimate {
                h_hat: cross * inv,
                pseudo_inverse: false,
            });
        }
    }
    let svd = reg.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = max_sv * 1e-12 * n_t as f64;
    let rank_deficient = svd.singular_values.iter().any(|&s| s <= tol);
    let pinv = svd
        .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(LmmseEstimate {
        h_hat: cross * pinv,
        pseudo_inverse: rank_deficient,
    })
}

/// Projects `y` onto the closest Ĥx over the joint alphabet.
pub fn project_detect(h_hat: &CMatrix, y: &[Complex64], table: &JointTable) -> Result<usize> {
    if h_hat.ncols() != table.n_t() || h_hat.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "estimate is {}x{}, received vector has {} entries, alphabet has {} antennas",
            h_hat.nrows(),
            h_hat.ncols(),
            y.len(),
            table.n_t()
        )));
    }
    let candidates: Vec<Vec<Complex64>> = table
        .symbols()
        .iter()
        .map(|x| {
            (0..h_hat.nrows())
                .map(|r| x.iter().enumerate().map(|(c, xc)| h_hat[(r, c)] * xc).sum())
                .collect()
        })
        .collect();
    nearest_joint_symbol(y, &candidates)
}

/// MMSE with `m` clean pilots, detecting slot `m` (the (m+1)-th symbol).
pub fn mmse_pilot_detect(frame: &Frame, table: &JointTable, m: usize) -> Result<usize> {
    let est = lmmse_estimate(&PilotBlock::from_frame(frame, table, m)?)?;
    project_detect(&est.h_hat, &frame.y[m], table)
}

/// MMSE with the frame's `k` pilots applied to every later slot.
pub fn mmse_pk_detect(frame: &Frame, table: &JointTable) -> Result<Vec<usize>> {
    let est = lmmse_estimate(&PilotBlock::from_frame(frame, table, frame.pilots)?)?;
    frame.y[frame.pilots..]
        .iter()
        .map(|y| project_detect(&est.h_hat, y, table))
        .collect()
}

/// Decision-directed MMSE: every decision joins the pilot set as if it
/// were a clean pair. Returns decisions for slots `k..T`.
pub fn mmse_df_detect(frame: &Frame, table: &JointTable) -> Result<Vec<usize>> {
    mmse_feedback_detect(frame, table, |_, decided| decided)
}

/// Like [`mmse_df_detect`] but each decision is replaced by the truth
/// before it is fed back.
pub fn mmse_df_detect_oracle_feedback(frame: &Frame, table: &JointTable) -> Result<Vec<usize>> {
    mmse_feedback_detect(frame, table, |t, _| frame.x_indices[t])
}

fn mmse_feedback_detect(
    frame: &Frame,
    table: &JointTable,
    feedback: impl Fn(usize, usize) -> usize,
) -> Result<Vec<usize>> {
    let k = frame.pilots;
    if k == 0 {
        return Err(Error::Config("decision feedback needs at least one pilot".into()));
    }
    let n_t = table.n_t();
    let n_r = frame.n_r();
    let mut cross = CMatrix::zeros(n_r, n_t);
    let mut gram = CMatrix::zeros(n_t, n_t);
    for t in 0..k {
        absorb(&mut cross, &mut gram, &frame.y[t], table.symbol(frame.x_indices[t]));
    }
    let mut out = Vec::with_capacity(frame.len() - k);
    for t in k..frame.len() {
        let est = lmmse_from_moments(&cross, &gram, frame.task.sigma2)?;
        let decided = project_detect(&est.h_hat, &frame.y[t], table)?;
        out.push(decided);
        absorb(&mut cross, &mut gram, &frame.y[t], table.symbol(feedback(t, decided)));
    }
    Ok(out)
}

/// Adds one pair to the running `Y Xᴴ` and `X Xᴴ` sums.
fn absorb(cross: &mut CMatrix, gram: &mut CMatrix, y: &[Complex64], x: &[Complex64]) {
    for (r, yr) in y.iter().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            cross[(r, c)] += yr * xc.conj();
        }
    }
    for (r, xr) in x.iter().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            gram[(r, c)] += xr * xc.conj();
        }
    }
}

/// Longest block accepted by [`mlsd_detect`] for a constellation.
pub fn mlsd_default_cap(constellation: &Constellation) -> usize {
    match constellation.order() {
        2 => 12,
        _ => 8,
    }
}

/// Non-coherent maximum-likelihood sequence detection for SISO PSK under
/// Rayleigh block fading. Maximizes
/// `|S Yᴴ|² / (σ²‖S‖² + σ⁴) − ln(‖S‖² + σ²)` over all sequences whose
/// first symbol equals `first_symbol` (the phase reference). Ties go to the
/// lexicographically smallest index vector.
pub fn mlsd_detect(
    y: &[Complex64],
    sigma2: f64,
    constellation: &Constellation,
    first_symbol: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if !constellation.scheme().is_psk() {
        return Err(Error::Unsupported(format!(
            "sequence detection needs a unit-modulus alphabet, got {}",
            constellation.scheme()
        )));
    }
    let len = y.len();
    if len == 0 {
        return Err(Error::Shape("empty received sequence".into()));
    }
    if len > max_len {
        return Err(Error::ComplexityGuard { len, cap: max_len });
    }
    let c = constellation.order();
    if first_symbol >= c {
        return Err(Error::Range {
            index: first_symbol,
            limit: c,
        });
    }
    let pts = constellation.points();
    let objective = |corr: Complex64, energy: f64| {
        if sigma2 > 0.0 {
            corr.norm_sqr() / (sigma2 * energy + sigma2 * sigma2) - (energy + sigma2).ln()
        } else {
            // noiseless limit: every PSK sequence has the same energy
            corr.norm_sqr()
        }
    };

    let free = len - 1;
    let mut digits = vec![0usize; free];
    let mut best = vec![first_symbol; len];
    let mut best_val = f64::NEG_INFINITY;
    let base = pts[first_symbol] * y[0].conj();
    let base_energy = pts[first_symbol].norm_sqr();
    loop {
        let mut corr = base;
        let mut energy = base_energy;
        for (d, yt) in digits.iter().zip(&y[1..]) {
            corr += pts[*d] * yt.conj();
            energy += pts[*d].norm_sqr();
        }
        let val = objective(corr, energy);
        if val > best_val {
            best_val = val;
            best[1..].copy_from_slice(&digits);
        }
        // lexicographic increment, last slot fastest
        let mut pos = free;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < c {
                break;
            }
            digits[pos] = 0;
        }
    }
}
