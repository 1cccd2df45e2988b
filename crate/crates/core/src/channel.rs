//! Block-fading channel tasks and frame generation.
//!
//! Every frame is a pure function of `(seed, stream)`: [`task_rng`] keys a
//! ChaCha stream per task so frames can be generated in any order or in
//! parallel and still come out identical.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::constellation::{Constellation, Scheme};
use crate::error::{Error, Result};

/// Longest frame the detectors are built for.
pub const MAX_FRAME_LEN: usize = 31;

/// Fading law of the channel matrix entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fading {
    Rayleigh,
    /// Line-of-sight plus scattering with Ricean factor `kappa`.
    Rician { kappa: f64 },
}

impl fmt::Display for Fading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fading::Rayleigh => f.write_str("rayleigh"),
            Fading::Rician { kappa } => write!(f, "rician(kappa={kappa})"),
        }
    }
}

impl Fading {
    /// Parses `rayleigh` or `rician`; the latter takes the given Ricean factor.
    pub fn parse(name: &str, kappa: f64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "rayleigh" => Ok(Fading::Rayleigh),
            "rician" | "ricean" => {
                if kappa.is_nan() || kappa < 0.0 {
                    return Err(Error::Config(format!("kappa must be nonnegative, got {kappa}")));
                }
                Ok(Fading::Rician { kappa })
            }
            other => Err(Error::Config(format!("unknown fading model '{other}'"))),
        }
    }
}

/// Uniform SNR interval in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrRange {
    pub lo_db: f64,
    pub hi_db: f64,
}

impl SnrRange {
    pub fn new(lo_db: f64, hi_db: f64) -> Result<Self> {
        if !(lo_db.is_finite() && hi_db.is_finite()) || lo_db > hi_db {
            return Err(Error::Config(format!("invalid SNR range [{lo_db}, {hi_db}] dB")));
        }
        Ok(Self { lo_db, hi_db })
    }

    pub fn fixed(snr_db: f64) -> Self {
        Self {
            lo_db: snr_db,
            hi_db: snr_db,
        }
    }

    /// Default training range per modulation.
    pub fn training_default(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Bpsk => Self { lo_db: 10.0, hi_db: 20.0 },
            Scheme::Qpsk => Self { lo_db: 15.0, hi_db: 25.0 },
            Scheme::Qam16 => Self { lo_db: 25.0, hi_db: 35.0 },
            Scheme::Qam64 => Self { lo_db: 30.0, hi_db: 40.0 },
        }
    }
}

/// Noise variance for an SNR in dB, with SNR = 1/σ².
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One coherence block: channel matrix and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTask {
    /// N_r × N_t channel matrix.
    pub h: DMatrix<Complex64>,
    pub sigma2: f64,
    pub fading: Fading,
}

impl ChannelTask {
    pub fn n_r(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.h.ncols()
    }

    /// H·x for a transmit vector.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.n_r())
            .map(|r| x.iter().enumerate().map(|(c, xc)| self.h[(r, c)] * xc).sum())
            .collect()
    }
}

/// A task's frame of `len` (x, y) pairs, the first `pilots` of them known.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub task: ChannelTask,
    pub scheme: Scheme,
    pub pilots: usize,
    pub x_indices: Vec<usize>,
    pub y: Vec<Vec<Complex64>>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.x_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_indices.is_empty()
    }

    pub fn n_t(&self) -> usize {
        self.task.n_t()
    }

    pub fn n_r(&self) -> usize {
        self.task.n_r()
    }

    /// The first `len` pairs as a shorter frame of the same task.
    pub fn truncated(&self, len: usize) -> Frame {
        Frame {
            task: self.task.clone(),
            scheme: self.scheme,
            pilots: self.pilots.min(len.saturating_sub(1)),
            x_indices: self.x_indices[..len].to_vec(),
            y: self.y[..len].to_vec(),
        }
    }
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based random stream for task `stream` under `seed`.
pub fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a channel matrix and noise level.
pub fn sample_task<R: Rng + ?Sized>(
    fading: Fading,
    snr: SnrRange,
    n_t: usize,
    n_r: usize,
    rng: &mut R,
) -> ChannelTask {
    let h = match fading {
        Fading::Rayleigh => DMatrix::from_fn(n_r, n_t, |_, _| complex_gaussian(rng, 1.0)),
        Fading::Rician { kappa } => {
            let (los, scatter) = if kappa.is_infinite() {
                (1.0, 0.0)
            } else {
                ((kappa / (kappa + 1.0)).sqrt(), (1.0 / (kappa + 1.0)).sqrt())
            };
            // one LoS phase per block, shared by all entries
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let phase = Complex64::from_polar(los, theta);
            DMatrix::from_fn(n_r, n_t, |_, _| {
                let s = complex_gaussian(rng, 1.0);
                if scatter == 0.0 {
                    phase
                } else {
                    phase + s * scatter
                }
            })
        }
    };
    let snr_db = if snr.lo_db == snr.hi_db {
        snr.lo_db
    } else {
        rng.random_range(snr.lo_db..snr.hi_db)
    };
    ChannelTask {
        h,
        sigma2: noise_variance(snr_db),
        fading,
    }
}

/// Transmits `len` uniform joint symbols through the task's channel.
pub fn generate_frame<R: Rng + ?Sized>(
    task: &ChannelTask,
    constellation: &Constellation,
    len: usize,
    pilots: usize,
    rng: &mut R,
) -> Result<Frame> {
    if pilots == 0 || pilots >= len {
        return Err(Error::Config(format!(
            "pilot count must satisfy 1 <= k < T, got k={pilots}, T={len}"
        )));
    }
    let n_t = task.n_t();
    let count = constellation.joint_count(n_t);
    let mut x_indices = Vec::with_capacity(len);
    let mut y = Vec::with_capacity(len);
    for _ in 0..len {
        let idx = rng.random_range(0..count);
        let x = constellation.joint_symbol(idx, n_t)?;
        let mut yt = task.apply(&x.per_antenna);
        if task.sigma2 > 0.0 {
            for v in yt.iter_mut() {
                *v += complex_gaussian(rng, task.sigma2);
            }
        }
        x_indices.push(idx);
        y.push(yt);
    }
    Ok(Frame {
        task: task.clone(),
        scheme: constellation.scheme(),
        pilots,
        x_indices,
        y,
    })
}

/// Describes a reproducible family of frames.
#[derive(Debug, Clone)]
pub struct FrameSpec {
    pub scheme: Scheme,
    pub n_t: usize,
    pub n_r: usize,
    pub fading: Fading,
    pub snr: SnrRange,
    pub len: usize,
    pub pilots: usize,
}

impl FrameSpec {
    /// Frame number `stream` of the family under `seed`.
    pub fn frame(&self, constellation: &Constellation, seed: u64, stream: u64) -> Result<Frame> {
        let mut rng = task_rng(seed, stream);
        let task = sample_task(self.fading, self.snr, self.n_t, self.n_r, &mut rng);
        generate_frame(&task, constellation, self.len, self.pilots, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn snr_conversion() {
        let mut rng = task_rng(1, 0);
        let task = sample_task(Fading::Rayleigh, SnrRange::fixed(15.0), 1, 1, &mut rng);
        assert_abs_diff_eq!(task.sigma2, 10f64.powf(-1.5), epsilon = 1e-15);
        assert_abs_diff_eq!(task.sigma2, 0.031_622_776_601_683_79, epsilon = 1e-12);
    }

    #[test]
    fn snr_range_validation() {
        assert!(SnrRange::new(20.0, 10.0).is_err());
        assert!(SnrRange::new(10.0, 20.0).is_ok());
        let mut rng = task_rng(3, 0);
        let r = SnrRange::new(10.0, 20.0).unwrap();
        for _ in 0..1000 {
            let t = sample_task(Fading::Rayleigh, r, 1, 1, &mut rng);
            let snr = -10.0 * t.sigma2.log10();
            assert!((10.0..=20.0).contains(&snr));
        }
    }

    #[test]
    fn rician_infinite_kappa_is_pure_los() {
        let mut rng = task_rng(7, 0);
        for _ in 0..100 {
            let t = sample_task(Fading::Rician { kappa: f64::INFINITY }, SnrRange::fixed(20.0), 2, 2, &mut rng);
            for v in t.h.iter() {
                assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rayleigh_unit_power() {
        let mut rng = task_rng(11, 0);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += complex_gaussian(&mut rng, 1.0).norm_sqr();
        }
        assert_abs_diff_eq!(acc / n as f64, 1.0, epsilon = 0.01);
    }

    #[test]
    fn rician_unit_power() {
        let mut rng = task_rng(12, 0);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let t = sample_task(Fading::Rician { kappa: 4.0 }, SnrRange::fixed(20.0), 1, 1, &mut rng);
            acc += t.h[(0, 0)].norm_sqr();
        }
        assert_abs_diff_eq!(acc / n as f64, 1.0, epsilon = 0.01);
    }

    #[test]
    fn noiseless_frame_is_exact() {
        let con = Constellation::new(Scheme::Qam16);
        let mut rng = task_rng(5, 0);
        let mut task = sample_task(Fading::Rayleigh, SnrRange::fixed(20.0), 2, 2, &mut rng);
        task.sigma2 = 0.0;
        let f = generate_frame(&task, &con, 31, 1, &mut rng).unwrap();
        for (idx, y) in f.x_indices.iter().zip(&f.y) {
            let x = con.joint_symbol(*idx, 2).unwrap().per_antenna;
            assert_eq!(&task.apply(&x), y);
        }
    }

    #[test]
    fn frames_are_deterministic() {
        let con = Constellation::new(Scheme::Qpsk);
        let spec = FrameSpec {
            scheme: Scheme::Qpsk,
            n_t: 2,
            n_r: 2,
            fading: Fading::Rayleigh,
            snr: SnrRange::new(10.0, 20.0).unwrap(),
            len: 31,
            pilots: 2,
        };
        let a = spec.frame(&con, 42, 17).unwrap();
        let b = spec.frame(&con, 42, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, spec.frame(&con, 42, 18).unwrap());
    }

    #[test]
    fn pilot_bounds() {
        let con = Constellation::new(Scheme::Bpsk);
        let mut rng = task_rng(0, 0);
        let task = sample_task(Fading::Rayleigh, SnrRange::fixed(10.0), 1, 1, &mut rng);
        assert!(generate_frame(&task, &con, 5, 0, &mut rng).is_err());
        assert!(generate_frame(&task, &con, 5, 5, &mut rng).is_err());
        assert!(generate_frame(&task, &con, 5, 4, &mut rng).is_ok());
    }

    #[test]
    fn noise_variance_matches_sigma2() {
        let con = Constellation::new(Scheme::Qpsk);
        let mut rng = task_rng(9, 0);
        let task = sample_task(Fading::Rayleigh, SnrRange::fixed(10.0), 1, 2, &mut rng);
        let f = generate_frame(&task, &con, 100_001, 1, &mut rng).unwrap();
        let mut acc = [0.0; 2];
        let mut cross = Complex64::new(0.0, 0.0);
        let mut re_im = [0.0; 2];
        for (idx, y) in f.x_indices.iter().zip(&f.y) {
            let hx = task.apply(&con.joint_symbol(*idx, 1).unwrap().per_antenna);
            let z0 = y[0] - hx[0];
            let z1 = y[1] - hx[1];
            acc[0] += z0.norm_sqr();
            acc[1] += z1.norm_sqr();
            cross += z0 * z1.conj();
            re_im[0] += z0.re * z0.re;
            re_im[1] += z0.im * z0.im;
        }
        let n = f.len() as f64;
        for a in acc {
            assert!((a / n / task.sigma2 - 1.0).abs() < 0.02);
        }
        assert!((cross / n).norm() / task.sigma2 < 0.05);
        for a in re_im {
            assert!((a / n / (task.sigma2 / 2.0) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn tasks_are_independent() {
        let n = 10_000;
        let hs: Vec<Complex64> = (0..n)
            .map(|i| {
                let mut rng = task_rng(21, i as u64);
                sample_task(Fading::Rayleigh, SnrRange::fixed(10.0), 1, 1, &mut rng).h[(0, 0)]
            })
            .collect();
        // lag-1 correlation across consecutive task streams
        let num: Complex64 = hs.windows(2).map(|w| w[0] * w[1].conj()).sum();
        let den: f64 = hs.iter().map(|h| h.norm_sqr()).sum();
        assert!(num.norm() / den < 0.02);
    }
}
