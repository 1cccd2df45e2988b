//! Modulation alphabets and joint multi-antenna symbol indexing.
//!
//! Points of the square QAM alphabets (QPSK included) are ordered row-major
//! over (in-phase level, quadrature level), both ascending: index
//! `i * M + q` holds `(2i - M + 1) + j(2q - M + 1)` before normalization,
//! where `M` is the number of levels per axis. BPSK is `[-1, +1]`. Symbol
//! error rate is the only metric, so no Gray labeling is attached.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Supported modulation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Bpsk,
    Qpsk,
    Qam16,
    Qam64,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Bpsk, Scheme::Qpsk, Scheme::Qam16, Scheme::Qam64];

    /// Number of points in the alphabet.
    pub fn order(self) -> usize {
        match self {
            Scheme::Bpsk => 2,
            Scheme::Qpsk => 4,
            Scheme::Qam16 => 16,
            Scheme::Qam64 => 64,
        }
    }

    /// All points have unit modulus.
    pub fn is_psk(self) -> bool {
        matches!(self, Scheme::Bpsk | Scheme::Qpsk)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bpsk => "bpsk",
            Scheme::Qpsk => "qpsk",
            Scheme::Qam16 => "16qam",
            Scheme::Qam64 => "64qam",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Scheme::Bpsk => 0,
            Scheme::Qpsk => 1,
            Scheme::Qam16 => 2,
            Scheme::Qam64 => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Scheme::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Scheme::Bpsk),
            "qpsk" | "4qam" => Ok(Scheme::Qpsk),
            "16qam" | "qam16" => Ok(Scheme::Qam16),
            "64qam" | "qam64" => Ok(Scheme::Qam64),
            other => Err(Error::Config(format!("unknown modulation '{other}'"))),
        }
    }
}

/// A unit-average-energy modulation alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    scheme: Scheme,
    points: Vec<Complex64>,
    scale: f64,
}

/// One transmit vector drawn from the product alphabet of `n_t` antennas.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSymbol {
    pub index: usize,
    pub per_antenna: Vec<Complex64>,
}

impl Constellation {
    pub fn new(scheme: Scheme) -> Self {
        let (points, scale) = match scheme {
            Scheme::Bpsk => (vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)], 1.0),
            Scheme::Qpsk => square_qam(2),
            Scheme::Qam16 => square_qam(4),
            Scheme::Qam64 => square_qam(8),
        };
        Self {
            scheme,
            points,
            scale,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Normalization factor applied to the integer grid.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    /// Number of joint symbols for `n_t` transmit antennas.
    pub fn joint_count(&self, n_t: usize) -> usize {
        self.order().pow(n_t as u32)
    }

    /// Decodes a joint index (mixed radix, antenna 0 least significant) and
    /// splits the unit transmit power evenly across antennas.
    pub fn joint_symbol(&self, index: usize, n_t: usize) -> Result<JointSymbol> {
        let limit = self.joint_count(n_t);
        if index >= limit {
            return Err(Error::Range { index, limit });
        }
        let c = self.order();
        let gain = 1.0 / (n_t as f64).sqrt();
        let mut rest = index;
        let per_antenna = (0..n_t)
            .map(|_| {
                let p = self.points[rest % c] * gain;
                rest /= c;
                p
            })
            .collect();
        Ok(JointSymbol { index, per_antenna })
    }

    /// Inverse of [`Constellation::joint_symbol`]: maps each antenna entry
    /// to its nearest alphabet point and re-encodes the mixed-radix index.
    pub fn joint_index(&self, per_antenna: &[Complex64]) -> usize {
        let gain = (per_antenna.len() as f64).sqrt();
        per_antenna.iter().rev().fold(0, |acc, &s| {
            let target = s * gain;
            let nearest = self
                .points
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |best, (i, p)| {
                    let d = (p - target).norm_sqr();
                    if d < best.1 {
                        (i, d)
                    } else {
                        best
                    }
                })
                .0;
            acc * self.order() + nearest
        })
    }

    /// All joint symbols for `n_t` antennas, in index order.
    pub fn joint_table(&self, n_t: usize) -> JointTable {
        let symbols = (0..self.joint_count(n_t))
            .map(|i| self.joint_symbol(i, n_t).expect("index in range").per_antenna)
            .collect();
        JointTable {
            constellation: self.clone(),
            n_t,
            symbols,
        }
    }
}

/// Precomputed joint alphabet for a fixed antenna count.
#[derive(Debug, Clone)]
pub struct JointTable {
    constellation: Constellation,
    n_t: usize,
    symbols: Vec<Vec<Complex64>>,
}

impl JointTable {
    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, index: usize) -> &[Complex64] {
        &self.symbols[index]
    }

    pub fn symbols(&self) -> &[Vec<Complex64>] {
        &self.symbols
    }
}

fn square_qam(levels: usize) -> (Vec<Complex64>, f64) {
    let m = levels as f64;
    // mean |s|^2 of the odd-integer grid is 2(M^2 - 1)/3
    let scale = 1.0 / (2.0 * (m * m - 1.0) / 3.0).sqrt();
    let level = |i: usize| (2 * i) as f64 - m + 1.0;
    let points = (0..levels)
        .flat_map(|i| (0..levels).map(move |q| Complex64::new(level(i), level(q)) * scale))
        .collect();
    (points, scale)
}

/// Index of the candidate closest to `y_eff` in squared Euclidean distance;
/// ties go to the lowest index.
pub fn nearest_joint_symbol(y_eff: &[Complex64], candidates: &[Vec<Complex64>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Shape("no candidates".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, cand) in candidates.iter().enumerate() {
        if cand.len() != y_eff.len() {
            return Err(Error::Shape(format!(
                "candidate {i} has dimension {}, expected {}",
                cand.len(),
                y_eff.len()
            )));
        }
        let d: f64 = cand.iter().zip(y_eff).map(|(c, y)| (c - y).norm_sqr()).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn unit_average_energy() {
        for scheme in Scheme::ALL {
            let con = Constellation::new(scheme);
            assert_eq!(con.order(), scheme.order());
            let mean: f64 = con.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / con.order() as f64;
            assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn points_are_distinct() {
        for scheme in Scheme::ALL {
            let pts = Constellation::new(scheme).points().to_vec();
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    assert!((pts[i] - pts[j]).norm() > 1e-3);
                }
            }
        }
    }

    #[test]
    fn psk_on_unit_circle() {
        let bpsk = Constellation::new(Scheme::Bpsk);
        assert_eq!(bpsk.points(), &[c(-1.0, 0.0), c(1.0, 0.0)]);
        let qpsk = Constellation::new(Scheme::Qpsk);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for p in qpsk.points() {
            assert_abs_diff_eq!(p.norm(), 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(p.re.abs(), r, epsilon = 1e-15);
            assert_abs_diff_eq!(p.im.abs(), r, epsilon = 1e-15);
        }
    }

    #[test]
    fn qam16_grid_brute_force_energy() {
        // brute-force the {±1, ±3}^2 grid independently of square_qam
        let mut total = 0.0;
        let mut n = 0;
        for a in [-3.0f64, -1.0, 1.0, 3.0] {
            for b in [-3.0f64, -1.0, 1.0, 3.0] {
                total += (a * a + b * b) / 10.0;
                n += 1;
            }
        }
        assert_abs_diff_eq!(total / n as f64, 1.0, epsilon = 1e-12);
        let con = Constellation::new(Scheme::Qam16);
        assert_abs_diff_eq!(con.scale(), 1.0 / 10f64.sqrt(), epsilon = 1e-15);
        // documented ordering: last point is (3 + 3j)/sqrt(10)
        let last = con.joint_symbol(15, 1).unwrap().per_antenna[0];
        assert_abs_diff_eq!(last.re, 3.0 / 10f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(last.im, 3.0 / 10f64.sqrt(), epsilon = 1e-15);
        let second = con.points()[1];
        assert_abs_diff_eq!(second.re, -3.0 / 10f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(second.im, -1.0 / 10f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn joint_symbol_examples() {
        let bpsk = Constellation::new(Scheme::Bpsk);
        assert_eq!(bpsk.joint_symbol(0, 1).unwrap().per_antenna, vec![bpsk.points()[0]]);

        let qpsk = Constellation::new(Scheme::Qpsk);
        let js = qpsk.joint_symbol(5, 2).unwrap();
        let expect = qpsk.points()[1] / 2f64.sqrt();
        assert_eq!(js.per_antenna.len(), 2);
        for v in &js.per_antenna {
            assert_abs_diff_eq!((v - expect).norm(), 0.0, epsilon = 1e-15);
        }

        assert!(matches!(
            qpsk.joint_symbol(16, 2),
            Err(Error::Range { index: 16, limit: 16 })
        ));
    }

    #[test]
    fn joint_power_is_unit() {
        for scheme in Scheme::ALL {
            let con = Constellation::new(scheme);
            for n_t in 1..=2 {
                let table = con.joint_table(n_t);
                let mean: f64 = table
                    .symbols()
                    .iter()
                    .map(|s| s.iter().map(|x| x.norm_sqr()).sum::<f64>())
                    .sum::<f64>()
                    / table.len() as f64;
                assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn joint_roundtrip_all_indices() {
        for scheme in Scheme::ALL {
            let con = Constellation::new(scheme);
            for n_t in 1..=2 {
                for idx in 0..con.joint_count(n_t) {
                    let js = con.joint_symbol(idx, n_t).unwrap();
                    assert_eq!(con.joint_index(&js.per_antenna), idx);
                }
            }
        }
    }

    #[test]
    fn nearest_exact_and_ties() {
        let cands = vec![vec![c(0.0, 0.0)], vec![c(2.0, 0.0)], vec![c(5.0, 1.0)], vec![c(-1.0, 3.0)]];
        assert_eq!(nearest_joint_symbol(&[c(-1.0, 3.0)], &cands).unwrap(), 3);
        // equidistant from 0 and 1
        assert_eq!(nearest_joint_symbol(&[c(1.0, 0.0)], &cands).unwrap(), 0);
        assert!(matches!(nearest_joint_symbol(&[c(0.0, 0.0), c(0.0, 0.0)], &cands), Err(Error::Shape(_))));
        assert!(matches!(nearest_joint_symbol(&[c(0.0, 0.0)], &[]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn nearest_matches_linear_scan(
            re in -2.0f64..2.0, im in -2.0f64..2.0, re2 in -2.0f64..2.0, im2 in -2.0f64..2.0,
        ) {
            let table = Constellation::new(Scheme::Qpsk).joint_table(2);
            let y = [c(re, im), c(re2, im2)];
            // oracle: argmin with explicit distance list
            let dists: Vec<f64> = table.symbols().iter()
                .map(|s| (s[0] - y[0]).norm_sqr() + (s[1] - y[1]).norm_sqr())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let oracle = dists.iter().position(|&d| d == min).unwrap();
            prop_assert_eq!(nearest_joint_symbol(&y, table.symbols()).unwrap(), oracle);
        }

        #[test]
        fn noiseless_detection_is_exact(
            h in proptest::collection::vec(-1.0f64..1.0, 8), idx in 0usize..16,
        ) {
            let h = [[c(h[0], h[1]), c(h[2], h[3])], [c(h[4], h[5]), c(h[6], h[7])]];
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            prop_assume!(det.norm() > 1e-3);
            let table = Constellation::new(Scheme::Qpsk).joint_table(2);
            let apply = |x: &[Complex64]| vec![
                h[0][0] * x[0] + h[0][1] * x[1],
                h[1][0] * x[0] + h[1][1] * x[1],
            ];
            let cands: Vec<Vec<Complex64>> = table.symbols().iter().map(|s| apply(s)).collect();
            let y = apply(table.symbol(idx));
            prop_assert_eq!(nearest_joint_symbol(&y, &cands).unwrap(), idx);
        }
    }
}
