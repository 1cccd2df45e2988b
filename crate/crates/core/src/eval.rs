//! Symbol-error-rate curves for every detector, on shared frames.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{mlsd_default_cap, mlsd_detect, mmse_df_detect, mmse_pilot_detect};
use crate::channel::{mix_seed, Fading, Frame, FrameSpec, SnrRange, MAX_FRAME_LEN};
use crate::constellation::{Constellation, Scheme};
use crate::error::{Error, Result};
use crate::model::{forward_batch, TransformerParams};
use crate::training::{feedback_decisions, icl_batch};

const EVAL_DOMAIN: u64 = 0x6576_616c;
const FRAME_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    MmsePk,
    MmseDf,
    Mlsd,
    IclIcl,
    IclDf,
    DefinedDf,
    DefinedIcl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::MmsePk,
        Method::MmseDf,
        Method::Mlsd,
        Method::IclIcl,
        Method::IclDf,
        Method::DefinedDf,
        Method::DefinedIcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MmsePk => "mmse-pk",
            Method::MmseDf => "mmse-df",
            Method::Mlsd => "mlsd",
            Method::IclIcl => "icl-icl",
            Method::IclDf => "icl-df",
            Method::DefinedDf => "defined-df",
            Method::DefinedIcl => "defined-icl",
        }
    }

    /// Whether detections are fed back into the context.
    pub fn uses_feedback(self) -> bool {
        matches!(self, Method::MmseDf | Method::IclDf | Method::DefinedDf)
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::IclIcl | Method::IclDf | Method::DefinedDf | Method::DefinedIcl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "mmse" => Ok(Method::MmsePk),
            "icl" => Ok(Method::IclIcl),
            "defined" => Ok(Method::DefinedDf),
            other => Method::ALL
                .into_iter()
                .find(|m| m.name() == other)
                .ok_or_else(|| Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub method: Method,
    pub scheme: Scheme,
    pub n_t: usize,
    pub n_r: usize,
    pub fading: Fading,
    pub snr_db: f64,
    /// Pilot count.
    pub k: usize,
    /// Frame length.
    pub t: usize,
    pub n_prompts: usize,
    pub seed: u64,
    /// Longest MLSD block; defaults per constellation.
    pub mlsd_cap: Option<usize>,
}

impl EvalConfig {
    pub fn new(method: Method, scheme: Scheme) -> Self {
        Self {
            method,
            scheme,
            n_t: 1,
            n_r: 1,
            fading: Fading::Rayleigh,
            snr_db: 20.0,
            k: 1,
            t: MAX_FRAME_LEN,
            n_prompts: 8000,
            seed: 0,
            mlsd_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return Err(Error::Config("need at least one prompt".into()));
        }
        if self.t < 2 || self.t > MAX_FRAME_LEN {
            return Err(Error::Config(format!("T must lie in [2, {MAX_FRAME_LEN}], got {}", self.t)));
        }
        if self.k == 0 || self.k >= self.t {
            return Err(Error::Config(format!(
                "pilot count must satisfy 1 <= k < T, got k={}, T={}",
                self.k, self.t
            )));
        }
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("SNR must be finite".into()));
        }
        if self.method == Method::Mlsd {
            if !self.scheme.is_psk() {
                return Err(Error::Unsupported(format!("MLSD needs a PSK constellation, not {}", self.scheme)));
            }
            if self.n_t != 1 || self.n_r != 1 {
                return Err(Error::Unsupported("MLSD is implemented for SISO links only".into()));
            }
        }
        Ok(())
    }

    fn frame_spec(&self) -> FrameSpec {
        FrameSpec {
            scheme: self.scheme,
            n_t: self.n_t,
            n_r: self.n_r,
            fading: self.fading,
            snr: SnrRange::fixed(self.snr_db),
            len: self.t,
            pilots: self.k,
        }
    }

    /// Test frame `i`; every method evaluated under the same seed sees the same frames.
    pub fn frame(&self, i: usize) -> Result<Frame> {
        let con = Constellation::new(self.scheme);
        self.frame_spec().frame(&con, mix_seed(self.seed, EVAL_DOMAIN), i as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Context length (feedback methods) or pilot count.
    pub length: usize,
    pub ser: f64,
    pub stderr: f64,
}

impl CurvePoint {
    fn from_counts(length: usize, errors: u64, trials: u64) -> Self {
        let p = errors as f64 / trials as f64;
        Self {
            length,
            ser: p,
            stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub gain_df: Option<f64>,
    /// MLSD lengths skipped by the complexity guard.
    pub omitted: Vec<usize>,
}

impl EvalCurve {
    fn new(points: Vec<CurvePoint>, k: usize, t: usize) -> Self {
        let gain = gain_df(&points, k, t);
        Self {
            points,
            gain_df: gain,
            omitted: Vec::new(),
        }
    }

    pub fn point(&self, length: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.length == length)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,ser,stderr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.length, p.ser, p.stderr));
        }
        match self.gain_df {
            Some(g) => s.push_str(&format!("gain_df,{g},\n")),
            None => s.push_str("gain_df,NA,\n"),
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Config(format!("malformed curve line '{line}'"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("length,ser,stderr") {
            return Err(Error::Config("curve CSV must start with 'length,ser,stderr'".into()));
        }
        let mut points = Vec::new();
        let mut gain = None;
        for line in lines {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols[0] == "gain_df" {
                let v = cols.get(1).ok_or_else(|| bad(line))?;
                gain = if *v == "NA" {
                    None
                } else {
                    Some(v.parse().map_err(|_| bad(line))?)
                };
                continue;
            }
            if cols.len() != 3 {
                return Err(bad(line));
            }
            points.push(CurvePoint {
                length: cols[0].parse().map_err(|_| bad(line))?,
                ser: cols[1].parse().map_err(|_| bad(line))?,
                stderr: cols[2].parse().map_err(|_| bad(line))?,
            });
        }
        Ok(Self {
            points,
            gain_df: gain,
            omitted: Vec::new(),
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

/// Percentage SER reduction from length `k` to length `t - 1`. Absent
/// when either point is missing or the SER at `k` is zero.
pub fn gain_df(points: &[CurvePoint], k: usize, t: usize) -> Option<f64> {
    let at = |l: usize| points.iter().find(|p| p.length == l).map(|p| p.ser);
    let first = at(k)?;
    let last = at(t.checked_sub(1)?)?;
    if first == 0.0 {
        return None;
    }
    Some((first - last) / first * 100.0)
}

/// Per-length error counts over all frames, computed chunk-parallel and
/// summed in chunk order.
fn count_errors<F>(cfg: &EvalConfig, n_lengths: usize, chunk_errors: F) -> Result<Vec<u64>>
where
    F: Fn(&[Frame]) -> Result<Vec<u64>> + Sync,
{
    let starts: Vec<usize> = (0..cfg.n_prompts).step_by(FRAME_CHUNK).collect();
    let parts: Vec<Result<Vec<u64>>> = starts
        .par_iter()
        .map(|&s| {
            let frames = (s..(s + FRAME_CHUNK).min(cfg.n_prompts))
                .map(|i| cfg.frame(i))
                .collect::<Result<Vec<_>>>()?;
            chunk_errors(&frames)
        })
        .collect();
    let mut total = vec![0u64; n_lengths];
    for p in parts {
        for (t, e) in total.iter_mut().zip(p?) {
            *t += e;
        }
    }
    Ok(total)
}

/// Evaluates one method. Model methods need `model`, whose system
/// dimensions must match the configuration.
pub fn run_eval(cfg: &EvalConfig, model: Option<&TransformerParams>) -> Result<EvalCurve> {
    cfg.validate()?;
    if cfg.method == Method::Mlsd {
        return run_mlsd_eval(cfg);
    }
    let params = if cfg.method.needs_model() {
        let p = model.ok_or_else(|| Error::Config(format!("method {} needs a checkpoint", cfg.method)))?;
        let mc = p.config();
        if mc.scheme != cfg.scheme || mc.n_t != cfg.n_t || mc.n_r != cfg.n_r {
            return Err(Error::Config(format!(
                "checkpoint is for {} {}x{}, evaluation asks for {} {}x{}",
                mc.scheme, mc.n_r, mc.n_t, cfg.scheme, cfg.n_r, cfg.n_t
            )));
        }
        if cfg.t > mc.max_pairs {
            return Err(Error::Length {
                got: cfg.t,
                max: mc.max_pairs,
            });
        }
        Some(p)
    } else {
        None
    };
    let table = Constellation::new(cfg.scheme).joint_table(cfg.n_t);
    let (k, t) = (cfg.k, cfg.t);
    let n = t - k;
    let errors = count_errors(cfg, n, |frames| {
        let mut errs = vec![0u64; n];
        match cfg.method {
            Method::MmsePk => {
                for f in frames {
                    for m in k..t {
                        errs[m - k] += u64::from(mmse_pilot_detect(f, &table, m)? != f.x_indices[m]);
                    }
                }
            }
            Method::MmseDf => {
                for f in frames {
                    for (i, d) in mmse_df_detect(f, &table)?.into_iter().enumerate() {
                        errs[i] += u64::from(d != f.x_indices[k + i]);
                    }
                }
            }
            Method::IclDf | Method::DefinedDf => {
                let decisions = feedback_decisions(params.unwrap(), frames, k, false)?;
                for (f, ds) in frames.iter().zip(decisions) {
                    for (i, d) in ds.into_iter().enumerate() {
                        errs[i] += u64::from(d != f.x_indices[k + i]);
                    }
                }
            }
            Method::IclIcl | Method::DefinedIcl => {
                let p = params.unwrap();
                let seqs: Vec<_> = icl_batch(p.config(), frames)?.into_iter().map(|s| s.tokens).collect();
                for (f, logits) in frames.iter().zip(forward_batch(p, &seqs)?) {
                    for m in k..t {
                        errs[m - k] += u64::from(logits.argmax(m) != f.x_indices[m]);
                    }
                }
            }
            Method::Mlsd => unreachable!(),
        }
        Ok(errs)
    })?;
    let trials = cfg.n_prompts as u64;
    let points = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| CurvePoint::from_counts(k + i, e, trials))
        .collect();
    Ok(EvalCurve::new(points, k, t))
}

/// Exhaustive MLSD for block lengths 2..=T with the first symbol known,
/// on the evaluation frames cut to each length. The point for block
/// length `T'` sits at context length `T' - 1`.
pub fn run_mlsd_eval(cfg: &EvalConfig) -> Result<EvalCurve> {
    cfg.validate()?;
    if cfg.method != Method::Mlsd {
        return Err(Error::Config(format!("run_mlsd_eval called for {}", cfg.method)));
    }
    let con = Constellation::new(cfg.scheme);
    let cap = cfg.mlsd_cap.unwrap_or_else(|| mlsd_default_cap(&con)).min(cfg.t);
    let lens: Vec<usize> = (2..=cap).collect();
    let omitted: Vec<usize> = (cap + 1..=cfg.t).map(|l| l - 1).collect();
    if !omitted.is_empty() {
        log::warn!(
            "MLSD: block lengths {}..={} exceed the search cap {cap} and are omitted",
            cap + 1,
            cfg.t
        );
    }
    let errors = count_errors(cfg, lens.len(), |frames| {
        let mut errs = vec![0u64; lens.len()];
        for f in frames {
            for (i, &len) in lens.iter().enumerate() {
                let y: Vec<_> = f.y[..len].iter().map(|v| v[0]).collect();
                let s = mlsd_detect(&y, f.task.sigma2, &con, f.x_indices[0], cap)?;
                errs[i] += s[1..].iter().zip(&f.x_indices[1..len]).filter(|(a, b)| a != b).count() as u64;
            }
        }
        Ok(errs)
    })?;
    let points: Vec<CurvePoint> = lens
        .iter()
        .zip(&errors)
        .map(|(&len, &e)| CurvePoint::from_counts(len - 1, e, (cfg.n_prompts * (len - 1)) as u64))
        .collect();
    let mut curve = EvalCurve::new(points, cfg.k, cfg.t);
    curve.omitted = omitted;
    Ok(curve)
}

/// Joins curves into one wide table keyed by length; missing cells are empty.
pub fn compare_csv(curves: &[(String, EvalCurve)]) -> String {
    let mut rows: BTreeMap<usize, Vec<Option<CurvePoint>>> = BTreeMap::new();
    for (i, (_, c)) in curves.iter().enumerate() {
        for p in &c.points {
            rows.entry(p.length).or_insert_with(|| vec![None; curves.len()])[i] = Some(*p);
        }
    }
    let mut s = String::from("length");
    for (name, _) in curves {
        s.push_str(&format!(",{name}_ser,{name}_stderr"));
    }
    s.push('\n');
    for (len, cells) in rows {
        s.push_str(&len.to_string());
        for c in cells {
            match c {
                Some(p) => s.push_str(&format!(",{},{}", p.ser, p.stderr)),
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s.push_str("gain_df");
    for (_, c) in curves {
        match c.gain_df {
            Some(g) => s.push_str(&format!(",{g},")),
            None => s.push_str(",NA,"),
        }
    }
    s.push('\n');
    s
}
