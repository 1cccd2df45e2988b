//! Two-phase training: supervised in-context training on clean prompts,
//! then fine-tuning on prompts whose labels are the model's own decisions.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{mix_seed, Fading, Frame, FrameSpec, SnrRange};
use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::model::{argmax, loss_and_grads, IncrementalDecoder, masked_loss, LabeledSequence, ModelConfig, TokenSequence, TransformerParams};

const TRAIN_DOMAIN: u64 = 0x7472_6169_6e00;
const DF_K_DOMAIN: u64 = 0x6466_6b00;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" | "icl" => Ok(Phase::Pretrain),
            "finetune" | "df" => Ok(Phase::Finetune),
            other => Err(Error::Config(format!("unknown phase '{other}'"))),
        }
    }
}

/// Context-length schedule for pre-training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curriculum {
    pub enabled: bool,
    pub t_start: usize,
    pub t_step: usize,
    pub epochs_per_stage: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            enabled: true,
            t_start: 11,
            t_step: 5,
            epochs_per_stage: 2,
        }
    }
}

impl Curriculum {
    /// Frame length used during `epoch` when the target length is `t_max`.
    pub fn length_at(&self, epoch: usize, t_max: usize) -> usize {
        if !self.enabled {
            return t_max;
        }
        let stages = epoch / self.epochs_per_stage.max(1);
        (self.t_start + stages * self.t_step).min(t_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 500,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.cfg.warmup == 0 || step >= self.cfg.warmup {
            self.cfg.lr
        } else {
            self.cfg.lr * (step + 1) as f64 / self.cfg.warmup as f64
        }
    }

    /// One update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut TransformerParams, grad: &TransformerParams) -> f64 {
        let g = grad.as_slice();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.learning_rate(self.t);
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, &gi), m), v) in params.as_mut_slice().iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            let gi = gi * clip;
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub fading: Fading,
    pub snr: SnrRange,
    /// Weight of the decision-feedback loss during fine-tuning.
    pub alpha: f64,
    pub batch_size: usize,
    /// Frame length in (y, x) pairs.
    pub t: usize,
    /// Pilot counts for decision-feedback prompts, one drawn per batch.
    pub k_df: Vec<usize>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub epoch_steps: usize,
    pub adam: AdamConfig,
    pub curriculum: Curriculum,
    /// Steps between refreshes of the parameters that generate feedback; 1 = every step.
    pub df_refresh: usize,
    /// Stop pre-training once an epoch improves the mean loss by less than this fraction.
    pub plateau_tol: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            snr: SnrRange::training_default(model.scheme),
            model,
            fading: Fading::Rayleigh,
            alpha: 0.7,
            batch_size: 512,
            t: model.max_pairs,
            k_df: vec![1, 2, 3, 4],
            pretrain_steps: 20_000,
            finetune_steps: 5_000,
            epoch_steps: 1000,
            adam: AdamConfig::default(),
            curriculum: Curriculum::default(),
            df_refresh: 1,
            plateau_tol: Some(0.01),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.t < 2 || self.t > self.model.max_pairs {
            return Err(Error::Config(format!(
                "T must lie in [2, {}], got {}",
                self.model.max_pairs, self.t
            )));
        }
        if self.curriculum.enabled && (self.curriculum.t_start < 2 || self.curriculum.t_start > self.t) {
            return Err(Error::Config(format!(
                "curriculum start {} must lie in [2, T={}]",
                self.curriculum.t_start, self.t
            )));
        }
        if self.k_df.is_empty() || self.k_df.iter().any(|&k| k == 0 || k >= self.t) {
            return Err(Error::Config(format!("feedback pilot counts {:?} must satisfy 1 <= k < T", self.k_df)));
        }
        if self.batch_size == 0 || self.epoch_steps == 0 || self.df_refresh == 0 {
            return Err(Error::Config("batch size, epoch length and refresh interval must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn frame_spec(&self, len: usize, pilots: usize) -> FrameSpec {
        FrameSpec {
            scheme: self.model.scheme,
            n_t: self.model.n_t,
            n_r: self.model.n_r,
            fading: self.fading,
            snr: self.snr,
            len,
            pilots,
        }
    }

    /// The training frames of global step `step`.
    pub fn frames(&self, step: usize, len: usize, pilots: usize) -> Result<Vec<Frame>> {
        let con = Constellation::new(self.model.scheme);
        let spec = self.frame_spec(len, pilots);
        let seed = mix_seed(self.seed, TRAIN_DOMAIN ^ step as u64);
        (0..self.batch_size as u64)
            .into_par_iter()
            .map(|i| spec.frame(&con, seed, i))
            .collect()
    }

    fn draw_k(&self, step: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, DF_K_DOMAIN ^ step as u64));
        self.k_df[rng.random_range(0..self.k_df.len())]
    }
}

/// Clean prompts over whole frames, every y-position supervised.
pub fn icl_batch(config: &ModelConfig, frames: &[Frame]) -> Result<Vec<LabeledSequence>> {
    frames
        .iter()
        .map(|f| {
            Ok(LabeledSequence {
                tokens: TokenSequence::prompt(config, &f.y, &f.x_indices)?,
                targets: f.x_indices.clone(),
                mask: vec![true; f.len()],
            })
        })
        .collect()
}

/// Mean cross-entropy over every position of clean prompts.
pub fn icl_loss(params: &TransformerParams, frames: &[Frame]) -> Result<f64> {
    masked_loss(params, &icl_batch(params.config(), frames)?)
}

/// Builds decision-feedback prompts: the first `k` labels are the pilots,
/// each later label is the argmax decision of `params` given the prompt so
/// far. Targets stay the transmitted symbols; only positions after the
/// pilots are supervised.
pub fn generate_df_prompts(params: &TransformerParams, frames: &[Frame], k: usize) -> Result<Vec<LabeledSequence>> {
    let cfg = params.config();
    let mut seqs: Vec<LabeledSequence> = icl_batch(cfg, frames)?;
    for s in seqs.iter_mut() {
        for (t, m) in s.mask.iter_mut().enumerate() {
            *m = t >= k;
        }
    }
    feedback_in_place(params, &mut seqs, k, false)?;
    Ok(seqs)
}

/// Decision-feedback detection with the model: after the `k` pilots each
/// slot is decided from the prompt so far and the decision becomes its
/// label. With `oracle` the true label is fed back instead. Returns the
/// decisions for slots `k..T` of every frame.
pub fn feedback_decisions(
    params: &TransformerParams,
    frames: &[Frame],
    k: usize,
    oracle: bool,
) -> Result<Vec<Vec<usize>>> {
    let mut seqs = icl_batch(params.config(), frames)?;
    feedback_in_place(params, &mut seqs, k, oracle)
}

fn feedback_in_place(
    params: &TransformerParams,
    seqs: &mut [LabeledSequence],
    k: usize,
    oracle: bool,
) -> Result<Vec<Vec<usize>>> {
    let parts: Vec<Result<Vec<Vec<usize>>>> = seqs
        .par_chunks_mut(16)
        .map(|chunk| feedback_chunk(params, chunk, k, oracle))
        .collect();
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn feedback_chunk(
    params: &TransformerParams,
    chunk: &mut [LabeledSequence],
    k: usize,
    oracle: bool,
) -> Result<Vec<Vec<usize>>> {
    let len = chunk[0].targets.len();
    if chunk.iter().any(|s| s.targets.len() != len) {
        return Err(Error::Shape("feedback prompts need frames of equal length".into()));
    }
    if k == 0 || k >= len {
        return Err(Error::Config(format!("pilot count must satisfy 1 <= k < T, got k={k}, T={len}")));
    }
    let width = params.config().input_dim();
    let mut dec = IncrementalDecoder::new(params, chunk.len());
    let mut decisions = vec![Vec::with_capacity(len - k); chunk.len()];
    let mut consumed = 0;
    for t in k..len {
        // feed everything up to and including y-token t, then decide x_t
        let upto = 2 * t + 1;
        let new: Vec<&[f64]> = chunk
            .iter()
            .map(|s| &s.tokens.as_slice()[consumed * width..upto * width])
            .collect();
        let logits = dec.extend(&new)?;
        consumed = upto;
        for ((s, l), out) in chunk.iter_mut().zip(&logits).zip(decisions.iter_mut()) {
            let d = argmax(l);
            out.push(d);
            if t + 1 < len && !oracle {
                s.tokens.set_label(t, d);
            }
        }
    }
    Ok(decisions)
}

fn check_df_mask(batch: &[LabeledSequence], k: usize) -> Result<()> {
    for s in batch {
        if s.mask.iter().enumerate().any(|(t, &m)| m != (t >= k)) {
            return Err(Error::Shape(format!("loss mask does not match pilot count {k}")));
        }
    }
    Ok(())
}

/// Mean cross-entropy over the positions after the `k` pilots.
pub fn df_loss(params: &TransformerParams, batch: &[LabeledSequence], k: usize) -> Result<f64> {
    check_df_mask(batch, k)?;
    masked_loss(params, batch)
}

/// `alpha · df + (1 − alpha) · icl`.
pub fn finetune_loss(
    params: &TransformerParams,
    clean: &[LabeledSequence],
    df: &[LabeledSequence],
    alpha: f64,
) -> Result<f64> {
    Ok(alpha * masked_loss(params, df)? + (1.0 - alpha) * masked_loss(params, clean)?)
}

/// Loss and gradient of [`finetune_loss`].
pub fn finetune_loss_and_grads(
    params: &TransformerParams,
    clean: &[LabeledSequence],
    df: &[LabeledSequence],
    alpha: f64,
) -> Result<(f64, TransformerParams)> {
    let (l_df, mut g) = loss_and_grads(params, df)?;
    let (l_icl, g_icl) = loss_and_grads(params, clean)?;
    g.scale(alpha);
    g.add_scaled(&g_icl, 1.0 - alpha);
    Ok((alpha * l_df + (1.0 - alpha) * l_icl, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,phase,loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, r.phase, r.loss));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn extend(&mut self, other: LossTrace) {
        self.rows.extend(other.rows);
    }

    /// First step whose loss is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.loss < threshold).map(|r| r.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Pre-training stopped on a loss plateau.
    Plateau { step: usize },
    Diverged { step: usize, loss: f64 },
}

pub struct TrainOutcome {
    /// Last finite parameters.
    pub params: TransformerParams,
    pub trace: LossTrace,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

/// Runs one phase starting from `params`. Trace steps are numbered from
/// `first_step`, so consecutive phases give one continuous trace.
pub fn train(
    config: &TrainConfig,
    phase: Phase,
    mut params: TransformerParams,
    first_step: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if params.config() != &config.model {
        return Err(Error::Config("initial parameters do not match the model configuration".into()));
    }
    let mut adam = Adam::new(config.adam, params.len());
    let mut trace = LossTrace::default();
    let budget = match phase {
        Phase::Pretrain => config.pretrain_steps,
        Phase::Finetune => config.finetune_steps,
    };
    let uniform = (config.model.n_classes() as f64).ln();
    let mut snapshot = params.clone();
    let mut epoch_sum = 0.0;
    let mut prev_epoch: Option<f64> = None;

    for i in 0..budget {
        let step = first_step + i;
        let result = match phase {
            Phase::Pretrain => {
                let len = config.curriculum.length_at(i / config.epoch_steps, config.t);
                let frames = config.frames(step, len, 1)?;
                loss_and_grads(&params, &icl_batch(&config.model, &frames)?)
            }
            Phase::Finetune => {
                let k = config.draw_k(step);
                let frames = config.frames(step, config.t, k)?;
                if i % config.df_refresh == 0 {
                    snapshot = params.clone();
                }
                let df = generate_df_prompts(&snapshot, &frames, k)?;
                let clean = icl_batch(&config.model, &frames)?;
                finetune_loss_and_grads(&params, &clean, &df, config.alpha)
            }
        };
        let (loss, grad) = match result {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => {
                return Ok(diverged(params, trace, step, f64::NAN));
            }
            Err(e) => return Err(e),
        };
        trace.rows.push(TraceRow { step, phase, loss });
        if !loss.is_finite() || !grad.is_finite() {
            return Ok(diverged(params, trace, step, loss));
        }
        let before = params.clone();
        adam.step(&mut params, &grad);
        if !params.is_finite() {
            return Ok(diverged(before, trace, step, loss));
        }
        if i % 100 == 0 {
            log::info!("{phase} step {step}: loss {loss:.5}");
        }

        epoch_sum += loss;
        if (i + 1) % config.epoch_steps == 0 {
            let mean = epoch_sum / config.epoch_steps as f64;
            epoch_sum = 0.0;
            let at_full_length = config.curriculum.length_at(i / config.epoch_steps, config.t) == config.t;
            if let (Phase::Pretrain, Some(tol), Some(prev)) = (phase, config.plateau_tol, prev_epoch) {
                // the initial lull is flat too; only stop once past it
                if at_full_length && mean < 0.9 * uniform && (prev - mean) / prev < tol {
                    return Ok(TrainOutcome {
                        params,
                        trace,
                        status: TrainStatus::Plateau { step },
                    });
                }
            }
            prev_epoch = Some(mean);
        }
    }
    Ok(TrainOutcome {
        params,
        trace,
        status: TrainStatus::Completed,
    })
}

fn diverged(params: TransformerParams, trace: LossTrace, step: usize, loss: f64) -> TrainOutcome {
    log::warn!("training diverged at step {step} (loss {loss})");
    TrainOutcome {
        params,
        trace,
        status: TrainStatus::Diverged { step, loss },
    }
}
