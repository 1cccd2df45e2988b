//! Decoder-only transformer detector: configuration, parameters,
//! tokenization, forward/backward passes and checkpoints.

mod checkpoint;
mod network;
mod tokens;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingStage};
pub use network::{
    forward, forward_batch, loss_and_grads, masked_loss, predict, IncrementalDecoder, LabeledSequence, Logits, Prediction,
};
pub(crate) use network::argmax;
pub use tokens::{tokenize, TokenSequence, XLabel};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::channel::MAX_FRAME_LEN;
use crate::constellation::Scheme;
use crate::error::{Error, Result};

/// Architecture and system dimensions of a detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub scheme: Scheme,
    pub n_t: usize,
    pub n_r: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest prompt in (y, x) pairs.
    pub max_pairs: usize,
}

impl ModelConfig {
    /// The full-size detector: d_e = 64, 8 layers, 8 heads, 4× FFN.
    pub fn new(scheme: Scheme, n_t: usize, n_r: usize) -> Self {
        Self {
            scheme,
            n_t,
            n_r,
            d_model: 64,
            n_layers: 8,
            n_heads: 8,
            d_ff: 256,
            max_pairs: MAX_FRAME_LEN,
        }
    }

    /// Same system, different network size; `d_ff` follows as 4·`d_model`.
    pub fn with_size(mut self, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_layers = n_layers;
        self.n_heads = n_heads;
        self.d_ff = 4 * d_model;
        self
    }

    pub fn n_classes(&self) -> usize {
        self.scheme.order().pow(self.n_t as u32)
    }

    /// Token width: max(2·N_r, C^N_t).
    pub fn input_dim(&self) -> usize {
        (2 * self.n_r).max(self.n_classes())
    }

    pub fn max_tokens(&self) -> usize {
        2 * self.max_pairs
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_pairs == 0 {
            return Err(Error::Config("d_ff and max_pairs must be positive".into()));
        }
        if self.n_classes() > 4096 {
            return Err(Error::Config(format!("{} classes is too many", self.n_classes())));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Shape and storage offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Flat storage layout, in checkpoint order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
    pub total: usize,
    pub tensors: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let mut tensors = Vec::new();
        let mut cursor = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset });
            offset
        };
        let embed = push("embed".into(), vec![d, cfg.input_dim()]);
        let pos = push("pos".into(), vec![cfg.max_tokens(), d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: push(format!("layer{l}.ln1.scale"), vec![d]),
                ln1_b: push(format!("layer{l}.ln1.bias"), vec![d]),
                wq: push(format!("layer{l}.attn.wq"), vec![d, d]),
                wk: push(format!("layer{l}.attn.wk"), vec![d, d]),
                wv: push(format!("layer{l}.attn.wv"), vec![d, d]),
                wo: push(format!("layer{l}.attn.wo"), vec![d, d]),
                ln2_g: push(format!("layer{l}.ln2.scale"), vec![d]),
                ln2_b: push(format!("layer{l}.ln2.bias"), vec![d]),
                w1: push(format!("layer{l}.ffn.w1"), vec![d, f]),
                b1: push(format!("layer{l}.ffn.b1"), vec![f]),
                w2: push(format!("layer{l}.ffn.w2"), vec![f, d]),
                b2: push(format!("layer{l}.ffn.b2"), vec![d]),
            })
            .collect();
        let lnf_g = push("final_ln.scale".into(), vec![d]);
        let lnf_b = push("final_ln.bias".into(), vec![d]);
        let head = push("head".into(), vec![cfg.n_classes(), d]);
        Self {
            embed,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head,
            total: cursor,
            tensors,
        }
    }
}

/// All learnable tensors of a detector, stored flat in [`TransformerParams::tensors`] order.
///
/// Gradients use the same type.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl PartialEq for TransformerParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl TransformerParams {
    /// GPT-2 style initialization: N(0, 0.02²) weights, zero biases, unit norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = params.layout.clone();
        for t in &layout.tensors {
            let slice = &mut params.data[t.offset..t.offset + t.len()];
            if t.name.ends_with(".scale") {
                slice.fill(1.0);
            } else if t.shape.len() == 2 {
                for v in slice.iter_mut() {
                    *v = 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(params)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![0.0; layout.total];
        Ok(Self { config, layout, data })
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.offset..t.offset + t.len()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive FNV-1a digest of the raw bits.
    pub fn checksum(&self) -> u64 {
        self.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
        })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.data[offset..offset + len]
    }

    #[cfg(test)]
    pub(crate) fn slice_mut(&mut self, offset: usize, len: usize) -> &mut [f64] {
        &mut self.data[offset..offset + len]
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &TransformerParams, alpha: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }
}
