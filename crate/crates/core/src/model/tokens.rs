use num_complex::Complex64;

use super::ModelConfig;
use crate::error::{Error, Result};

/// Label attached to an in-context pair.
#[derive(Debug, Clone, PartialEq)]
pub enum XLabel {
    /// Joint-symbol index (pilot, ground truth, or a hard decision).
    Index(usize),
    /// Class probabilities; tokenized as the one-hot of their argmax.
    Probabilities(Vec<f64>),
}

impl XLabel {
    fn index(&self) -> usize {
        match self {
            XLabel::Index(i) => *i,
            XLabel::Probabilities(p) => super::network::argmax(p),
        }
    }
}

/// Alternating y/x tokens, always starting with a y-token. Tokens are
/// stored row-major, `width` reals each.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    width: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Token indices of the received-signal tokens.
    pub fn y_positions(&self) -> impl Iterator<Item = usize> {
        (0..self.len()).step_by(2)
    }

    pub fn n_y(&self) -> usize {
        self.len().div_ceil(2)
    }

    /// Overwrites the x-token of pair `pair` with a one-hot label.
    pub fn set_label(&mut self, pair: usize, index: usize) {
        let tok = self.token_mut(2 * pair + 1);
        tok.fill(0.0);
        tok[index] = 1.0;
    }

    /// The first `n_tokens` tokens.
    pub fn prefix(&self, n_tokens: usize) -> TokenSequence {
        TokenSequence {
            width: self.width,
            data: self.data[..n_tokens * self.width].to_vec(),
        }
    }

    /// Clean prompt `y_1, x_1, …, x_{n-1}, y_n` over the given received
    /// vectors, using `labels[t]` for every pair but the last.
    pub fn prompt(config: &ModelConfig, ys: &[Vec<Complex64>], labels: &[usize]) -> Result<Self> {
        if ys.is_empty() || labels.len() + 1 < ys.len() {
            return Err(Error::Shape(format!(
                "{} received vectors need at least {} labels, got {}",
                ys.len(),
                ys.len().saturating_sub(1),
                labels.len()
            )));
        }
        let n = ys.len();
        let pairs: Vec<(&[Complex64], XLabel)> = ys[..n - 1]
            .iter()
            .zip(labels)
            .map(|(y, &l)| (y.as_slice(), XLabel::Index(l)))
            .collect();
        tokenize(&pairs, Some(&ys[n - 1]), config)
    }
}

/// Builds the token sequence `[ỹ_1, x̃_1, …, ỹ_query]`. Received vectors
/// become `[Re(y); Im(y)]` and labels one-hot vectors, both zero-padded
/// to the model input width.
pub fn tokenize(
    pairs: &[(&[Complex64], XLabel)],
    query: Option<&[Complex64]>,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    let n_tokens = 2 * pairs.len() + usize::from(query.is_some());
    if n_tokens > config.max_tokens() {
        return Err(Error::Length {
            got: pairs.len() + usize::from(query.is_some()),
            max: config.max_pairs,
        });
    }
    let width = config.input_dim();
    let classes = config.n_classes();
    let mut data = vec![0.0; n_tokens * width];
    let mut write_y = |slot: usize, y: &[Complex64]| -> Result<()> {
        if y.len() != config.n_r {
            return Err(Error::Shape(format!(
                "received vector has {} entries, model expects {}",
                y.len(),
                config.n_r
            )));
        }
        let tok = &mut data[slot * width..(slot + 1) * width];
        for (r, v) in y.iter().enumerate() {
            tok[r] = v.re;
            tok[config.n_r + r] = v.im;
        }
        Ok(())
    };
    for (p, (y, _)) in pairs.iter().enumerate() {
        write_y(2 * p, y)?;
    }
    if let Some(q) = query {
        write_y(2 * pairs.len(), q)?;
    }
    for (p, (_, label)) in pairs.iter().enumerate() {
        if let XLabel::Probabilities(probs) = label {
            if probs.len() != classes {
                return Err(Error::Shape(format!(
                    "probability vector has {} entries, expected {classes}",
                    probs.len()
                )));
            }
        }
        let idx = label.index();
        if idx >= classes {
            return Err(Error::Range { index: idx, limit: classes });
        }
        data[(2 * p + 1) * width + idx] = 1.0;
    }
    Ok(TokenSequence { width, data })
}
