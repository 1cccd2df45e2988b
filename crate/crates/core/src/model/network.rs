//! Pre-norm decoder forward pass, masked cross-entropy and its exact
//! gradient.
//!
//! Sequences of a batch are packed row-wise into one activation matrix so
//! the dense layers run as single matrix products; attention is evaluated
//! per sequence and head and only ever reads rows at or before the query
//! row. Large batches are cut into fixed-size chunks whose gradients are
//! summed in chunk order, so results do not depend on the thread count.

use num_complex::Complex64;
use rayon::prelude::*;

use super::tokens::{tokenize, TokenSequence, XLabel};
use super::{Layout, ModelConfig, TransformerParams};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const CHUNK: usize = 16;

/// A prompt with a target class and a loss-mask flag per y-position.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub tokens: TokenSequence,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl LabeledSequence {
    fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Class scores, one row per y-position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    n_classes: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn rows(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_classes..(t + 1) * self.n_classes]
    }

    pub fn probabilities(&self, t: usize) -> Vec<f64> {
        softmax(self.row(t))
    }

    /// Most likely class at y-position `t`; ties go to the lowest index.
    pub fn argmax(&self, t: usize) -> usize {
        argmax(self.row(t))
    }

    pub fn last_argmax(&self) -> usize {
        self.argmax(self.rows() - 1)
    }
}

/// Detector output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub index: usize,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `c = op(a)·op(b)` (or `c +=` when `accumulate`), all row-major;
/// `a_t`/`b_t` read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds checked above; strides describe the row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(dy: &[f64], width: usize, out: &mut [f64]) {
    for row in dy.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64], out: &mut [f64]) -> LnCache {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (xr[j] - mean) * rs;
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates into `dx`, `dg`, `db`.
fn layer_norm_backward(dy: &[f64], cache: &LnCache, g: &[f64], d: usize, dx: &mut [f64], dg: &mut [f64], db: &mut [f64]) {
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// Row bookkeeping for a packed chunk of sequences.
struct Packing {
    starts: Vec<usize>,
    lens: Vec<usize>,
    prob_offsets: Vec<usize>,
    rows: usize,
    y_rows: Vec<usize>,
}

impl Packing {
    fn new(seqs: &[&TokenSequence], n_heads: usize) -> Self {
        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut prob_offsets = Vec::with_capacity(seqs.len());
        let mut y_rows = Vec::new();
        let mut rows = 0;
        let mut probs = 0;
        for s in seqs {
            starts.push(rows);
            lens.push(s.len());
            prob_offsets.push(probs);
            y_rows.extend(s.y_positions().map(|p| rows + p));
            rows += s.len();
            probs += n_heads * s.len() * s.len();
        }
        prob_offsets.push(probs);
        Self {
            starts,
            lens,
            prob_offsets,
            rows,
            y_rows,
        }
    }
}

struct LayerCache {
    ln1: LnCache,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    a2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    packing: Packing,
    tokens: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    z: Vec<f64>,
}

fn check_finite(x: &[f64], layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer })
    }
}

fn attention_forward(cfg: &ModelConfig, pk: &Packing, q: &[f64], k: &[f64], v: &[f64], probs: &mut [f64], ctx: &mut [f64]) {
    let d = cfg.d_model;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    ctx.fill(0.0);
    for (s, (&base, &n)) in pk.starts.iter().zip(&pk.lens).enumerate() {
        for h in 0..cfg.n_heads {
            let col = h * dk;
            let p = &mut probs[pk.prob_offsets[s] + h * n * n..pk.prob_offsets[s] + (h + 1) * n * n];
            for i in 0..n {
                let qi = &q[(base + i) * d + col..(base + i) * d + col + dk];
                let row = &mut p[i * n..i * n + n];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(base + j) * d + col..(base + j) * d + col + dk];
                    let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = sc;
                    mx = mx.max(sc);
                }
                let mut sum = 0.0;
                for r in row[..=i].iter_mut() {
                    *r = (*r - mx).exp();
                    sum += *r;
                }
                let inv = 1.0 / sum;
                for r in row[..=i].iter_mut() {
                    *r *= inv;
                }
                let out = &mut ctx[(base + i) * d + col..(base + i) * d + col + dk];
                for j in 0..=i {
                    let w = row[j];
                    let vj = &v[(base + j) * d + col..(base + j) * d + col + dk];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    cfg: &ModelConfig,
    pk: &Packing,
    cache: &LayerCache,
    dctx: &[f64],
    dq: &mut [f64],
    dk_out: &mut [f64],
    dv: &mut [f64],
) {
    let d = cfg.d_model;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dp = Vec::new();
    for (s, (&base, &n)) in pk.starts.iter().zip(&pk.lens).enumerate() {
        dp.resize(n, 0.0);
        for h in 0..cfg.n_heads {
            let col = h * dk;
            let p = &cache.probs[pk.prob_offsets[s] + h * n * n..pk.prob_offsets[s] + (h + 1) * n * n];
            for i in 0..n {
                let row = &p[i * n..i * n + n];
                let dci = &dctx[(base + i) * d + col..(base + i) * d + col + dk];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vj = &v[(base + j) * d + col..(base + j) * d + col + dk];
                    dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += row[j] * dp[j];
                    let dvj = &mut dv[(base + j) * d + col..(base + j) * d + col + dk];
                    for (o, g) in dvj.iter_mut().zip(dci) {
                        *o += row[j] * g;
                    }
                }
                let qi_off = (base + i) * d + col;
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = (base + j) * d + col;
                    for c in 0..dk {
                        dq[qi_off + c] += ds * k[kj_off + c];
                        dk_out[kj_off + c] += ds * q[qi_off + c];
                    }
                }
            }
        }
    }
}

fn forward_chunk(params: &TransformerParams, seqs: &[&TokenSequence]) -> Result<(Vec<f64>, Cache)> {
    let cfg = *params.config();
    let lay: &Layout = params.layout();
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let width = cfg.input_dim();
    for s in seqs {
        if s.width() != width {
            return Err(Error::Shape(format!("token width {} but model expects {width}", s.width())));
        }
        if s.len() > cfg.max_tokens() {
            return Err(Error::Length {
                got: s.len().div_ceil(2),
                max: cfg.max_pairs,
            });
        }
        if s.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
    }
    let pk = Packing::new(seqs, cfg.n_heads);
    let rows = pk.rows;

    let mut tokens = Vec::with_capacity(rows * width);
    for s in seqs {
        tokens.extend_from_slice(s.as_slice());
    }
    let mut x = vec![0.0; rows * d];
    gemm(rows, width, d, &tokens, false, params.slice(lay.embed, d * width), true, &mut x, false);
    let pos = params.slice(lay.pos, cfg.max_tokens() * d);
    for (&base, &n) in pk.starts.iter().zip(&pk.lens) {
        for i in 0..n {
            for (xv, pv) in x[(base + i) * d..(base + i + 1) * d].iter_mut().zip(&pos[i * d..(i + 1) * d]) {
                *xv += pv;
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lo) in lay.layers.iter().enumerate() {
        let mut a1 = vec![0.0; rows * d];
        let ln1 = layer_norm(&x, d, params.slice(lo.ln1_g, d), params.slice(lo.ln1_b, d), &mut a1);
        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        gemm(rows, d, d, &a1, false, params.slice(lo.wq, d * d), false, &mut q, false);
        gemm(rows, d, d, &a1, false, params.slice(lo.wk, d * d), false, &mut k, false);
        gemm(rows, d, d, &a1, false, params.slice(lo.wv, d * d), false, &mut v, false);
        let mut probs = vec![0.0; *pk.prob_offsets.last().unwrap()];
        let mut ctx = vec![0.0; rows * d];
        attention_forward(&cfg, &pk, &q, &k, &v, &mut probs, &mut ctx);
        // residual: x += ctx · W_O
        gemm(rows, d, d, &ctx, false, params.slice(lo.wo, d * d), false, &mut x, true);

        let mut a2 = vec![0.0; rows * d];
        let ln2 = layer_norm(&x, d, params.slice(lo.ln2_g, d), params.slice(lo.ln2_b, d), &mut a2);
        let mut pre = vec![0.0; rows * f];
        gemm(rows, d, f, &a2, false, params.slice(lo.w1, d * f), false, &mut pre, false);
        add_bias(&mut pre, params.slice(lo.b1, f));
        let act: Vec<f64> = pre.iter().map(|&h| h.max(0.0)).collect();
        gemm(rows, f, d, &act, false, params.slice(lo.w2, f * d), false, &mut x, true);
        add_bias(&mut x, params.slice(lo.b2, d));
        check_finite(&x, li)?;

        layers.push(LayerCache {
            ln1,
            a1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            a2,
            pre,
            act,
        });
    }

    let ny = pk.y_rows.len();
    let mut xy = vec![0.0; ny * d];
    for (i, &r) in pk.y_rows.iter().enumerate() {
        xy[i * d..(i + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
    }
    let mut z = vec![0.0; ny * d];
    let lnf = layer_norm(&xy, d, params.slice(lay.lnf_g, d), params.slice(lay.lnf_b, d), &mut z);
    let c = cfg.n_classes();
    let mut logits = vec![0.0; ny * c];
    gemm(ny, d, c, &z, false, params.slice(lay.head, c * d), true, &mut logits, false);
    check_finite(&logits, cfg.n_layers)?;

    Ok((
        logits,
        Cache {
            packing: pk,
            tokens,
            layers,
            lnf,
            z,
        },
    ))
}

/// Accumulates parameter gradients for the given logit gradients.
fn backward_chunk(params: &TransformerParams, cache: &Cache, dlogits: &[f64], grad: &mut [f64]) {
    let cfg = *params.config();
    let lay = params.layout();
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let c = cfg.n_classes();
    let width = cfg.input_dim();
    let pk = &cache.packing;
    let rows = pk.rows;
    let ny = pk.y_rows.len();

    gemm(c, ny, d, dlogits, true, &cache.z, false, &mut grad[lay.head..lay.head + c * d], true);
    let mut dz = vec![0.0; ny * d];
    gemm(ny, c, d, dlogits, false, params.slice(lay.head, c * d), false, &mut dz, false);
    let mut dxy = vec![0.0; ny * d];
    {
        let (dg, db) = split_pair(grad, lay.lnf_g, lay.lnf_b, d);
        layer_norm_backward(&dz, &cache.lnf, params.slice(lay.lnf_g, d), d, &mut dxy, dg, db);
    }
    let mut dx = vec![0.0; rows * d];
    for (i, &r) in pk.y_rows.iter().enumerate() {
        dx[r * d..(r + 1) * d].copy_from_slice(&dxy[i * d..(i + 1) * d]);
    }

    for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // feed-forward branch
        column_sums(&dx, d, &mut grad[lo.b2..lo.b2 + d]);
        gemm(f, rows, d, &lc.act, true, &dx, false, &mut grad[lo.w2..lo.w2 + f * d], true);
        let mut dpre = vec![0.0; rows * f];
        gemm(rows, d, f, &dx, false, params.slice(lo.w2, f * d), true, &mut dpre, false);
        for (g, &h) in dpre.iter_mut().zip(&lc.pre) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        column_sums(&dpre, f, &mut grad[lo.b1..lo.b1 + f]);
        gemm(d, rows, f, &lc.a2, true, &dpre, false, &mut grad[lo.w1..lo.w1 + d * f], true);
        let mut da2 = vec![0.0; rows * d];
        gemm(rows, f, d, &dpre, false, params.slice(lo.w1, d * f), true, &mut da2, false);
        {
            let (dg, db) = split_pair(grad, lo.ln2_g, lo.ln2_b, d);
            layer_norm_backward(&da2, &lc.ln2, params.slice(lo.ln2_g, d), d, &mut dx, dg, db);
        }

        // attention branch
        gemm(d, rows, d, &lc.ctx, true, &dx, false, &mut grad[lo.wo..lo.wo + d * d], true);
        let mut dctx = vec![0.0; rows * d];
        gemm(rows, d, d, &dx, false, params.slice(lo.wo, d * d), true, &mut dctx, false);
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        attention_backward(&cfg, pk, lc, &dctx, &mut dq, &mut dk, &mut dv);
        gemm(d, rows, d, &lc.a1, true, &dq, false, &mut grad[lo.wq..lo.wq + d * d], true);
        gemm(d, rows, d, &lc.a1, true, &dk, false, &mut grad[lo.wk..lo.wk + d * d], true);
        gemm(d, rows, d, &lc.a1, true, &dv, false, &mut grad[lo.wv..lo.wv + d * d], true);
        let mut da1 = vec![0.0; rows * d];
        gemm(rows, d, d, &dq, false, params.slice(lo.wq, d * d), true, &mut da1, false);
        gemm(rows, d, d, &dk, false, params.slice(lo.wk, d * d), true, &mut da1, true);
        gemm(rows, d, d, &dv, false, params.slice(lo.wv, d * d), true, &mut da1, true);
        {
            let (dg, db) = split_pair(grad, lo.ln1_g, lo.ln1_b, d);
            layer_norm_backward(&da1, &lc.ln1, params.slice(lo.ln1_g, d), d, &mut dx, dg, db);
        }
    }

    let dpos = &mut grad[lay.pos..lay.pos + cfg.max_tokens() * d];
    for (&base, &n) in pk.starts.iter().zip(&pk.lens) {
        for i in 0..n {
            for (p, g) in dpos[i * d..(i + 1) * d].iter_mut().zip(&dx[(base + i) * d..(base + i + 1) * d]) {
                *p += g;
            }
        }
    }
    gemm(d, rows, width, &dx, true, &cache.tokens, false, &mut grad[lay.embed..lay.embed + d * width], true);
}

/// Two adjacent, non-overlapping `len`-slices at `a < b`.
fn split_pair(buf: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// Key/value-cached decoding of a batch of prompts that all grow by the
/// same number of tokens per call. Used to generate feedback decisions
/// without re-running the prefix.
pub struct IncrementalDecoder<'a> {
    params: &'a TransformerParams,
    n_seq: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(params: &'a TransformerParams, n_seq: usize) -> Self {
        let cfg = params.config();
        let size = n_seq * cfg.max_tokens() * cfg.d_model;
        Self {
            params,
            n_seq,
            len: 0,
            keys: vec![vec![0.0; size]; cfg.n_layers],
            values: vec![vec![0.0; size]; cfg.n_layers],
        }
    }

    /// Tokens consumed so far per sequence.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens[s]` (row-major, equal count per sequence) and
    /// returns the logits at each sequence's last new token.
    pub fn extend(&mut self, tokens: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let cfg = *self.params.config();
        let lay = self.params.layout();
        let p = self.params;
        let (d, f, width) = (cfg.d_model, cfg.d_ff, cfg.input_dim());
        if tokens.len() != self.n_seq {
            return Err(Error::Shape(format!("{} sequences, decoder holds {}", tokens.len(), self.n_seq)));
        }
        let m = tokens.first().map_or(0, |t| t.len() / width);
        if m == 0 || tokens.iter().any(|t| t.len() != m * width) {
            return Err(Error::Shape("every sequence must receive the same positive number of tokens".into()));
        }
        if self.len + m > cfg.max_tokens() {
            return Err(Error::Length {
                got: (self.len + m).div_ceil(2),
                max: cfg.max_pairs,
            });
        }
        let rows = self.n_seq * m;
        let flat: Vec<f64> = tokens.concat();
        let mut x = vec![0.0; rows * d];
        gemm(rows, width, d, &flat, false, p.slice(lay.embed, d * width), true, &mut x, false);
        let pos = p.slice(lay.pos, cfg.max_tokens() * d);
        for (r, row) in x.chunks_exact_mut(d).enumerate() {
            let at = self.len + r % m;
            for (v, pv) in row.iter_mut().zip(&pos[at * d..(at + 1) * d]) {
                *v += pv;
            }
        }
        let dk = cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let stride = cfg.max_tokens() * d;
        let mut scores = vec![0.0; cfg.max_tokens()];
        for (li, lo) in lay.layers.iter().enumerate() {
            let mut a = vec![0.0; rows * d];
            layer_norm(&x, d, p.slice(lo.ln1_g, d), p.slice(lo.ln1_b, d), &mut a);
            let mut q = vec![0.0; rows * d];
            let mut k = vec![0.0; rows * d];
            let mut v = vec![0.0; rows * d];
            gemm(rows, d, d, &a, false, p.slice(lo.wq, d * d), false, &mut q, false);
            gemm(rows, d, d, &a, false, p.slice(lo.wk, d * d), false, &mut k, false);
            gemm(rows, d, d, &a, false, p.slice(lo.wv, d * d), false, &mut v, false);
            let (kc, vc) = (&mut self.keys[li], &mut self.values[li]);
            for s in 0..self.n_seq {
                let dst = s * stride + self.len * d;
                kc[dst..dst + m * d].copy_from_slice(&k[s * m * d..(s + 1) * m * d]);
                vc[dst..dst + m * d].copy_from_slice(&v[s * m * d..(s + 1) * m * d]);
            }
            let mut ctx = vec![0.0; rows * d];
            for s in 0..self.n_seq {
                for i in 0..m {
                    let at = self.len + i;
                    let r = s * m + i;
                    for h in 0..cfg.n_heads {
                        let col = h * dk;
                        let qi = &q[r * d + col..r * d + col + dk];
                        let mut mx = f64::NEG_INFINITY;
                        for (j, sc) in scores[..=at].iter_mut().enumerate() {
                            let kj = &kc[s * stride + j * d + col..s * stride + j * d + col + dk];
                            *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            mx = mx.max(*sc);
                        }
                        let mut sum = 0.0;
                        for sc in scores[..=at].iter_mut() {
                            *sc = (*sc - mx).exp();
                            sum += *sc;
                        }
                        let inv = 1.0 / sum;
                        let out = &mut ctx[r * d + col..r * d + col + dk];
                        for (j, sc) in scores[..=at].iter().enumerate() {
                            let w = sc * inv;
                            let vj = &vc[s * stride + j * d + col..s * stride + j * d + col + dk];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += w * vv;
                            }
                        }
                    }
                }
            }
            gemm(rows, d, d, &ctx, false, p.slice(lo.wo, d * d), false, &mut x, true);
            let mut a2 = vec![0.0; rows * d];
            layer_norm(&x, d, p.slice(lo.ln2_g, d), p.slice(lo.ln2_b, d), &mut a2);
            let mut hidden = vec![0.0; rows * f];
            gemm(rows, d, f, &a2, false, p.slice(lo.w1, d * f), false, &mut hidden, false);
            add_bias(&mut hidden, p.slice(lo.b1, f));
            for h in hidden.iter_mut() {
                *h = h.max(0.0);
            }
            gemm(rows, f, d, &hidden, false, p.slice(lo.w2, f * d), false, &mut x, true);
            add_bias(&mut x, p.slice(lo.b2, d));
            check_finite(&x, li)?;
        }
        self.len += m;

        let mut last = vec![0.0; self.n_seq * d];
        for s in 0..self.n_seq {
            let r = s * m + m - 1;
            last[s * d..(s + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let mut z = vec![0.0; self.n_seq * d];
        layer_norm(&last, d, p.slice(lay.lnf_g, d), p.slice(lay.lnf_b, d), &mut z);
        let c = cfg.n_classes();
        let mut logits = vec![0.0; self.n_seq * c];
        gemm(self.n_seq, d, c, &z, false, p.slice(lay.head, c * d), true, &mut logits, false);
        check_finite(&logits, cfg.n_layers)?;
        Ok(logits.chunks_exact(c).map(|r| r.to_vec()).collect())
    }
}

/// Logits at every y-position of one sequence.
pub fn forward(params: &TransformerParams, seq: &TokenSequence) -> Result<Logits> {
    let (data, _) = forward_chunk(params, &[seq])?;
    Ok(Logits {
        n_classes: params.config().n_classes(),
        data,
    })
}

/// Logits for many sequences (lengths may differ).
pub fn forward_batch(params: &TransformerParams, seqs: &[TokenSequence]) -> Result<Vec<Logits>> {
    let c = params.config().n_classes();
    let chunks: Vec<Result<Vec<Logits>>> = seqs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let (data, cache) = forward_chunk(params, &refs)?;
            let mut out = Vec::with_capacity(chunk.len());
            let mut row = 0;
            for s in chunk {
                let n = s.n_y();
                out.push(Logits {
                    n_classes: c,
                    data: data[row * c..(row + n) * c].to_vec(),
                });
                row += n;
            }
            debug_assert_eq!(row, cache.packing.y_rows.len());
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(seqs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn validate_batch(params: &TransformerParams, batch: &[LabeledSequence]) -> Result<usize> {
    let c = params.config().n_classes();
    let mut count = 0;
    for s in batch {
        let ny = s.tokens.n_y();
        if s.targets.len() != ny || s.mask.len() != ny {
            return Err(Error::Shape(format!(
                "{ny} y-positions but {} targets and {} mask flags",
                s.targets.len(),
                s.mask.len()
            )));
        }
        if let Some(&bad) = s.targets.iter().find(|&&t| t >= c) {
            return Err(Error::Range { index: bad, limit: c });
        }
        count += s.masked_count();
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(count)
}

/// Cross-entropy of each masked y-position, and optionally the gradient
/// of `scale · Σ CE` with respect to the logits.
fn cross_entropy(logits: &[f64], c: usize, chunk: &[LabeledSequence], scale: Option<f64>) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut dlogits = if scale.is_some() { vec![0.0; logits.len()] } else { Vec::new() };
    let mut row = 0;
    for s in chunk {
        for (&target, &on) in s.targets.iter().zip(&s.mask) {
            if on {
                let l = &logits[row * c..(row + 1) * c];
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = l.iter().map(|v| (v - mx).exp()).sum();
                total += mx + sum.ln() - l[target];
                if let Some(w) = scale {
                    let g = &mut dlogits[row * c..(row + 1) * c];
                    for (gi, li) in g.iter_mut().zip(l) {
                        *gi = w * (li - mx).exp() / sum;
                    }
                    g[target] -= w;
                }
            }
            row += 1;
        }
    }
    (total, dlogits)
}

/// Mean masked cross-entropy over the batch and its exact gradient.
/// The returned gradient shares the parameter layout.
pub fn loss_and_grads(params: &TransformerParams, batch: &[LabeledSequence]) -> Result<(f64, TransformerParams)> {
    let count = validate_batch(params, batch)?;
    let c = params.config().n_classes();
    let w = 1.0 / count as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&TokenSequence> = chunk.iter().map(|s| &s.tokens).collect();
            let (logits, cache) = forward_chunk(params, &refs)?;
            let (loss, dlogits) = cross_entropy(&logits, c, chunk, Some(w));
            let mut grad = vec![0.0; params.len()];
            backward_chunk(params, &cache, &dlogits, &mut grad);
            Ok((loss, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = TransformerParams::zeros(*params.config())?;
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        for (a, b) in grad.as_mut_slice().iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total * w, grad))
}

/// Mean masked cross-entropy without gradients.
pub fn masked_loss(params: &TransformerParams, batch: &[LabeledSequence]) -> Result<f64> {
    let count = validate_batch(params, batch)?;
    let c = params.config().n_classes();
    let parts: Vec<Result<f64>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&TokenSequence> = chunk.iter().map(|s| &s.tokens).collect();
            let (logits, _) = forward_chunk(params, &refs)?;
            Ok(cross_entropy(&logits, c, chunk, None).0)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / count as f64)
}

/// Detects the symbol behind `query` given labeled context pairs.
pub fn predict(params: &TransformerParams, context: &[(&[Complex64], usize)], query: &[Complex64]) -> Result<Prediction> {
    let cfg = params.config();
    if context.len() + 1 > cfg.max_pairs {
        return Err(Error::Length {
            got: context.len() + 1,
            max: cfg.max_pairs,
        });
    }
    let pairs: Vec<(&[Complex64], XLabel)> = context.iter().map(|(y, x)| (*y, XLabel::Index(*x))).collect();
    let seq = tokenize(&pairs, Some(query), cfg)?;
    let logits = forward(params, &seq)?;
    let t = logits.rows() - 1;
    Ok(Prediction {
        probabilities: logits.probabilities(t),
        index: logits.argmax(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::Scheme;
    use crate::model::tokens::XLabel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(scheme: Scheme) -> ModelConfig {
        let mut cfg = ModelConfig::new(scheme, 1, 1).with_size(8, 2, 2);
        cfg.max_pairs = 4;
        cfg
    }

    fn random_prompt(cfg: &ModelConfig, pairs: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
        let ys: Vec<Vec<Complex64>> = (0..pairs)
            .map(|_| vec![Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))])
            .collect();
        let labels: Vec<usize> = (0..pairs).map(|_| rng.random_range(0..cfg.n_classes())).collect();
        TokenSequence::prompt(cfg, &ys, &labels).unwrap()
    }

    /// Randomize every tensor, including norm scales and biases.
    fn perturbed(cfg: ModelConfig, seed: u64) -> TransformerParams {
        let mut p = TransformerParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn degenerate_network_is_uniform() {
        let cfg = ModelConfig::new(Scheme::Qam16, 1, 1).with_size(16, 2, 4);
        let mut params = TransformerParams::zeros(cfg).unwrap();
        // only biases nonzero
        let lay = params.layout().clone();
        for lo in &lay.layers {
            params.slice_mut(lo.b1, cfg.d_ff).fill(0.3);
            params.slice_mut(lo.b2, cfg.d_model).fill(-0.2);
            params.slice_mut(lo.ln1_b, cfg.d_model).fill(0.1);
        }
        params.slice_mut(lay.lnf_b, cfg.d_model).fill(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = random_prompt(&cfg, 5, &mut rng);
        let logits = forward(&params, &seq).unwrap();
        for t in 0..logits.rows() {
            for p in logits.probabilities(t) {
                assert!((p - 1.0 / 16.0).abs() < 1e-15);
            }
        }
        let batch = vec![LabeledSequence {
            targets: vec![3; seq.n_y()],
            mask: vec![true; seq.n_y()],
            tokens: seq,
        }];
        let loss = masked_loss(&params, &batch).unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12);
        assert!((loss - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn causality_exact() {
        let cfg = tiny(Scheme::Qpsk);
        let params = perturbed(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let seq = random_prompt(&cfg, 4, &mut rng);
            let base = forward(&params, &seq).unwrap();
            let cut = rng.random_range(0..seq.len());
            let mut other = seq.clone();
            for i in cut + 1..seq.len() {
                for v in other.token_mut(i) {
                    *v = rng.random_range(-3.0..3.0);
                }
            }
            let changed = forward(&params, &other).unwrap();
            for t in 0..base.rows() {
                if 2 * t <= cut {
                    assert_eq!(base.row(t), changed.row(t));
                }
            }
        }
    }

    #[test]
    fn hand_worked_single_layer() {
        // one layer, one head, d = 2, BPSK SISO, two tokens (y, x)
        let mut cfg = ModelConfig::new(Scheme::Bpsk, 1, 1).with_size(2, 1, 1);
        cfg.d_ff = 2;
        cfg.max_pairs = 1;
        let mut params = TransformerParams::zeros(cfg).unwrap();
        let set = |p: &mut TransformerParams, name: &str, vals: &[f64]| {
            let t = p.tensors().iter().find(|t| t.name == name).unwrap().clone();
            p.slice_mut(t.offset, t.len()).copy_from_slice(vals);
        };
        set(&mut params, "embed", &[1.0, 0.5, -0.5, 2.0]);
        set(&mut params, "pos", &[0.1, 0.0, 0.0, -0.1]);
        set(&mut params, "layer0.ln1.scale", &[1.0, 1.0]);
        set(&mut params, "layer0.attn.wq", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut params, "layer0.attn.wk", &[0.5, 0.0, 0.0, 0.5]);
        set(&mut params, "layer0.attn.wv", &[1.0, 2.0, 0.0, 1.0]);
        set(&mut params, "layer0.attn.wo", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut params, "layer0.ln2.scale", &[1.0, 1.0]);
        set(&mut params, "layer0.ffn.w1", &[1.0, -1.0, 0.0, 1.0]);
        set(&mut params, "layer0.ffn.b1", &[0.0, 0.1]);
        set(&mut params, "layer0.ffn.w2", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut params, "final_ln.scale", &[1.0, 1.0]);
        set(&mut params, "head", &[1.0, 0.0, 0.0, 1.0]);

        let y = [Complex64::new(0.3, -0.4)];
        let seq = tokenize(&[(&y, XLabel::Index(1))], None, &cfg).unwrap();
        let logits = forward(&params, &seq).unwrap();
        assert_eq!(logits.rows(), 1);

        // by hand for the y-token (position 0), which attends only to itself:
        // e0 = A·[0.3, -0.4] + pos0 = [0.3 - 0.2, -0.15 - 0.8] + [0.1, 0] = [0.2, -0.95]
        let e0 = [0.2, -0.95];
        let ln = |v: [f64; 2]| {
            let m = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
            let r = 1.0 / (var + 1e-5).sqrt();
            [(v[0] - m) * r, (v[1] - m) * r]
        };
        let a = ln(e0);
        // single key: softmax weight 1, ctx = a·W_V
        let ctx = [a[0], 2.0 * a[0] + a[1]];
        let u = [e0[0] + ctx[0], e0[1] + ctx[1]];
        let c2 = ln(u);
        let h = [c2[0].max(0.0), (-c2[0] + c2[1] + 0.1).max(0.0)];
        let out = [u[0] + h[0], u[1] + h[1]];
        let z = ln(out);
        assert!((logits.row(0)[0] - z[0]).abs() < 1e-10);
        assert!((logits.row(0)[1] - z[1]).abs() < 1e-10);
    }

    #[test]
    fn batch_matches_single() {
        let cfg = tiny(Scheme::Qpsk);
        let params = perturbed(cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<TokenSequence> = (0..40).map(|i| random_prompt(&cfg, 1 + i % 4, &mut rng)).collect();
        let batched = forward_batch(&params, &seqs).unwrap();
        for (s, b) in seqs.iter().zip(&batched) {
            let single = forward(&params, s).unwrap();
            for t in 0..single.rows() {
                for (x, y) in single.row(t).iter().zip(b.row(t)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    fn labeled(cfg: &ModelConfig, rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledSequence> {
        (0..n)
            .map(|_| {
                let tokens = random_prompt(cfg, 3, rng);
                let ny = tokens.n_y();
                LabeledSequence {
                    targets: (0..ny).map(|_| rng.random_range(0..cfg.n_classes())).collect(),
                    mask: (0..ny).map(|i| i != 1).collect(),
                    tokens,
                }
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny(Scheme::Bpsk);
        let params = perturbed(cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = labeled(&cfg, &mut rng, 3);
        let (_, grad) = loss_and_grads(&params, &batch).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for t in params.tensors() {
            for i in t.offset..t.offset + t.len() {
                let mut plus = params.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = params.clone();
                minus.as_mut_slice()[i] -= h;
                let fd = (masked_loss(&plus, &batch).unwrap() - masked_loss(&minus, &batch).unwrap()) / (2.0 * h);
                let an = grad.as_slice()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn single_position_mask() {
        let cfg = tiny(Scheme::Qpsk);
        let params = perturbed(cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = random_prompt(&cfg, 3, &mut rng);
        let logits = forward(&params, &seq).unwrap();
        let probs = logits.probabilities(2);
        let expected = -probs[1].ln();
        let batch = vec![LabeledSequence {
            tokens: seq,
            targets: vec![0, 0, 1],
            mask: vec![false, false, true],
        }];
        assert!((masked_loss(&params, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let cfg = tiny(Scheme::Qpsk);
        let params = perturbed(cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = random_prompt(&cfg, 3, &mut rng);
        let batch = vec![LabeledSequence {
            tokens: seq,
            targets: vec![0; 3],
            mask: vec![false; 3],
        }];
        assert!(matches!(loss_and_grads(&params, &batch), Err(Error::EmptyMask)));
    }

    #[test]
    fn non_finite_reports_layer() {
        let cfg = tiny(Scheme::Qpsk);
        let mut params = perturbed(cfg, 10);
        let b2 = params.layout().layers[1].b2;
        params.as_mut_slice()[b2] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = random_prompt(&cfg, 2, &mut rng);
        assert!(matches!(forward(&params, &seq), Err(Error::Numeric { layer: 1 })));
    }

    #[test]
    fn predict_is_a_distribution_and_deterministic() {
        let cfg = ModelConfig::new(Scheme::Qam16, 1, 1).with_size(16, 2, 2);
        let params = perturbed(cfg, 12);
        let ys: Vec<Vec<Complex64>> = (0..5).map(|i| vec![Complex64::new(0.1 * i as f64, -0.2)]).collect();
        let ctx: Vec<(&[Complex64], usize)> = ys[..4].iter().enumerate().map(|(i, y)| (y.as_slice(), i)).collect();
        let a = predict(&params, &ctx, &ys[4]).unwrap();
        let b = predict(&params, &ctx, &ys[4]).unwrap();
        assert_eq!(a, b);
        assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.probabilities.iter().all(|&p| p >= 0.0));
        assert_eq!(a.index, argmax(&a.probabilities));
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let cfg = tiny(Scheme::Qam16);
        let params = perturbed(cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let seqs: Vec<TokenSequence> = (0..3).map(|_| random_prompt(&cfg, 4, &mut rng)).collect();
        let mut dec = IncrementalDecoder::new(&params, 3);
        let first: Vec<&[f64]> = seqs.iter().map(|s| &s.as_slice()[..3 * s.width()]).collect();
        let mut got = vec![dec.extend(&first).unwrap()];
        for t in 2..4 {
            let w = seqs[0].width();
            let next: Vec<&[f64]> = seqs.iter().map(|s| &s.as_slice()[(2 * t - 1) * w..(2 * t + 1) * w]).collect();
            got.push(dec.extend(&next).unwrap());
        }
        assert_eq!(dec.len(), 7);
        for (i, s) in seqs.iter().enumerate() {
            let full = forward(&params, s).unwrap();
            for (t, step) in got.iter().enumerate() {
                for (a, b) in full.row(t + 1).iter().zip(&step[i]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let too_long: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
        assert!(dec.extend(&too_long).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
