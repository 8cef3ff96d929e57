//! The denoiser: a single-head transformer with one encoder and one decoder
//! layer, a 2D positional encoding over (sequence position, diffusion step),
//! hand-written reverse-mode gradients, and the Adam update.
//!
//! The embedded token matrix is fed to both the encoder and the decoder;
//! the decoder additionally cross-attends to the encoder output. Masked
//! input rows are all-zero, so they embed to the zero vector and are
//! distinguished only by the positional encoding. Residual blocks are
//! pre-layer-norm. There is no dropout: training-mode and inference-mode
//! forward are the same function.
//!
//! Checkpoint format (`save_checkpoint`/`load_checkpoint`): a little-endian
//! `u32` header length, a JSON header
//! `{"format":"ddsr-net","version":1,"embed_dim":E,"ff_dim":F,"token_dim":d,
//!   "max_tokens":M,"blocks":[["<name>",len],...]}`,
//! then the listed blocks as consecutive little-endian `f64` values in
//! header order. The positional table is derived, not stored.

use crate::expr::TokenId;
use crate::mat::{dot, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("positional encoding width {0} must be even and nonzero")]
    OddWidth(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at batch index {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Shape hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Embedding width E; must be even for the two-half positional encoding.
    pub embed_dim: usize,
    /// Feed-forward hidden width F.
    pub ff_dim: usize,
    /// Vocabulary size d (PAD included).
    pub token_dim: usize,
    /// Token budget M; the positional table covers steps 0..=M.
    pub max_tokens: usize,
}

impl NetConfig {
    pub fn new(embed_dim: usize, ff_dim: usize, token_dim: usize, max_tokens: usize) -> Self {
        NetConfig { embed_dim, ff_dim, token_dim, max_tokens }
    }
}

/// The two-dimensional sinusoidal encoding: the first half of the vector
/// encodes the sequence position `l`, the second half the diffusion step
/// `t`, both as interleaved sin/cos with frequencies `10000^(4i/width)`.
pub fn positional_encoding(l: usize, t: usize, width: usize) -> Result<Vec<f64>, NetError> {
    if width == 0 || width % 2 != 0 {
        return Err(NetError::OddWidth(width));
    }
    let half = width / 2;
    let mut v = vec![0.0; width];
    for (idx, slot) in v.iter_mut().enumerate() {
        let (base, k) = if idx < half {
            (l as f64, idx)
        } else {
            (t as f64, idx - half)
        };
        let i = (k / 2) as f64;
        let freq = 10000f64.powf(4.0 * i / width as f64);
        *slot = if k % 2 == 0 { (base / freq).sin() } else { (base / freq).cos() };
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear { w: Mat::zeros(inp, out), b: vec![0.0; out] }
    }

    fn init(inp: usize, out: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Mat::from_fn(inp, out, |_, _| rng.random_range(-bound..bound)),
            b: vec![0.0; out],
        }
    }

    fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.w);
        y.add_row_broadcast(&self.b);
        y
    }

    /// Returns dX and accumulates dW, db.
    fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        grad.w.add_assign(&x.transpose_matmul(dy));
        for i in 0..dy.rows() {
            for (g, &d) in grad.b.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
        dy.matmul_transpose(&self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn zeros(width: usize) -> Self {
        LayerNorm { gain: vec![0.0; width], bias: vec![0.0; width] }
    }

    fn identity(width: usize) -> Self {
        LayerNorm { gain: vec![1.0; width], bias: vec![0.0; width] }
    }

    fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let (rows, cols) = (x.rows(), x.cols());
        let mut y = Mat::zeros(rows, cols);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let xr = x.row(i);
            let mu = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            let hr = xhat.row_mut(i);
            let yr = y.row_mut(i);
            for j in 0..cols {
                let h = (xr[j] - mu) * is;
                hr[j] = h;
                yr[j] = self.gain[j] * h + self.bias[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let (rows, cols) = (dy.rows(), dy.cols());
        let mut dx = Mat::zeros(rows, cols);
        for i in 0..rows {
            let dyr = dy.row(i);
            let hr = cache.xhat.row(i);
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..cols {
                let dxh = dyr[j] * self.gain[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * hr[j];
                grad.gain[j] += dyr[j] * hr[j];
                grad.bias[j] += dyr[j];
            }
            mean_dxhat /= cols as f64;
            mean_dxhat_xhat /= cols as f64;
            let is = cache.inv_std[i];
            let dxr = dx.row_mut(i);
            for j in 0..cols {
                let dxh = dyr[j] * self.gain[j];
                dxr[j] = (dxh - mean_dxhat - hr[j] * mean_dxhat_xhat) * is;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    weights: Mat,
    z: Mat,
}

impl Attention {
    fn zeros(e: usize) -> Self {
        Attention {
            wq: Linear::zeros(e, e),
            wk: Linear::zeros(e, e),
            wv: Linear::zeros(e, e),
            wo: Linear::zeros(e, e),
        }
    }

    fn init(e: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Attention {
            wq: Linear::init(e, e, bound, rng),
            wk: Linear::init(e, e, bound, rng),
            wv: Linear::init(e, e, bound, rng),
            wo: Linear::init(e, e, bound, rng),
        }
    }

    /// Single-head scaled dot-product attention; queries from `q_in`,
    /// keys/values from `kv_in`.
    fn forward(&self, q_in: &Mat, kv_in: &Mat) -> (Mat, AttnCache) {
        let e = self.wq.w.cols();
        let scale = 1.0 / (e as f64).sqrt();
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(kv_in);
        let v = self.wv.forward(kv_in);
        let mut scores = q.matmul_transpose(&k);
        scores.scale(scale);
        scores.softmax_rows();
        let z = scores.matmul(&v);
        let out = self.wo.forward(&z);
        (out, AttnCache { q, k, v, weights: scores, z })
    }

    /// Returns (d_q_in, d_kv_in) and accumulates parameter grads.
    fn backward(
        &self,
        q_in: &Mat,
        kv_in: &Mat,
        cache: &AttnCache,
        dout: &Mat,
        grad: &mut Attention,
    ) -> (Mat, Mat) {
        let e = self.wq.w.cols();
        let scale = 1.0 / (e as f64).sqrt();
        let dz = self.wo.backward(&cache.z, dout, &mut grad.wo);
        let mut dweights = dz.matmul_transpose(&cache.v);
        let dv = cache.weights.transpose_matmul(&dz);
        // Softmax backward per row.
        for i in 0..dweights.rows() {
            let w = cache.weights.row(i);
            let s = dot(dweights.row(i), w);
            let dwr = dweights.row_mut(i);
            for (d, &wj) in dwr.iter_mut().zip(w.iter()) {
                *d = wj * (*d - s);
            }
        }
        dweights.scale(scale);
        let dq = dweights.matmul(&cache.k);
        let dk = dweights.transpose_matmul(&cache.q);
        let dq_in = self.wq.backward(q_in, &dq, &mut grad.wq);
        let mut dkv_in = self.wk.backward(kv_in, &dk, &mut grad.wk);
        dkv_in.add_assign(&self.wv.backward(kv_in, &dv, &mut grad.wv));
        (dq_in, dkv_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    /// E -> F.
    pub w1: Linear,
    /// F -> E.
    pub w2: Linear,
}

struct FfCache {
    /// relu(x W1 + b1).
    hidden: Mat,
}

impl FeedForward {
    fn zeros(e: usize, f: usize) -> Self {
        FeedForward { w1: Linear::zeros(e, f), w2: Linear::zeros(f, e) }
    }

    fn init(e: usize, f: usize, bound: f64, rng: &mut impl Rng) -> Self {
        FeedForward { w1: Linear::init(e, f, bound, rng), w2: Linear::init(f, e, bound, rng) }
    }

    fn forward(&self, x: &Mat) -> (Mat, FfCache) {
        let mut hidden = self.w1.forward(x);
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let out = self.w2.forward(&hidden);
        (out, FfCache { hidden })
    }

    fn backward(&self, x: &Mat, cache: &FfCache, dout: &Mat, grad: &mut FeedForward) -> Mat {
        let mut dhidden = self.w2.backward(&cache.hidden, dout, &mut grad.w2);
        for (d, &h) in dhidden.data_mut().iter_mut().zip(cache.hidden.data()) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        self.w1.backward(x, &dhidden, &mut grad.w1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

/// All trainable parameters plus the fixed positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    /// Token embedding, `d x E`.
    pub embed: Mat,
    /// Positional table: `pe[t]` is the `M x E` encoding at step `t`,
    /// derived from [`positional_encoding`]; not trained.
    pub pe: Vec<Mat>,
    pub encoder: EncoderLayer,
    pub decoder: DecoderLayer,
    /// Output projection `E x d`.
    pub out: Linear,
}

/// Gradient container mirroring the trainable blocks of [`NetParams`].
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub embed: Mat,
    pub encoder: EncoderLayer,
    pub decoder: DecoderLayer,
    pub out: Linear,
}

fn pe_table(config: &NetConfig) -> Vec<Mat> {
    (0..=config.max_tokens)
        .map(|t| {
            Mat::from_fn(config.max_tokens, config.embed_dim, |l, j| {
                positional_encoding(l, t, config.embed_dim).expect("validated width")[j]
            })
        })
        .collect()
}

impl NetParams {
    /// Uniform(-1/sqrt(E), 1/sqrt(E)) projections, zero biases, identity
    /// layer norms; seeded.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        if config.embed_dim % 2 != 0 || config.embed_dim == 0 {
            return Err(NetError::OddWidth(config.embed_dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, f, d) = (config.embed_dim, config.ff_dim, config.token_dim);
        let bound = 1.0 / (e as f64).sqrt();
        Ok(NetParams {
            config,
            embed: Mat::from_fn(d, e, |_, _| rng.random_range(-bound..bound)),
            pe: pe_table(&config),
            encoder: EncoderLayer {
                ln1: LayerNorm::identity(e),
                attn: Attention::init(e, bound, &mut rng),
                ln2: LayerNorm::identity(e),
                ff: FeedForward::init(e, f, bound, &mut rng),
            },
            decoder: DecoderLayer {
                ln1: LayerNorm::identity(e),
                self_attn: Attention::init(e, bound, &mut rng),
                ln2: LayerNorm::identity(e),
                cross_attn: Attention::init(e, bound, &mut rng),
                ln3: LayerNorm::identity(e),
                ff: FeedForward::init(e, f, bound, &mut rng),
            },
            out: Linear::init(e, d, bound, &mut rng),
        })
    }

    /// Named views of every trainable block.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        collect_blocks(&self.embed, &self.encoder, &self.decoder, &self.out)
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        collect_blocks_mut(&mut self.embed, &mut self.encoder, &mut self.decoder, &mut self.out)
    }
}

impl NetGrads {
    pub fn zeros(config: &NetConfig) -> Self {
        let (e, f, d) = (config.embed_dim, config.ff_dim, config.token_dim);
        NetGrads {
            embed: Mat::zeros(d, e),
            encoder: EncoderLayer {
                ln1: LayerNorm::zeros(e),
                attn: Attention::zeros(e),
                ln2: LayerNorm::zeros(e),
                ff: FeedForward::zeros(e, f),
            },
            decoder: DecoderLayer {
                ln1: LayerNorm::zeros(e),
                self_attn: Attention::zeros(e),
                ln2: LayerNorm::zeros(e),
                cross_attn: Attention::zeros(e),
                ln3: LayerNorm::zeros(e),
                ff: FeedForward::zeros(e, f),
            },
            out: Linear::zeros(e, d),
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        collect_blocks(&self.embed, &self.encoder, &self.decoder, &self.out)
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        collect_blocks_mut(&mut self.embed, &mut self.encoder, &mut self.decoder, &mut self.out)
    }

    pub fn add(&mut self, other: &NetGrads) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in self.blocks_mut() {
            for x in a {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

fn collect_blocks<'a>(
    embed: &'a Mat,
    enc: &'a EncoderLayer,
    dec: &'a DecoderLayer,
    out: &'a Linear,
) -> Vec<(&'static str, &'a [f64])> {
    vec![
        ("embed", embed.data()),
        ("enc.ln1.g", &enc.ln1.gain),
        ("enc.ln1.b", &enc.ln1.bias),
        ("enc.attn.wq.w", enc.attn.wq.w.data()),
        ("enc.attn.wq.b", &enc.attn.wq.b),
        ("enc.attn.wk.w", enc.attn.wk.w.data()),
        ("enc.attn.wk.b", &enc.attn.wk.b),
        ("enc.attn.wv.w", enc.attn.wv.w.data()),
        ("enc.attn.wv.b", &enc.attn.wv.b),
        ("enc.attn.wo.w", enc.attn.wo.w.data()),
        ("enc.attn.wo.b", &enc.attn.wo.b),
        ("enc.ln2.g", &enc.ln2.gain),
        ("enc.ln2.b", &enc.ln2.bias),
        ("enc.ff.w1.w", enc.ff.w1.w.data()),
        ("enc.ff.w1.b", &enc.ff.w1.b),
        ("enc.ff.w2.w", enc.ff.w2.w.data()),
        ("enc.ff.w2.b", &enc.ff.w2.b),
        ("dec.ln1.g", &dec.ln1.gain),
        ("dec.ln1.b", &dec.ln1.bias),
        ("dec.self.wq.w", dec.self_attn.wq.w.data()),
        ("dec.self.wq.b", &dec.self_attn.wq.b),
        ("dec.self.wk.w", dec.self_attn.wk.w.data()),
        ("dec.self.wk.b", &dec.self_attn.wk.b),
        ("dec.self.wv.w", dec.self_attn.wv.w.data()),
        ("dec.self.wv.b", &dec.self_attn.wv.b),
        ("dec.self.wo.w", dec.self_attn.wo.w.data()),
        ("dec.self.wo.b", &dec.self_attn.wo.b),
        ("dec.ln2.g", &dec.ln2.gain),
        ("dec.ln2.b", &dec.ln2.bias),
        ("dec.cross.wq.w", dec.cross_attn.wq.w.data()),
        ("dec.cross.wq.b", &dec.cross_attn.wq.b),
        ("dec.cross.wk.w", dec.cross_attn.wk.w.data()),
        ("dec.cross.wk.b", &dec.cross_attn.wk.b),
        ("dec.cross.wv.w", dec.cross_attn.wv.w.data()),
        ("dec.cross.wv.b", &dec.cross_attn.wv.b),
        ("dec.cross.wo.w", dec.cross_attn.wo.w.data()),
        ("dec.cross.wo.b", &dec.cross_attn.wo.b),
        ("dec.ln3.g", &dec.ln3.gain),
        ("dec.ln3.b", &dec.ln3.bias),
        ("dec.ff.w1.w", dec.ff.w1.w.data()),
        ("dec.ff.w1.b", &dec.ff.w1.b),
        ("dec.ff.w2.w", dec.ff.w2.w.data()),
        ("dec.ff.w2.b", &dec.ff.w2.b),
        ("out.w", out.w.data()),
        ("out.b", &out.b),
    ]
}

fn collect_blocks_mut<'a>(
    embed: &'a mut Mat,
    enc: &'a mut EncoderLayer,
    dec: &'a mut DecoderLayer,
    out: &'a mut Linear,
) -> Vec<(&'static str, &'a mut [f64])> {
    vec![
        ("embed", embed.data_mut()),
        ("enc.ln1.g", &mut enc.ln1.gain),
        ("enc.ln1.b", &mut enc.ln1.bias),
        ("enc.attn.wq.w", enc.attn.wq.w.data_mut()),
        ("enc.attn.wq.b", &mut enc.attn.wq.b),
        ("enc.attn.wk.w", enc.attn.wk.w.data_mut()),
        ("enc.attn.wk.b", &mut enc.attn.wk.b),
        ("enc.attn.wv.w", enc.attn.wv.w.data_mut()),
        ("enc.attn.wv.b", &mut enc.attn.wv.b),
        ("enc.attn.wo.w", enc.attn.wo.w.data_mut()),
        ("enc.attn.wo.b", &mut enc.attn.wo.b),
        ("enc.ln2.g", &mut enc.ln2.gain),
        ("enc.ln2.b", &mut enc.ln2.bias),
        ("enc.ff.w1.w", enc.ff.w1.w.data_mut()),
        ("enc.ff.w1.b", &mut enc.ff.w1.b),
        ("enc.ff.w2.w", enc.ff.w2.w.data_mut()),
        ("enc.ff.w2.b", &mut enc.ff.w2.b),
        ("dec.ln1.g", &mut dec.ln1.gain),
        ("dec.ln1.b", &mut dec.ln1.bias),
        ("dec.self.wq.w", dec.self_attn.wq.w.data_mut()),
        ("dec.self.wq.b", &mut dec.self_attn.wq.b),
        ("dec.self.wk.w", dec.self_attn.wk.w.data_mut()),
        ("dec.self.wk.b", &mut dec.self_attn.wk.b),
        ("dec.self.wv.w", dec.self_attn.wv.w.data_mut()),
        ("dec.self.wv.b", &mut dec.self_attn.wv.b),
        ("dec.self.wo.w", dec.self_attn.wo.w.data_mut()),
        ("dec.self.wo.b", &mut dec.self_attn.wo.b),
        ("dec.ln2.g", &mut dec.ln2.gain),
        ("dec.ln2.b", &mut dec.ln2.bias),
        ("dec.cross.wq.w", dec.cross_attn.wq.w.data_mut()),
        ("dec.cross.wq.b", &mut dec.cross_attn.wq.b),
        ("dec.cross.wk.w", dec.cross_attn.wk.w.data_mut()),
        ("dec.cross.wk.b", &mut dec.cross_attn.wk.b),
        ("dec.cross.wv.w", dec.cross_attn.wv.w.data_mut()),
        ("dec.cross.wv.b", &mut dec.cross_attn.wv.b),
        ("dec.cross.wo.w", dec.cross_attn.wo.w.data_mut()),
        ("dec.cross.wo.b", &mut dec.cross_attn.wo.b),
        ("dec.ln3.g", &mut dec.ln3.gain),
        ("dec.ln3.b", &mut dec.ln3.bias),
        ("dec.ff.w1.w", dec.ff.w1.w.data_mut()),
        ("dec.ff.w1.b", &mut dec.ff.w1.b),
        ("dec.ff.w2.w", dec.ff.w2.w.data_mut()),
        ("dec.ff.w2.b", &mut dec.ff.w2.b),
        ("out.w", out.w.data_mut()),
        ("out.b", &mut out.b),
    ]
}

/// Everything the backward pass needs from one forward run.
pub struct ForwardCache {
    x: Mat,
    ln1: LnCache,
    a1: Mat,
    at1: AttnCache,
    ln2: LnCache,
    a2: Mat,
    ff1: FfCache,
    henc: Mat,
    ln3: LnCache,
    b1: Mat,
    at2: AttnCache,
    ln4: LnCache,
    b2: Mat,
    atx: AttnCache,
    ln5: LnCache,
    b3: Mat,
    ff2: FfCache,
    hdec: Mat,
    /// Row distributions (softmax of logits).
    pub probs: Mat,
    /// Row log-distributions (log-softmax of logits).
    pub logprobs: Mat,
}

impl NetParams {
    fn embed_input(&self, x: &Mat, t: usize) -> Mat {
        let mut h0 = x.matmul(&self.embed);
        h0.add_assign(&self.pe[t.min(self.pe.len() - 1)]);
        h0
    }

    /// Full forward pass with cached intermediates for backprop.
    pub fn forward_cached(&self, x: &Mat, t: usize) -> ForwardCache {
        assert_eq!(x.rows(), self.config.max_tokens, "input must have M rows");
        assert_eq!(x.cols(), self.config.token_dim, "input must have d cols");
        let h0 = self.embed_input(x, t);
        // Encoder.
        let (a1, ln1) = self.encoder.ln1.forward(&h0);
        let (s1, at1) = self.encoder.attn.forward(&a1, &a1);
        let mut h1 = h0.clone();
        h1.add_assign(&s1);
        let (a2, ln2) = self.encoder.ln2.forward(&h1);
        let (f1, ff1) = self.encoder.ff.forward(&a2);
        let mut henc = h1;
        henc.add_assign(&f1);
        // Decoder, fed the same embedded input.
        let (b1, ln3) = self.decoder.ln1.forward(&h0);
        let (s2, at2) = self.decoder.self_attn.forward(&b1, &b1);
        let mut g1 = h0.clone();
        g1.add_assign(&s2);
        let (b2, ln4) = self.decoder.ln2.forward(&g1);
        let (c1, atx) = self.decoder.cross_attn.forward(&b2, &henc);
        let mut g2 = g1;
        g2.add_assign(&c1);
        let (b3, ln5) = self.decoder.ln3.forward(&g2);
        let (f2, ff2) = self.decoder.ff.forward(&b3);
        let mut hdec = g2;
        hdec.add_assign(&f2);
        let logits = self.out.forward(&hdec);
        let mut probs = logits.clone();
        probs.softmax_rows();
        let mut logprobs = logits;
        for i in 0..logprobs.rows() {
            let row = logprobs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row {
                *v -= lse;
            }
        }
        ForwardCache {
            x: x.clone(),
            ln1,
            a1,
            at1,
            ln2,
            a2,
            ff1,
            henc,
            ln3,
            b1,
            at2,
            ln4,
            b2,
            atx,
            ln5,
            b3,
            ff2,
            hdec,
            probs,
            logprobs,
        }
    }

    /// Inference forward pass: `M x d` row distributions. Reuses a
    /// thread-local buffer for the wide feed-forward activation, which is
    /// what generation spends its time in.
    pub fn forward(&self, x: &Mat, t: usize) -> Mat {
        thread_local! {
            static FF_SCRATCH: RefCell<Mat> = RefCell::new(Mat::zeros(0, 0));
        }
        assert_eq!(x.rows(), self.config.max_tokens, "input must have M rows");
        assert_eq!(x.cols(), self.config.token_dim, "input must have d cols");
        let lean_ff = |ff: &FeedForward, input: &Mat| -> Mat {
            FF_SCRATCH.with(|s| {
                let mut hidden = s.borrow_mut();
                let (m, f) = (input.rows(), ff.w1.w.cols());
                if hidden.rows() != m || hidden.cols() != f {
                    *hidden = Mat::zeros(m, f);
                }
                for i in 0..m {
                    let xr = input.row(i);
                    let hr = hidden.row_mut(i);
                    hr.copy_from_slice(&ff.w1.b);
                    for (k, &a) in xr.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = ff.w1.w.row(k);
                        for (h, &w) in hr.iter_mut().zip(wrow) {
                            *h = a.mul_add(w, *h);
                        }
                    }
                    for h in hr.iter_mut() {
                        if *h < 0.0 {
                            *h = 0.0;
                        }
                    }
                }
                ff.w2.forward(&hidden)
            })
        };
        let h0 = self.embed_input(x, t);
        let (a1, _) = self.encoder.ln1.forward(&h0);
        let (s1, _) = self.encoder.attn.forward(&a1, &a1);
        let mut h1 = h0.clone();
        h1.add_assign(&s1);
        let (a2, _) = self.encoder.ln2.forward(&h1);
        let f1 = lean_ff(&self.encoder.ff, &a2);
        let mut henc = h1;
        henc.add_assign(&f1);
        let (b1, _) = self.decoder.ln1.forward(&h0);
        let (s2, _) = self.decoder.self_attn.forward(&b1, &b1);
        let mut g1 = h0;
        g1.add_assign(&s2);
        let (b2, _) = self.decoder.ln2.forward(&g1);
        let (c1, _) = self.decoder.cross_attn.forward(&b2, &henc);
        let mut g2 = g1;
        g2.add_assign(&c1);
        let (b3, _) = self.decoder.ln3.forward(&g2);
        let f2 = lean_ff(&self.decoder.ff, &b3);
        let mut hdec = g2;
        hdec.add_assign(&f2);
        let mut probs = self.out.forward(&hdec);
        probs.softmax_rows();
        probs
    }

    /// Backward pass given dJ/dlogits; accumulates into `grads`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Mat, grads: &mut NetGrads) {
        let dhdec = self.out.backward(&cache.hdec, dlogits, &mut grads.out);
        // Decoder FF block.
        let mut dg2 = dhdec.clone();
        let db3 =
            self.decoder.ff.backward(&cache.b3, &cache.ff2, &dhdec, &mut grads.decoder.ff);
        dg2.add_assign(&self.decoder.ln3.backward(&cache.ln5, &db3, &mut grads.decoder.ln3));
        // Cross-attention block.
        let mut dg1 = dg2.clone();
        let (db2, dhenc) = self.decoder.cross_attn.backward(
            &cache.b2,
            &cache.henc,
            &cache.atx,
            &dg2,
            &mut grads.decoder.cross_attn,
        );
        dg1.add_assign(&self.decoder.ln2.backward(&cache.ln4, &db2, &mut grads.decoder.ln2));
        // Decoder self-attention block.
        let mut dh0 = dg1.clone();
        let (dq, dkv) = self.decoder.self_attn.backward(
            &cache.b1,
            &cache.b1,
            &cache.at2,
            &dg1,
            &mut grads.decoder.self_attn,
        );
        let mut db1 = dq;
        db1.add_assign(&dkv);
        dh0.add_assign(&self.decoder.ln1.backward(&cache.ln3, &db1, &mut grads.decoder.ln1));
        // Encoder, driven by the cross-attention's key/value gradient.
        let mut dh1 = dhenc.clone();
        let da2 =
            self.encoder.ff.backward(&cache.a2, &cache.ff1, &dhenc, &mut grads.encoder.ff);
        dh1.add_assign(&self.encoder.ln2.backward(&cache.ln2, &da2, &mut grads.encoder.ln2));
        let mut dh0_enc = dh1.clone();
        let (dq, dkv) = self.encoder.attn.backward(
            &cache.a1,
            &cache.a1,
            &cache.at1,
            &dh1,
            &mut grads.encoder.attn,
        );
        let mut da1 = dq;
        da1.add_assign(&dkv);
        dh0_enc.add_assign(&self.encoder.ln1.backward(&cache.ln1, &da1, &mut grads.encoder.ln1));
        dh0.add_assign(&dh0_enc);
        // Embedding (positional table is fixed).
        grads.embed.add_assign(&cache.x.transpose_matmul(&dh0));
    }
}

/// How the per-token policy term is assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyObjective {
    /// Trust-region surrogate on the likelihood ratio h = p/p_old.
    /// `literal_min` selects min{h, 1+eps}*A instead of the product form
    /// min(h*A, clip(h)*A).
    ClippedRatio { epsilon: f64, literal_min: bool },
    /// Advantage-weighted log-likelihood (risk-seeking policy gradient).
    WeightedLogLikelihood,
}

/// One observed token the objective scores.
#[derive(Debug, Clone, Copy)]
pub struct TokenTarget {
    pub position: usize,
    pub token: TokenId,
    /// Advantage weight for this candidate.
    pub weight: f64,
    /// Probability of `token` under the epoch-start snapshot; the ratio
    /// denominator. Unused by the log-likelihood objective.
    pub old_prob: f64,
}

/// One candidate's masked input plus everything frozen about it.
pub struct SurrogateItem {
    pub input: Mat,
    pub t: usize,
    pub targets: Vec<TokenTarget>,
    /// Reference log-distributions per position (rows aligned with
    /// `input`); enables the KL penalty when present.
    pub ref_logprobs: Option<Mat>,
    /// Masked, non-PAD positions that feed the entropy bonus.
    pub entropy_positions: Vec<usize>,
}

/// A batch of items plus the scalar surrogate definition.
pub struct SurrogateBatch {
    pub items: Vec<SurrogateItem>,
    pub objective: PolicyObjective,
    /// KL penalty weight (beta); 0 disables the reference term.
    pub kl_weight: f64,
    /// Entropy bonus weight (lambda); 0 disables it.
    pub entropy_weight: f64,
    /// Multiplier on the policy and KL sums, 1/(B*alpha/100).
    pub normalizer: f64,
}

/// Diagnostics from one loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    /// Mean entropy over the entropy positions (0 when there are none).
    pub mean_entropy: f64,
    /// Count of entropy positions, for merging stats across chunks.
    pub entropy_positions: usize,
    /// Tokens skipped because the old-policy probability underflowed.
    pub skipped_tokens: usize,
    /// Tokens whose ratio fell outside the trust region.
    pub clipped_tokens: usize,
}

/// Evaluates the surrogate and its exact reverse-mode gradient.
///
/// The returned scalar is the ascent objective
/// `normalizer * sum_i sum_k [policy_k - beta*KL_k] + lambda * mean_entropy`,
/// where the entropy mean runs over all entropy positions in this batch.
pub fn loss_and_gradient(
    params: &NetParams,
    batch: &SurrogateBatch,
) -> Result<(f64, NetGrads, LossStats), NetError> {
    let mut grads = NetGrads::zeros(&params.config);
    let mut stats = LossStats::default();
    let entropy_count: usize = batch.items.iter().map(|it| it.entropy_positions.len()).sum();
    stats.entropy_positions = entropy_count;
    let ent_scale = if entropy_count > 0 {
        batch.entropy_weight / entropy_count as f64
    } else {
        0.0
    };
    let mut total = 0.0;
    let mut entropy_sum = 0.0;
    for (idx, item) in batch.items.iter().enumerate() {
        if item.input.rows() != params.config.max_tokens
            || item.input.cols() != params.config.token_dim
        {
            return Err(NetError::ShapeMismatch(format!(
                "item {idx}: input {}x{}, expected {}x{}",
                item.input.rows(),
                item.input.cols(),
                params.config.max_tokens,
                params.config.token_dim
            )));
        }
        let cache = params.forward_cached(&item.input, item.t);
        let d = params.config.token_dim;
        let mut dlogits = Mat::zeros(params.config.max_tokens, d);
        let mut item_loss = 0.0;
        for target in &item.targets {
            let k = target.position;
            let p = cache.probs.row(k);
            let lp = cache.logprobs.row(k);
            let p_tok = p[target.token];
            let dlrow = dlogits.row_mut(k);
            match batch.objective {
                PolicyObjective::ClippedRatio { epsilon, literal_min } => {
                    if target.old_prob < 1e-300 {
                        stats.skipped_tokens += 1;
                        continue;
                    }
                    let h = p_tok / target.old_prob;
                    let w = target.weight;
                    let (term, dterm_dh) = if literal_min {
                        (h.min(1.0 + epsilon) * w, if h <= 1.0 + epsilon { w } else { 0.0 })
                    } else {
                        let clipped = h.clamp(1.0 - epsilon, 1.0 + epsilon);
                        let unclipped = h * w;
                        let clipped_term = clipped * w;
                        if unclipped <= clipped_term {
                            (unclipped, w)
                        } else {
                            (clipped_term, if h == clipped { w } else { 0.0 })
                        }
                    };
                    if !(1.0 - epsilon..=1.0 + epsilon).contains(&h) {
                        stats.clipped_tokens += 1;
                    }
                    item_loss += term;
                    // d(term)/d(logit_j) = dterm_dh * h * (1[j=token] - p_j)
                    let coeff = batch.normalizer * dterm_dh * h;
                    if coeff != 0.0 {
                        for (j, dl) in dlrow.iter_mut().enumerate() {
                            *dl += coeff * (((j == target.token) as u8 as f64) - p[j]);
                        }
                    }
                }
                PolicyObjective::WeightedLogLikelihood => {
                    let w = target.weight;
                    item_loss += w * lp[target.token];
                    if w != 0.0 {
                        let coeff = batch.normalizer * w;
                        for (j, dl) in dlrow.iter_mut().enumerate() {
                            *dl += coeff * (((j == target.token) as u8 as f64) - p[j]);
                        }
                    }
                }
            }
            // Full categorical KL(current || reference) at this position.
            if batch.kl_weight != 0.0 {
                if let Some(ref_lp) = &item.ref_logprobs {
                    let rrow = ref_lp.row(k);
                    let mut kl = 0.0;
                    for j in 0..d {
                        kl += p[j] * (lp[j] - rrow[j]);
                    }
                    item_loss -= batch.kl_weight * kl;
                    let coeff = -batch.normalizer * batch.kl_weight;
                    for (j, dl) in dlrow.iter_mut().enumerate() {
                        *dl += coeff * p[j] * ((lp[j] - rrow[j]) - kl);
                    }
                }
            }
        }
        let mut scaled = item_loss * batch.normalizer;
        for &k in &item.entropy_positions {
            let p = cache.probs.row(k);
            let lp = cache.logprobs.row(k);
            let h: f64 = -dot(p, lp);
            entropy_sum += h;
            if ent_scale != 0.0 {
                scaled += ent_scale * h;
                let dlrow = dlogits.row_mut(k);
                for (j, dl) in dlrow.iter_mut().enumerate() {
                    *dl -= ent_scale * p[j] * (lp[j] + h);
                }
            }
        }
        if !scaled.is_finite() {
            return Err(NetError::NonFiniteLoss(idx));
        }
        total += scaled;
        params.backward(&cache, &dlogits, &mut grads);
    }
    if entropy_count > 0 {
        stats.mean_entropy = entropy_sum / entropy_count as f64;
    }
    Ok((total, grads, stats))
}

/// Adam optimizer state; moments mirror the trainable blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: NetGrads,
    pub v: NetGrads,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(config: &NetConfig, learning_rate: f64) -> Self {
        AdamState {
            m: NetGrads::zeros(config),
            v: NetGrads::zeros(config),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction. Descends along `grad`; callers
/// maximizing an objective pass the negated ascent gradient.
pub fn adam_step(params: &mut NetParams, grad: &NetGrads, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut pblocks = params.blocks_mut();
    let gblocks = grad.blocks();
    let mut mblocks = state.m.blocks_mut();
    let mut vblocks = state.v.blocks_mut();
    for i in 0..pblocks.len() {
        let p = &mut pblocks[i].1;
        let g = gblocks[i].1;
        let m = &mut mblocks[i].1;
        let v = &mut vblocks[i].1;
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Writes the checkpoint format described in the module docs.
pub fn save_checkpoint(params: &NetParams, path: &Path) -> Result<(), NetError> {
    #[derive(Serialize)]
    struct Header<'a> {
        format: &'a str,
        version: u32,
        embed_dim: usize,
        ff_dim: usize,
        token_dim: usize,
        max_tokens: usize,
        blocks: Vec<(String, usize)>,
    }
    let blocks = params.blocks();
    let header = Header {
        format: "ddsr-net",
        version: 1,
        embed_dim: params.config.embed_dim,
        ff_dim: params.config.ff_dim,
        token_dim: params.config.token_dim,
        max_tokens: params.config.max_tokens,
        blocks: blocks.iter().map(|(n, b)| (n.to_string(), b.len())).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, block) in blocks {
        for v in block {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams, NetError> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
        embed_dim: usize,
        ff_dim: usize,
        token_dim: usize,
        max_tokens: usize,
        blocks: Vec<(String, usize)>,
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format != "ddsr-net" || header.version != 1 {
        return Err(NetError::BadCheckpoint(format!(
            "unsupported format {}/{}",
            header.format, header.version
        )));
    }
    let config =
        NetConfig::new(header.embed_dim, header.ff_dim, header.token_dim, header.max_tokens);
    let mut params = NetParams::init(config, 0)?;
    let expected: Vec<(String, usize)> =
        params.blocks().iter().map(|(n, b)| (n.to_string(), b.len())).collect();
    if expected != header.blocks {
        return Err(NetError::BadCheckpoint("block layout mismatch".into()));
    }
    for (name, block) in params.blocks_mut() {
        for v in block.iter_mut() {
            let mut buf = [0u8; 8];
            file.read_exact(&mut buf)
                .map_err(|e| NetError::BadCheckpoint(format!("truncated block {name}: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(params)
}

/// Anything that maps a masked token matrix and a step to per-position
/// distributions over the vocabulary.
pub trait Denoiser {
    fn predict(&self, input: &Mat, t: usize) -> Mat;
}

impl Denoiser for NetParams {
    fn predict(&self, input: &Mat, t: usize) -> Mat {
        self.forward(input, t)
    }
}
