//! Context encoders producing token embeddings `H` and per-head attention
//! `A`, plus the two-window scheme for inputs longer than the encoder's
//! position table.

mod layer;

pub use layer::{LayerNorm, Linear, SelfAttention, TransformerLayer};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{init_uniform, Bound, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("token id {token} out of vocabulary of size {vocab_size}")]
    TokenOutOfVocabulary { token: usize, vocab_size: usize },
    #[error("input of {len} tokens is unsupported (at most {max} with window {window})")]
    UnsupportedLength { len: usize, max: usize, window: usize },
    #[error("input of {len} tokens exceeds the position table of {window}")]
    TooLong { len: usize, window: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid encoder configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub max_window: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 2,
            num_layers: 2,
            vocab_size: 0,
            max_window: 512,
            ffn_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.into()));
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("d_model must be a positive multiple of num_heads");
        }
        if self.max_window < 2 {
            return bad("max_window must be at least 2");
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 {
            return bad("vocab_size and ffn_dim must be positive");
        }
        Ok(())
    }
}

/// `H` is `tokens x d_model`; `attention[h]` is `tokens x tokens`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

/// Anything that maps token ids to contextual embeddings and attention.
pub trait ContextEncoder<T: Scalar> {
    fn d_model(&self) -> usize;
    fn num_heads(&self) -> usize;
    /// Longest input `encode` accepts.
    fn max_window(&self) -> usize;
    fn encode(&self, tape: &mut Tape<T>, bound: &Bound, token_ids: &[usize]) -> Result<EncoderOutput>;
}

/// Small trainable transformer: token and learned position embeddings,
/// embedding normalization, then standard post-norm layers.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<TransformerLayer>,
}

impl ToyEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Encoder;
        let d = config.d_model;
        let token_embedding = store.add(
            "encoder.token_embedding",
            g,
            init_uniform(rng, vec![config.vocab_size, d], d),
        );
        let position_embedding = store.add(
            "encoder.position_embedding",
            g,
            init_uniform(rng, vec![config.max_window, d], d),
        );
        let embedding_norm = LayerNorm::new(store, "encoder.embedding_norm", g, d);
        let layers = (0..config.num_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    rng,
                    &format!("encoder.layer{i}"),
                    g,
                    d,
                    config.num_heads,
                    config.ffn_dim,
                    true,
                )
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            embedding_norm,
            layers,
        })
    }
}

impl<T: Scalar> ContextEncoder<T> for ToyEncoder {
    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn num_heads(&self) -> usize {
        self.config.num_heads
    }

    fn max_window(&self) -> usize {
        self.config.max_window
    }

    fn encode(&self, tape: &mut Tape<T>, bound: &Bound, token_ids: &[usize]) -> Result<EncoderOutput> {
        let n = token_ids.len();
        if n == 0 {
            return Err(EncoderError::Empty.into());
        }
        if n > self.config.max_window {
            return Err(EncoderError::TooLong {
                len: n,
                window: self.config.max_window,
            }
            .into());
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(EncoderError::TokenOutOfVocabulary {
                token: bad,
                vocab_size: self.config.vocab_size,
            }
            .into());
        }
        let tok = tape.gather_rows(bound.var(self.token_embedding), token_ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(bound.var(self.position_embedding), &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = self.embedding_norm.forward(tape, bound, x)?;
        let mut attention = Vec::new();
        for layer in &self.layers {
            let (out, att) = layer.forward(tape, bound, x)?;
            x = out;
            attention = att;
        }
        if attention.is_empty() {
            // Zero-layer encoder: identity attention keeps the contract.
            let eye: Vec<T> = (0..n * n)
                .map(|i| if i / n == i % n { T::one() } else { T::zero() })
                .collect();
            let a = tape.constant(vec![n, n], eye)?;
            attention = vec![a; self.config.num_heads];
        }
        Ok(EncoderOutput { hidden: x, attention })
    }
}

/// Parameter-free encoder with closed-form outputs, for exercising the
/// windowing arithmetic.
///
/// For window-local position `i` and token id `t`:
/// `H[i][k] = i + t / 1000 + k / 100`, and head `h` attention is
/// `A[i][j] ∝ 1 + (h + 1) * ((i + 2 j) mod 7)`.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub d_model: usize,
    pub num_heads: usize,
    pub max_window: usize,
}

impl<T: Scalar> ContextEncoder<T> for StubEncoder {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn max_window(&self) -> usize {
        self.max_window
    }

    fn encode(&self, tape: &mut Tape<T>, _bound: &Bound, token_ids: &[usize]) -> Result<EncoderOutput> {
        let n = token_ids.len();
        if n == 0 {
            return Err(EncoderError::Empty.into());
        }
        if n > self.max_window {
            return Err(EncoderError::TooLong {
                len: n,
                window: self.max_window,
            }
            .into());
        }
        let d = self.d_model;
        let h: Vec<T> = (0..n * d)
            .map(|x| {
                let (i, k) = (x / d, x % d);
                T::lit(i as f64 + token_ids[i] as f64 / 1000.0 + k as f64 / 100.0)
            })
            .collect();
        let hidden = tape.constant(vec![n, d], h)?;
        let attention = (0..self.num_heads)
            .map(|head| {
                let mut a = vec![T::zero(); n * n];
                for i in 0..n {
                    let row = &mut a[i * n..(i + 1) * n];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = T::lit(1.0 + (head + 1) as f64 * ((i + 2 * j) % 7) as f64);
                    }
                    let s: T = row.iter().copied().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                tape.constant(vec![n, n], a)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EncoderOutput { hidden, attention })
    }
}

/// Encodes inputs of any supported length.
///
/// Inputs up to `max_window` go straight to the encoder. Longer inputs (up to
/// `2 * max_window - 1`) are encoded as the two windows `[0, W)` and
/// `[len - W, len)`. Rows of `H` in the overlap are the mean of both windows.
/// Attention entries seen by both windows are averaged, entries seen by one
/// are kept, entries for token pairs never in the same window are zero, and
/// every row is renormalized to sum to one.
pub fn encode_windowed<T: Scalar, E: ContextEncoder<T> + ?Sized>(
    encoder: &E,
    tape: &mut Tape<T>,
    bound: &Bound,
    token_ids: &[usize],
) -> Result<EncoderOutput> {
    let n = token_ids.len();
    let w = encoder.max_window();
    if n <= w {
        return encoder.encode(tape, bound, token_ids);
    }
    if n > 2 * w - 1 {
        return Err(EncoderError::UnsupportedLength {
            len: n,
            max: 2 * w - 1,
            window: w,
        }
        .into());
    }
    let off = n - w;
    let first = encoder.encode(tape, bound, &token_ids[..w])?;
    let second = encoder.encode(tape, bound, &token_ids[off..])?;
    let d = encoder.d_model();

    let row_count: Vec<T> = (0..n)
        .map(|i| T::from_usize_lossy(usize::from(i < w) + usize::from(i >= off)))
        .collect();
    let row_count = tape.constant(vec![n, 1], row_count)?;
    let h1 = tape.pad2d(first.hidden, n, d, 0, 0)?;
    let h2 = tape.pad2d(second.hidden, n, d, off, 0)?;
    let hs = tape.add(h1, h2)?;
    let hidden = tape.div(hs, row_count)?;

    let pair_count: Vec<T> = (0..n * n)
        .map(|x| {
            let (i, j) = (x / n, x % n);
            let c = usize::from(i < w && j < w) + usize::from(i >= off && j >= off);
            T::from_usize_lossy(c.max(1))
        })
        .collect();
    let pair_count = tape.constant(vec![n, n], pair_count)?;
    let mut attention = Vec::with_capacity(first.attention.len());
    for (&a1, &a2) in first.attention.iter().zip(&second.attention) {
        let p1 = tape.pad2d(a1, n, n, 0, 0)?;
        let p2 = tape.pad2d(a2, n, n, off, off)?;
        let s = tape.add(p1, p2)?;
        let avg = tape.div(s, pair_count)?;
        let rows = tape.sum(avg, 1)?;
        attention.push(tape.div(avg, rows)?);
    }
    Ok(EncoderOutput { hidden, attention })
}
