use crate::encoder::TransformerLayer;
use crate::numerics::{Bound, NumericsError, Tape, Var};
use crate::scalar::Scalar;
use crate::Result;

use super::GegaError;

/// Entity embedding: coordinate-wise logsumexp over the rows of `hidden` at
/// the mention positions. Returns `1 x d`.
pub fn entity_embed<T: Scalar>(tape: &mut Tape<T>, hidden: Var, positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(GegaError::NoMentions.into());
    }
    let rows = tape.gather_rows(hidden, positions)?;
    Ok(tape.logsumexp(rows, 0)?)
}

/// Stacks the embeddings of several entities into `entities x d`.
pub fn entity_embeddings<T: Scalar>(tape: &mut Tape<T>, hidden: Var, mentions: &[Vec<usize>]) -> Result<Var> {
    let rows = mentions
        .iter()
        .map(|m| entity_embed(tape, hidden, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&rows, 0)?)
}

/// Per-head adjacency `softmax(X Wq (X Wk)^T / sqrt(d))` with `X = x`.
///
/// `wq[i]` and `wk[i]` are `d x d_head`.
pub fn attention_concentration<T: Scalar>(tape: &mut Tape<T>, x: Var, wq: &[Var], wk: &[Var]) -> Result<Vec<Var>> {
    if wq.len() != wk.len() || wq.is_empty() {
        return Err(GegaError::Heads {
            expected: wq.len(),
            actual: wk.len(),
        }
        .into());
    }
    let d = tape.shape(x)[1];
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    wq.iter()
        .zip(wk)
        .map(|(&q, &k)| {
            let q = tape.matmul(x, q)?;
            let k = tape.matmul(x, k)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            Ok(tape.softmax(s, 1)?)
        })
        .collect()
}

/// Multi-head graph convolution with a residual chain per head.
///
/// For head `i` with input slice `x_i` (columns `i*dh..(i+1)*dh`):
/// `h_0 = x_i`, `h_l = relu(adj_i x_i W_{i,l}) + h_{l-1}`. Heads are
/// concatenated and projected by `wo` (`d x d`).
pub fn multi_graphconv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    adjacency: &[Var],
    weights: &[Vec<Var>],
    wo: Var,
) -> Result<Var> {
    let heads = adjacency.len();
    if heads == 0 || weights.len() != heads {
        return Err(GegaError::Heads {
            expected: heads,
            actual: weights.len(),
        }
        .into());
    }
    let d = tape.shape(x)[1];
    if !d.is_multiple_of(heads) {
        return Err(NumericsError::Indivisible {
            op: "multi_graphconv",
            dim: d,
            groups: heads,
        }
        .into());
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for (i, (&adj, ws)) in adjacency.iter().zip(weights).enumerate() {
        if ws.is_empty() {
            return Err(GegaError::NoGraphLayers.into());
        }
        let xi = tape.slice(x, 1, i * dh, (i + 1) * dh)?;
        let ax = tape.matmul(adj, xi)?;
        let mut h = xi;
        for &w in ws {
            let m = tape.matmul(ax, w)?;
            let m = tape.relu(m);
            h = tape.add(m, h)?;
        }
        outs.push(h);
    }
    let cat = tape.concat(&outs, 1)?;
    Ok(tape.matmul(cat, wo)?)
}

/// Output of the averaging transformer stack.
#[derive(Debug, Clone)]
pub struct EncStack {
    pub hidden: Var,
    pub attention: Var,
    /// Every layer's hidden output, in order.
    pub layer_hidden: Vec<Var>,
}

/// Runs the stack and averages the last three layers: hidden states are
/// averaged directly; attention is averaged over heads, then over layers,
/// then every row is renormalized.
pub fn transformer_enc<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layers: &[TransformerLayer],
    x: Var,
) -> Result<EncStack> {
    if layers.len() < 3 {
        return Err(crate::Error::Config(format!(
            "enc_layers must be at least 3, got {}",
            layers.len()
        )));
    }
    let mut h = x;
    let mut layer_hidden = Vec::with_capacity(layers.len());
    let mut layer_attn = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, heads) = layer.forward(tape, bound, h)?;
        let mut acc = heads[0];
        for &a in &heads[1..] {
            acc = tape.add(acc, a)?;
        }
        let inv = T::one() / T::from_usize_lossy(heads.len());
        layer_attn.push(tape.scale(acc, inv));
        layer_hidden.push(out);
        h = out;
    }
    let third = T::one() / T::lit(3.0);
    let k = layers.len() - 3;
    let hs = tape.add(layer_hidden[k], layer_hidden[k + 1])?;
    let hs = tape.add(hs, layer_hidden[k + 2])?;
    let hidden = tape.scale(hs, third);
    let a = tape.add(layer_attn[k], layer_attn[k + 1])?;
    let a = tape.add(a, layer_attn[k + 2])?;
    let a = tape.scale(a, third);
    let rows = tape.sum(a, 1)?;
    let attention = tape.div(a, rows)?;
    Ok(EncStack {
        hidden,
        attention,
        layer_hidden,
    })
}

/// Token and sentence importance for a batch of entity pairs.
#[derive(Debug, Clone)]
pub struct PairSignals {
    /// `pairs x tokens`, rows sum to one.
    pub q: Var,
    /// `pairs x sentences`, rows sum to one.
    pub p: Var,
    /// Pairs whose attention product vanished and fell back to uniform.
    pub degenerate: Vec<bool>,
}

/// Token layout needed by [`pair_signals`].
#[derive(Debug, Clone, Copy)]
pub struct TokenLayout<'a> {
    pub num_tokens: usize,
    /// Per sentence `[start, end)` in token coordinates.
    pub sentence_spans: &'a [(usize, usize)],
}

impl TokenLayout<'_> {
    /// Tokens inside some sentence (everything except the boundary tokens).
    pub fn content_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_tokens];
        for &(s, e) in self.sentence_spans {
            m[s..e].iter_mut().for_each(|x| *x = true);
        }
        m
    }
}

/// For each `(head, tail)` pair: entity attention rows are the mean of the
/// attention rows at the entity's mention positions; `q` is their product
/// restricted to sentence tokens and normalized; `p_j` sums `q` over sentence
/// `j`. If the product has no mass, `q` is uniform over sentence tokens.
pub fn pair_signals<T: Scalar>(
    tape: &mut Tape<T>,
    attention: Var,
    mentions: &[Vec<usize>],
    pairs: &[(usize, usize)],
    layout: TokenLayout<'_>,
) -> Result<PairSignals> {
    let n = layout.num_tokens;
    if tape.shape(attention) != [n, n] {
        return Err(NumericsError::ShapeMismatch {
            op: "pair_signals",
            expected: vec![n, n],
            actual: tape.shape(attention).to_vec(),
        }
        .into());
    }
    let num_ent = mentions.len();
    let mut pool = vec![T::zero(); num_ent * n];
    for (e, ms) in mentions.iter().enumerate() {
        if ms.is_empty() {
            return Err(GegaError::NoMentions.into());
        }
        let w = T::one() / T::from_usize_lossy(ms.len());
        for &m in ms {
            if m >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pair_signals",
                    index: m,
                    len: n,
                }
                .into());
            }
            pool[e * n + m] += w;
        }
    }
    let pool = tape.constant(vec![num_ent, n], pool)?;
    let ent_rows = tape.matmul(pool, attention)?;
    let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a_s = tape.gather_rows(ent_rows, &heads)?;
    let a_o = tape.gather_rows(ent_rows, &tails)?;
    let prod = tape.mul(a_s, a_o)?;
    let content = layout.content_mask();
    let keep: Vec<bool> = (0..pairs.len()).flat_map(|_| content.iter().copied()).collect();
    let prod = tape.where_mask(prod, &keep, T::zero())?;

    let mass: Vec<T> = tape.value(prod).chunks(n).map(|r| r.iter().copied().sum()).collect();
    let degenerate: Vec<bool> = mass.iter().map(|&s| !(s > T::min_positive_value())).collect();
    let prod = if degenerate.iter().any(|&d| d) {
        let fill: Vec<T> = degenerate
            .iter()
            .flat_map(|&d| content.iter().map(move |&c| if d && c { T::one() } else { T::zero() }))
            .collect();
        let fill = tape.constant(vec![pairs.len(), n], fill)?;
        tape.add(prod, fill)?
    } else {
        prod
    };
    let rows = tape.sum(prod, 1)?;
    let q = tape.div(prod, rows)?;

    let ns = layout.sentence_spans.len();
    let mut member = vec![T::zero(); n * ns];
    for (j, &(s, e)) in layout.sentence_spans.iter().enumerate() {
        for t in s..e {
            member[t * ns + j] = T::one();
        }
    }
    let member = tape.constant(vec![n, ns], member)?;
    let p = tape.matmul(q, member)?;
    Ok(PairSignals { q, p, degenerate })
}

/// `tanh([e ; H^T q] W + b)` row-wise; `e` is `pairs x d`, `q` is
/// `pairs x tokens`, `w` is `2d x d`.
pub fn pair_context<T: Scalar>(tape: &mut Tape<T>, e: Var, hidden: Var, q: Var, w: Var, b: Var) -> Result<Var> {
    let ctx = tape.matmul(q, hidden)?;
    let cat = tape.concat(&[e, ctx], 1)?;
    let y = tape.matmul(cat, w)?;
    let y = tape.add(y, b)?;
    Ok(tape.tanh(y))
}

/// Grouped bilinear scores `sum_g c_s,g^T W_r,g c_o,g + b_r` for every
/// relation `r`. `w` is `(groups * k * k) x classes`, `b` is `1 x classes`.
pub fn relation_scores<T: Scalar>(tape: &mut Tape<T>, cs: Var, co: Var, groups: usize, w: Var, b: Var) -> Result<Var> {
    let outer = tape.grouped_outer(cs, co, groups)?;
    let s = tape.matmul(outer, w)?;
    Ok(tape.add(s, b)?)
}

/// Relations scoring strictly above the threshold class (index 0), keeping
/// the `cap` highest. Returned ids are ascending.
pub fn decide_relations<T: Scalar>(scores: &[T], cap: usize) -> Vec<usize> {
    let Some(&th) = scores.first() else {
        return Vec::new();
    };
    let mut above: Vec<usize> = (1..scores.len()).filter(|&r| scores[r] > th).collect();
    above.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    above.truncate(cap);
    above.sort_unstable();
    above
}

/// Sentence ids with importance strictly above `threshold`, ascending.
pub fn select_evidence<T: Scalar>(p: &[T], threshold: T) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(j, _)| j)
        .collect()
}
