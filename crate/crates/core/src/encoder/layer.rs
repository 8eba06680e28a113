use rand::Rng;

use crate::numerics::{init_uniform, Bound, DiffTensor, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::Result;

pub(crate) const LN_EPS: f64 = 1e-12;

/// Affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init_uniform(rng, vec![fan_in, fan_out], fan_in));
        let bias = store.add(format!("{name}.bias"), group, init_uniform(rng, vec![1, fan_out], fan_in));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        Ok(tape.add(y, bound.var(self.bias))?)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        let ones = DiffTensor::param(vec![1, dim], vec![T::one(); dim]).expect("dim > 0");
        let zeros = DiffTensor::param(vec![1, dim], vec![T::zero(); dim]).expect("dim > 0");
        Self {
            gain: store.add(format!("{name}.gain"), group, ones),
            shift: store.add(format!("{name}.shift"), group, zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, T::lit(LN_EPS))?;
        let s = tape.mul(n, bound.var(self.gain))?;
        Ok(tape.add(s, bound.var(self.shift))?)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        heads: usize,
    ) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), group, d_model, d_model),
            key: Linear::new(store, rng, &format!("{name}.key"), group, d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.value"), group, d_model, d_model),
            output: Linear::new(store, rng, &format!("{name}.output"), group, d_model, d_model),
            heads,
            d_model,
        }
    }

    /// Returns the attended output and the per-head attention matrices.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, bound, x)?;
        let k = self.key.forward(tape, bound, x)?;
        let v = self.value.forward(tape, bound, x)?;
        let dk = self.d_model / self.heads;
        let scale = T::one() / T::from_usize_lossy(dk).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = tape.slice(q, 1, a, b)?;
            let kh = tape.slice(k, 1, a, b)?;
            let vh = tape.slice(v, 1, a, b)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let p = tape.softmax(s, 1)?;
            outs.push(tape.matmul(p, vh)?);
            attn.push(p);
        }
        let cat = tape.concat(&outs, 1)?;
        Ok((self.output.forward(tape, bound, cat)?, attn))
    }
}

/// Post-norm encoder layer: `la = LN(x + attn(x))`, `out = la + ffn(la)`,
/// optionally followed by a second normalization.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub attention: SelfAttention,
    pub norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub output_norm: Option<LayerNorm>,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        output_norm: bool,
    ) -> Self {
        Self {
            attention: SelfAttention::new(store, rng, &format!("{name}.attn"), group, d_model, heads),
            norm: LayerNorm::new(store, &format!("{name}.norm"), group, d_model),
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), group, d_model, ffn_dim),
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), group, ffn_dim, d_model),
            output_norm: output_norm.then(|| LayerNorm::new(store, &format!("{name}.out_norm"), group, d_model)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let (att, heads) = self.attention.forward(tape, bound, x)?;
        let res = tape.add(x, att)?;
        let la = self.norm.forward(tape, bound, res)?;
        let hidden = self.ffn_in.forward(tape, bound, la)?;
        let hidden = tape.relu(hidden);
        let ff = self.ffn_out.forward(tape, bound, hidden)?;
        let mut out = tape.add(la, ff)?;
        if let Some(n) = &self.output_norm {
            out = n.forward(tape, bound, out)?;
        }
        Ok((out, heads))
    }
}
