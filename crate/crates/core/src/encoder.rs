//! Pre-norm transformer encoder layers that expose their attention weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::patch::TokenSequence;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layers (pre-layers plus the last), got {}",
                self.layers
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            bias: store.add_full(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        tape.add_tiled(y, bound[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_full(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound[self.gain], bound[self.bias], LN_EPS)
    }
}

/// Parameters of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub norm1: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LayerParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        Self {
            norm1: Norm::init(store, &format!("{prefix}.norm1"), d),
            query: Linear::init(store, &format!("{prefix}.attn.query"), d, d, rng),
            key: Linear::init(store, &format!("{prefix}.attn.key"), d, d, rng),
            value: Linear::init(store, &format!("{prefix}.attn.value"), d, d, rng),
            out: Linear::init(store, &format!("{prefix}.attn.out"), d, d, rng),
            norm2: Norm::init(store, &format!("{prefix}.norm2"), d),
            fc1: Linear::init(store, &format!("{prefix}.mlp.fc1"), d, hidden, rng),
            fc2: Linear::init(store, &format!("{prefix}.mlp.fc2"), hidden, d, rng),
        }
    }
}

/// Multi-head self-attention followed by the output projection. Returns the
/// projected tokens and the attention node, whose recorded weights are
/// available through [`Tape::attention_probs`].
pub fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    x: TokenSequence,
    p: &LayerParams,
    heads: usize,
) -> Result<(TokenSequence, Var)> {
    let q = p.query.apply(tape, bound, x.tokens)?;
    let k = p.key.apply(tape, bound, x.tokens)?;
    let v = p.value.apply(tape, bound, x.tokens)?;
    let attn = tape.attention(q, k, v, x.batch, heads)?;
    let out = p.out.apply(tape, bound, attn)?;
    Ok((TokenSequence { tokens: out, ..x }, attn))
}

/// `z' = MSA(LN(z)) + z`, then `z_out = MLP(LN(z')) + z'`.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    z: TokenSequence,
    p: &LayerParams,
    heads: usize,
) -> Result<(TokenSequence, Var)> {
    let normed = p.norm1.apply(tape, bound, z.tokens)?;
    let (attended, attn) = mhsa(tape, bound, TokenSequence { tokens: normed, ..z }, p, heads)?;
    let mid = tape.add(attended.tokens, z.tokens)?;

    let normed = p.norm2.apply(tape, bound, mid)?;
    let hidden = p.fc1.apply(tape, bound, normed)?;
    let hidden = tape.gelu(hidden);
    let mlp = p.fc2.apply(tape, bound, hidden)?;
    let out = tape.add(mlp, mid)?;
    Ok((TokenSequence { tokens: out, ..z }, attn))
}

/// Run `layers` in order, returning the final tokens and each layer's
/// attention node.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    z0: TokenSequence,
    layers: &[LayerParams],
    heads: usize,
) -> Result<(TokenSequence, Vec<Var>)> {
    let mut z = z0;
    let mut attn = Vec::with_capacity(layers.len());
    for p in layers {
        let (next, a) = encoder_layer(tape, bound, z, p, heads)?;
        z = next;
        attn.push(a);
    }
    Ok((z, attn))
}

/// Per-layer, per-head attention matrices of one sequence, earliest layer first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<T: Scalar = f32> {
    layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> AttentionStack<T> {
    /// Build from `layers[l][h]`, each an `n×n` matrix; all must agree in
    /// head count and size.
    pub fn new(layers: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        let first = layers
            .first()
            .and_then(|l| l.first())
            .ok_or_else(|| Error::Contract("attention stack needs at least one layer and head".into()))?;
        let size = first.shape().to_vec();
        if size.len() != 2 || size[0] != size[1] {
            return Err(Error::shape("attention stack", &size, &[size[0], size[0]]));
        }
        let heads = layers[0].len();
        for layer in &layers {
            if layer.len() != heads {
                return Err(Error::shape("attention stack heads", &[heads], &[layer.len()]));
            }
            for m in layer {
                if m.shape() != size.as_slice() {
                    return Err(Error::shape("attention stack", &size, m.shape()));
                }
            }
        }
        Ok(Self { layers })
    }

    /// Collect sequence `b`'s matrices from attention nodes recorded on `tape`.
    pub fn from_tape(tape: &Tape<T>, attn: &[Var], b: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(attn.len());
        for &a in attn {
            let w = tape
                .attention_weights(a)
                .ok_or_else(|| Error::Contract("var is not an attention node".into()))?;
            if b >= w.batch {
                return Err(Error::Index {
                    what: "sequence",
                    index: b,
                    limit: w.batch,
                });
            }
            let heads = (0..w.heads)
                .map(|h| Tensor::new([w.seq, w.seq], w.matrix(b, h).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            layers.push(heads);
        }
        Self::new(layers)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].len()
    }

    /// Side length `N+1` of every matrix.
    pub fn size(&self) -> usize {
        self.layers[0][0].shape()[0]
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &Tensor<T> {
        &self.layers[layer][head]
    }

    pub fn layers(&self) -> &[Vec<Tensor<T>>] {
        &self.layers
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.size();
        self.layers
            .iter()
            .flatten()
            .flat_map(|m| {
                m.data()
                    .chunks(n)
                    .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}
