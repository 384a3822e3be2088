//! Multi-head scaled dot-product attention with padding masks, plus the
//! affine projection layer used throughout the model.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive score for masked key positions.
pub const MASK_SCORE: f64 = -1e30;

/// Affine map `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: store.glorot(format!("{name}.weight"), inputs, outputs, rng),
            bias: store.zeros(format!("{name}.bias"), 1, outputs),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, w) = tape.value(x).dims2()?;
        if w != self.inputs {
            return Err(Error::Shape {
                op: "linear",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.inputs, self.outputs],
            });
        }
        let wv = tape.param(self.weight)?;
        let bv = tape.param(self.bias)?;
        let xw = tape.matmul(x, wv)?;
        tape.add_row(xw, bv)
    }
}

/// Learned projection layer `Proj(·)`: a width-preserving [`Linear`].
pub fn project(tape: &mut Tape, x: Var, proj: &Linear) -> Result<Var> {
    proj.forward(tape, x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), 1, width),
            bias: store.zeros(format!("{name}.bias"), 1, width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain)?;
        let b = tape.param(self.bias)?;
        tape.layer_norm(x, g, b)
    }
}

/// Projections for one attention sublayer. Per-head query/key/value maps are
/// the column blocks of the `d×d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
    /// When present the sublayer is post-norm: `LN(q_in + Attn(q_in, kv_in))`.
    pub norm: Option<LayerNormParams>,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::without_norm(store, name, width, heads, rng)?;
        p.norm = Some(LayerNormParams::new(store, &format!("{name}.norm"), width));
        Ok(p)
    }

    pub fn without_norm<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
            width,
            norm: None,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Valid (`true`) vs padded (`false`) key positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    valid: Vec<bool>,
}

impl TokenMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|&v| v) {
            return Err(Error::contract("token mask has no valid position"));
        }
        Ok(Self { valid })
    }

    pub fn all(n: usize) -> Self {
        Self {
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_full(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Concatenation `[self; other]`.
    pub fn concat(&self, other: &TokenMask) -> TokenMask {
        let mut valid = self.valid.clone();
        valid.extend_from_slice(&other.valid);
        TokenMask { valid }
    }

    fn score_row(&self) -> Tensor {
        let data = self
            .valid
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_SCORE })
            .collect();
        Tensor::row_vector(data).expect("non-empty mask")
    }
}

/// Attention result with the per-head weight matrices (`m×n` each).
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `softmax(QKᵀ/√d_h + mask)·V` per head, heads concatenated and
/// output-projected, with the residual/norm wrapper when configured.
pub fn attend(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    params: &AttentionParams,
    mask: Option<&TokenMask>,
) -> Result<Attended> {
    let (_, dq) = tape.value(q_in).dims2()?;
    let (n, dk) = tape.value(kv_in).dims2()?;
    if dq != params.width || dk != params.width {
        return Err(Error::Shape {
            op: "attention",
            lhs: tape.value(q_in).shape().to_vec(),
            rhs: tape.value(kv_in).shape().to_vec(),
        });
    }
    let mask_row = match mask {
        Some(mask) if mask.len() != n => {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![n],
                rhs: vec![mask.len()],
            })
        }
        Some(mask) if !mask.as_slice().iter().any(|&v| v) => {
            return Err(Error::contract("fully masked key set"))
        }
        Some(mask) if !mask.is_full() => Some(tape.constant(mask.score_row())?),
        _ => None,
    };

    let q = params.query.forward(tape, q_in)?;
    let k = params.key.forward(tape, kv_in)?;
    let v = params.value.forward(tape, kv_in)?;
    let dh = params.head_width();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let raw = tape.matmul_bt(qh, kh)?;
        let mut scores = tape.scale(raw, scale)?;
        if let Some(m) = mask_row {
            scores = tape.add_row(scores, m)?;
        }
        let w = tape.softmax_rows(scores)?;
        weights.push(w);
        heads.push(tape.matmul(w, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let mut output = params.output.forward(tape, joined)?;
    if let Some(norm) = &params.norm {
        let res = tape.add(q_in, output)?;
        output = norm.forward(tape, res)?;
    }
    Ok(Attended { output, weights })
}

/// Cross-attention `CA(q_in, kv_in, kv_in)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    params: &AttentionParams,
    mask: Option<&TokenMask>,
) -> Result<Var> {
    attend(tape, q_in, kv_in, params, mask).map(|a| a.output)
}

/// Self-attention `SA(x)`: queries, keys and values all from `x`.
pub fn self_attention(tape: &mut Tape, x: Var, params: &AttentionParams, mask: Option<&TokenMask>) -> Result<Var> {
    multi_head_attention(tape, x, x, params, mask)
}
