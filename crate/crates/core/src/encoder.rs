//! Pre-norm transformer encoder that exposes every layer's output embeddings
//! and per-head self-attention weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::EncodedInput;
use crate::error::{Error, Result};
use crate::model::{Model, Pass};
use crate::tensor::Tensor;

/// `(heads × tokens × tokens)` attention weights; axes are (head, query, key).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Tensor", into = "Tensor")]
pub struct AttentionStack(Tensor);

impl AttentionStack {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Shape(format!("attention stack must be (H, T, T), got {s:?}")));
        }
        Ok(Self(t))
    }

    pub fn num_heads(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn weight(&self, head: usize, query: usize, key: usize) -> f64 {
        let t = self.num_tokens();
        self.0.data()[(head * t + query) * t + key]
    }

    /// Row-major `T×T` matrix of one head.
    pub fn head(&self, head: usize) -> &[f64] {
        let t = self.num_tokens();
        &self.0.data()[head * t * t..(head + 1) * t * t]
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let t = self.num_tokens();
        &self.head(head)[query * t..(query + 1) * t]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Leading `len × len` block of every head.
    pub fn crop(&self, len: usize) -> Result<Self> {
        let (h, t) = (self.num_heads(), self.num_tokens());
        if len > t || len == 0 {
            return Err(Error::Shape(format!("cannot crop {t} tokens to {len}")));
        }
        let mut data = Vec::with_capacity(h * len * len);
        for head in 0..h {
            for q in 0..len {
                data.extend_from_slice(&self.row(head, q)[..len]);
            }
        }
        Self::new(Tensor::from_parts(vec![h, len, len], data))
    }

    /// Concatenates stacks along the head axis.
    pub fn concat_heads(parts: &[&AttentionStack]) -> Result<Self> {
        let t = parts.first().map(|p| p.num_tokens()).ok_or_else(|| Error::Shape("no stacks".into()))?;
        if parts.iter().any(|p| p.num_tokens() != t) {
            return Err(Error::Shape("token counts differ".into()));
        }
        let heads = parts.iter().map(|p| p.num_heads()).sum();
        let data = parts.iter().flat_map(|p| p.0.data().iter().copied()).collect();
        Self::new(Tensor::from_parts(vec![heads, t, t], data))
    }
}

impl TryFrom<Tensor> for AttentionStack {
    type Error = Error;
    fn try_from(t: Tensor) -> Result<Self> {
        Self::new(t)
    }
}

impl From<AttentionStack> for Tensor {
    fn from(a: AttentionStack) -> Tensor {
        a.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// One `S × d` matrix per layer (the residual stream after the layer).
    pub embeddings: Vec<Tensor>,
    /// One `H × S × S` stack per layer. Padded rows and columns are zero.
    pub attention: Vec<AttentionStack>,
    pub true_len: usize,
}

/// Graph handles for one encoded sequence.
pub(crate) struct EncoderVars {
    pub embeddings: Vec<Var>,
    /// Per layer, per head `S × S` attention.
    pub attention: Vec<Vec<Var>>,
}

pub(crate) fn encode_graph(
    g: &mut Graph<'_>,
    model: &Model,
    input: &EncodedInput,
    pass: &mut Pass<'_>,
) -> Result<EncoderVars> {
    let cfg = model.config();
    let lay = model.layout();
    let (s, d, heads) = (cfg.max_len, cfg.model_dim, cfg.num_heads);
    let dh = cfg.head_dim();
    let p = cfg.dropout;
    let linear = |g: &mut Graph<'_>, x: Var, (w, b): (crate::params::ParamId, crate::params::ParamId)| -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    };

    let tok = g.gather(lay.token, &input.ids)?;
    let positions: Vec<usize> = (0..s).collect();
    let pos = g.gather(lay.position, &positions)?;
    let x = g.add(tok, pos)?;
    let mut h = pass.dropout(g, x, p)?;

    let mut embeddings = Vec::with_capacity(cfg.num_layers);
    let mut attention = Vec::with_capacity(cfg.num_layers);
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &lay.layers {
        let (lg, lb) = (g.param(layer.ln1.0), g.param(layer.ln1.1));
        let a = g.layer_norm(h, lg, lb)?;
        let q = linear(g, a, layer.q)?;
        let k = linear(g, a, layer.k)?;
        let v = linear(g, a, layer.v)?;
        let mut probs = Vec::with_capacity(heads);
        let mut contexts = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let prob = g.masked_softmax(scores, input.true_len)?;
            contexts.push(g.matmul(prob, vh)?);
            probs.push(prob);
        }
        let ctx = g.concat_cols(&contexts)?;
        let o = linear(g, ctx, layer.o)?;
        let o = pass.dropout(g, o, p)?;
        h = g.add(h, o)?;

        let (lg, lb) = (g.param(layer.ln2.0), g.param(layer.ln2.1));
        let f = g.layer_norm(h, lg, lb)?;
        let f = linear(g, f, layer.up)?;
        let f = g.gelu(f);
        let f = linear(g, f, layer.down)?;
        let f = pass.dropout(g, f, p)?;
        h = g.add(h, f)?;
        debug_assert_eq!(g.shape(h), &[s, d]);
        embeddings.push(h);
        attention.push(probs);
    }
    Ok(EncoderVars { embeddings, attention })
}

/// Last-three-layer features: embeddings concatenated along the feature axis
/// (`S × 3d`) and attention stacked along the head axis (`3H × S × S`), in
/// layer order.
pub(crate) fn last3_graph(g: &mut Graph<'_>, enc: &EncoderVars) -> Result<(Var, Var)> {
    let l = enc.embeddings.len();
    if l < 3 {
        return Err(Error::Config(format!("need at least 3 layers, have {l}")));
    }
    let emb = g.concat_cols(&enc.embeddings[l - 3..])?;
    let heads: Vec<Var> = enc.attention[l - 3..].iter().flatten().copied().collect();
    let att = g.stack(&heads)?;
    Ok((emb, att))
}

impl Model {
    /// Runs the encoder alone on one fixed-length input.
    pub fn encode(&self, input: &EncodedInput, pass: &mut Pass<'_>) -> Result<EncoderOutput> {
        self.validate_input(input)?;
        self.check_finite()?;
        let mut g = Graph::new(self.params());
        let vars = encode_graph(&mut g, self, input, pass)?;
        let embeddings = vars.embeddings.iter().map(|&v| g.value(v).clone()).collect();
        let attention = vars
            .attention
            .iter()
            .map(|heads| {
                let stacked = g.stack(heads)?;
                AttentionStack::new(g.value(stacked).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderOutput { embeddings, attention, true_len: input.true_len })
    }
}

/// Concatenates the last three layers: embeddings along the feature axis,
/// attention along the head axis. No renormalization is applied.
pub fn last3_concat(out: &EncoderOutput) -> Result<(Tensor, AttentionStack)> {
    let l = out.embeddings.len();
    if l < 3 || out.attention.len() != l {
        return Err(Error::Config(format!("need at least 3 layers, have {l}")));
    }
    let last = &out.embeddings[l - 3..];
    let rows = last[0].rows();
    if last.iter().any(|e| e.rows() != rows) {
        return Err(Error::Shape("layer embeddings disagree on token count".into()));
    }
    let width: usize = last.iter().map(Tensor::cols).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for e in last {
            data.extend_from_slice(e.row(r));
        }
    }
    let emb = Tensor::from_parts(vec![rows, width], data);
    let att = AttentionStack::concat_heads(&out.attention[l - 3..].iter().collect::<Vec<_>>())?;
    Ok((emb, att))
}
