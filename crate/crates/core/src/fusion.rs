//! The shared base feature extractor.
//!
//! Pooled last-three-layer embeddings and a convolutional summary of the
//! stacked attention maps are concatenated, layer-normalized, and projected
//! through a linear block into the feature embedding both heads consume.
//!
//! Conv block: 3×3 conv (stride 2, same padding) → batch norm → ReLU → dropout.
//! Linear block: fully connected → ReLU → dropout.

use crate::autograd::{BatchStats, Graph, Var};
use crate::encoder::AttentionStack;
use crate::error::{Error, Result};
use crate::model::{bn_buffer_names, Mode, Model, Pass};
use crate::tensor::Tensor;

/// Mean of the first `true_len` rows.
pub fn pool(emb: &Tensor, true_len: usize) -> Result<Vec<f64>> {
    if emb.shape().len() != 2 {
        return Err(Error::Shape(format!("pool expects a matrix, got {:?}", emb.shape())));
    }
    if true_len == 0 || true_len > emb.rows() {
        return Err(Error::InvalidInput(format!("true_len {true_len} invalid for {} rows", emb.rows())));
    }
    let mut out = vec![0.0; emb.cols()];
    for r in 0..true_len {
        for (o, v) in out.iter_mut().zip(emb.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= true_len as f64);
    Ok(out)
}

/// Standalone layer normalization of one vector (variance epsilon 1e-5).
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.input(Tensor::vector(x.to_vec()));
    let gv = g.input(Tensor::vector(gain.to_vec()));
    let bv = g.input(Tensor::vector(bias.to_vec()));
    let y = g.layer_norm(xv, gv, bv)?;
    Ok(g.value(y).data().to_vec())
}

/// Conv blocks plus linear block over `(N, 3H, S, S)` attention.
///
/// Batch statistics are used only in train mode with more than one sample;
/// otherwise the running estimates apply.
pub(crate) fn attention_embed_graph(
    g: &mut Graph<'_>,
    model: &Model,
    attention: Var,
    pass: &mut Pass<'_>,
) -> Result<(Var, Vec<(usize, BatchStats)>)> {
    let cfg = model.config();
    let lay = model.layout();
    let n = g.shape(attention)[0];
    let use_batch = pass.mode() == Mode::Train && n > 1;
    let mut x = attention;
    let mut stats = Vec::new();
    for block in 0..2 {
        let w = g.param(lay.conv[block]);
        let c = g.conv2d(x, w, 2, 1)?;
        let (gain, bias) = (g.param(lay.bn[block].0), g.param(lay.bn[block].1));
        let (mean_name, var_name) = bn_buffer_names(block);
        let buffers = model.buffers();
        let (bn, st) = g.batch_norm(c, gain, bias, buffers[&mean_name].data(), buffers[&var_name].data(), use_batch)?;
        if let Some(st) = st {
            stats.push((block, st));
        }
        let r = g.relu(bn);
        x = pass.dropout(g, r, cfg.dropout)?;
    }
    let flat_width: usize = g.shape(x)[1..].iter().product();
    let flat = g.reshape(x, &[n, flat_width])?;
    let (w, b) = (g.param(lay.attn_proj.0), g.param(lay.attn_proj.1));
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, b)?;
    let y = g.relu(y);
    Ok((pass.dropout(g, y, cfg.dropout)?, stats))
}

/// Concatenate `(N, 3d)` pooled and `(N, A)` attention embeddings, layer-norm,
/// then one linear block to `(N, feature_dim)`.
pub(crate) fn fuse_graph(g: &mut Graph<'_>, model: &Model, pooled: Var, attn: Var, pass: &mut Pass<'_>) -> Result<Var> {
    let lay = model.layout();
    let cat = g.concat_cols(&[pooled, attn])?;
    let (ng, nb) = (g.param(lay.norm.0), g.param(lay.norm.1));
    let normed = g.layer_norm(cat, ng, nb)?;
    let (w, b) = (g.param(lay.proj.0), g.param(lay.proj.1));
    let y = g.matmul(normed, w)?;
    let y = g.add_bias(y, b)?;
    let y = g.relu(y);
    pass.dropout(g, y, model.config().dropout)
}

impl Model {
    /// Attention embedding of one `(3H × S × S)` stack.
    pub fn attention_embed(&self, att: &AttentionStack, pass: &mut Pass<'_>) -> Result<Vec<f64>> {
        let cfg = self.config();
        let expected = [3 * cfg.num_heads, cfg.max_len, cfg.max_len];
        if att.tensor().shape() != expected {
            return Err(Error::Shape(format!("attention stack {:?}, expected {expected:?}", att.tensor().shape())));
        }
        let mut g = Graph::new(self.params());
        let mut shape = vec![1];
        shape.extend_from_slice(&expected);
        let x = g.input(att.tensor().clone().reshape(&shape)?);
        let (y, _) = attention_embed_graph(&mut g, self, x, pass)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Feature embedding from a pooled embedding and an attention embedding.
    pub fn fuse(&self, pooled: &[f64], attn: &[f64], pass: &mut Pass<'_>) -> Result<Vec<f64>> {
        let cfg = self.config();
        if pooled.len() != 3 * cfg.model_dim || attn.len() != cfg.attention_embed_dim {
            return Err(Error::Shape(format!(
                "fuse widths {} + {}, expected {} + {}",
                pooled.len(),
                attn.len(),
                3 * cfg.model_dim,
                cfg.attention_embed_dim
            )));
        }
        let mut g = Graph::new(self.params());
        let p = g.input(Tensor::matrix(1, pooled.len(), pooled.to_vec())?);
        let a = g.input(Tensor::matrix(1, attn.len(), attn.to_vec())?);
        let f = fuse_graph(&mut g, self, p, a, pass)?;
        Ok(g.value(f).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let m = Tensor::matrix(3, 2, vec![1.0, 3.0, 3.0, 5.0, 100.0, 100.0]).unwrap();
        assert_eq!(pool(&m, 2).unwrap(), vec![2.0, 4.0]);
        assert_eq!(pool(&m, 1).unwrap(), vec![1.0, 3.0]);
        assert_eq!(pool(&Tensor::zeros(&[4, 3]), 4).unwrap(), vec![0.0; 3]);
        assert!(pool(&m, 4).is_err());
        assert!(pool(&m, 0).is_err());
    }

    #[test]
    fn layer_norm_closed_form() {
        // mean 2.5, variance 1.25
        let y = layer_norm(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[0.0; 4]).unwrap();
        let inv = 1.0 / (1.25f64 + 1e-5).sqrt();
        let want = [-1.5 * inv, -0.5 * inv, 0.5 * inv, 1.5 * inv];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in y.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((a - b).abs() < 1e-3);
        }
        let bias = [0.3, -0.2, 0.0, 7.0];
        assert_eq!(layer_norm(&[2.5; 4], &[3.0; 4], &bias).unwrap(), bias.to_vec());
    }
}
