//! Task heads: a sigmoid classifier and a four-output ReLU span regressor.

use crate::autograd::{Graph, Var};
use crate::corpus::BinaryLabel;
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, Pass};
use crate::spans::NormalizedSpanQuad;
use crate::tensor::Tensor;

pub(crate) fn head_graph(g: &mut Graph<'_>, model: &Model, features: Var) -> Result<Var> {
    let (w, b) = model.layout().head;
    let (w, b) = (g.param(w), g.param(b));
    let y = g.matmul(features, w)?;
    let y = g.add_bias(y, b)?;
    Ok(match model.head() {
        HeadKind::Classification => g.sigmoid(y),
        HeadKind::Regression => g.relu(y),
    })
}

/// Thresholded decision: probabilities at or above `threshold` are counterfactual.
pub fn decide(probability: f64, threshold: f64) -> BinaryLabel {
    if probability >= threshold {
        BinaryLabel::Counterfactual
    } else {
        BinaryLabel::NonCounterfactual
    }
}

impl Model {
    fn run_head(&self, feature: &[f64], kind: HeadKind) -> Result<Vec<f64>> {
        if self.head() != kind {
            return Err(Error::InvalidInput(format!("model carries a {:?} head, not {kind:?}", self.head())));
        }
        let width = self.config().feature_dim;
        if feature.len() != width {
            return Err(Error::Shape(format!("feature width {}, expected {width}", feature.len())));
        }
        let mut g = Graph::new(self.params());
        let f = g.input(Tensor::matrix(1, width, feature.to_vec())?);
        let y = head_graph(&mut g, self, f)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Counterfactual probability of one feature embedding.
    pub fn classify(&self, feature: &[f64], _pass: &mut Pass<'_>) -> Result<f64> {
        Ok(self.run_head(feature, HeadKind::Classification)?[0])
    }

    /// Raw non-negative normalized span values of one feature embedding.
    pub fn regress_spans(&self, feature: &[f64], _pass: &mut Pass<'_>) -> Result<NormalizedSpanQuad> {
        let v = self.run_head(feature, HeadKind::Regression)?;
        Ok(NormalizedSpanQuad::from_slice(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::corpus::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(head: HeadKind) -> Model {
        let vocab = Vocab::build(["a b c d"], 1, 16).unwrap();
        let cfg = ModelConfig {
            num_layers: 3,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_len: 6,
            attention_embed_dim: 8,
            feature_dim: 8,
            ..ModelConfig::default()
        };
        Model::new(cfg, vocab, head, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn zero_logit_is_half() {
        let mut m = tiny(HeadKind::Classification);
        for name in ["head.classifier.weight", "head.classifier.bias"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let p = m.classify(&[0.3; 8], &mut Pass::eval()).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(decide(p, 0.5), BinaryLabel::Counterfactual);
        assert_eq!(decide(0.4999, 0.5), BinaryLabel::NonCounterfactual);
    }

    #[test]
    fn outputs_stay_in_range() {
        let c = tiny(HeadKind::Classification);
        let r = tiny(HeadKind::Regression);
        for k in 0..20 {
            let f: Vec<f64> = (0..8).map(|i| ((i * 31 + k * 17) % 13) as f64 - 6.0).collect();
            let p = c.classify(&f, &mut Pass::eval()).unwrap();
            assert!(p > 0.0 && p < 1.0);
            let q = r.regress_spans(&f, &mut Pass::eval()).unwrap();
            assert!(q.to_array().iter().all(|v| *v >= 0.0));
        }
        assert!(c.classify(&[0.0; 7], &mut Pass::eval()).is_err());
        assert!(c.regress_spans(&[0.0; 8], &mut Pass::eval()).is_err());
    }

    #[test]
    fn zero_regressor_predicts_zero_quad() {
        let mut m = tiny(HeadKind::Regression);
        for name in ["head.regressor.weight", "head.regressor.bias"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let q = m.regress_spans(&[1.0; 8], &mut Pass::eval()).unwrap();
        assert_eq!(q.to_array(), [0.0; 4]);
    }
}
