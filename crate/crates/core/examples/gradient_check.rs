//! Compare analytic gradients with central finite differences on a tiny
//! model, for both objectives, and print the worst relative error per
//! parameter tensor.
//!
//! cargo run --release --example gradient_check

use cfdetect::model::Pass;
use cfdetect::params::truncated_normal;
use cfdetect::training::batch_gradients;
use cfdetect::{EncodedInput, HeadKind, Model, ModelConfig, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cfdetect::Result<()> {
    let vocab = Vocab::build(["a b c d e f g h i j k l m"], 1, 16)?;
    let cfg = ModelConfig {
        num_layers: 3,
        num_heads: 2,
        model_dim: 8,
        ffn_dim: 16,
        max_len: 6,
        dropout: 0.0,
        attention_embed_dim: 8,
        feature_dim: 8,
        ..ModelConfig::default()
    };
    let inputs = [
        EncodedInput { ids: vec![2, 5, 9, 12, 0, 0], true_len: 4 },
        EncodedInput { ids: vec![2, 7, 3, 15, 4, 6], true_len: 6 },
    ];
    let refs: Vec<&EncodedInput> = inputs.iter().collect();
    for (head, targets) in [
        (HeadKind::Classification, vec![1.0, 0.0]),
        (HeadKind::Regression, vec![0.1, 0.4, 0.5, 0.9, 0.0, 0.3, 0.0, 0.0]),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(cfg.clone(), vocab.clone(), head, &mut rng)?;
        for id in model.params().ids().collect::<Vec<_>>() {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += truncated_normal(&mut rng, 0.3);
            }
        }
        let loss = |m: &Model| {
            batch_gradients(m, &refs, &targets, &mut Pass::train(&mut ChaCha8Rng::seed_from_u64(0))).map(|s| s.loss)
        };
        let step = batch_gradients(&model, &refs, &targets, &mut Pass::train(&mut ChaCha8Rng::seed_from_u64(0)))?;
        println!("{head:?} loss {:.6}", step.loss);
        for id in model.params().ids().collect::<Vec<_>>() {
            let mut worst = 0.0f64;
            for k in 0..model.params().get(id).len() {
                let orig = model.params().get(id).data()[k];
                model.params_mut().get_mut(id).data_mut()[k] = orig + 1e-4;
                let plus = loss(&model)?;
                model.params_mut().get_mut(id).data_mut()[k] = orig - 1e-4;
                let minus = loss(&model)?;
                model.params_mut().get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / 2e-4;
                let analytic = step.gradients.get(id).map_or(0.0, |g| g.data()[k]);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
            }
            println!("  {:<36} {worst:.2e}", model.params().entry(id).name);
        }
    }
    Ok(())
}
