//! Stage 1 on a synthetic corpus: train the base plus classifier, then
//! report training-set and dev metrics.
//!
//! cargo run --release --example train_detect

use cfdetect::synthetic::detection_corpus;
use cfdetect::training::{evaluate_detection, train_stage1};
use cfdetect::{ModelConfig, TrainConfig};

fn main() -> cfdetect::Result<()> {
    let data = detection_corpus(32);
    let model_cfg = ModelConfig {
        num_layers: 3,
        num_heads: 2,
        model_dim: 32,
        ffn_dim: 64,
        max_len: 20,
        conv_channels: [4, 8],
        attention_embed_dim: 16,
        feature_dim: 32,
        ..ModelConfig::default()
    };
    let train_cfg =
        TrainConfig { learning_rate: 1e-3, batch_size: 8, epochs: 30, vocab_min_freq: 1, ..TrainConfig::stage1() };
    let start = std::time::Instant::now();
    let outcome = train_stage1(&data, &data, &model_cfg, &train_cfg)?;
    for e in &outcome.checkpoint.history {
        println!("epoch {:>3}  train {:.4}  dev {:.4}  f1 {:.3}", e.epoch, e.train_loss, e.dev_loss, e.dev_f1);
    }
    let model = outcome.checkpoint.to_model()?;
    let (_, m) = evaluate_detection(&model, &data, train_cfg.threshold)?;
    println!("best epoch {}: training-set f1 {:.3} ({:.1?})", outcome.checkpoint.best_epoch, m.f1, start.elapsed());
    Ok(())
}
