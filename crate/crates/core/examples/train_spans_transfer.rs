//! The two-stage protocol: train detection, then swap in the span regressor
//! and fine-tune the whole network on span targets. The base digest printed
//! at the start of stage 2 matches the one stage 1 finished with.
//!
//! cargo run --release --example train_spans_transfer

use cfdetect::metrics::{mean_char_error, span_prf};
use cfdetect::synthetic::{detection_corpus, span_corpus};
use cfdetect::training::{evaluate_spans, train_stage1, train_stage2, Stage2Init};
use cfdetect::{ModelConfig, TrainConfig};

fn main() -> cfdetect::Result<()> {
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
    let detect = detection_corpus(32);
    let stage1_cfg =
        TrainConfig { learning_rate: 1e-3, batch_size: 8, epochs: 30, vocab_min_freq: 1, ..TrainConfig::stage1() };
    let stage1 = train_stage1(&detect, &detect, &model_cfg, &stage1_cfg)?;
    println!("stage 1 best epoch {}, base {}", stage1.checkpoint.best_epoch, &stage1.final_base_digest[..16]);

    let spans = span_corpus(16);
    let stage2_cfg =
        TrainConfig { learning_rate: 1e-3, batch_size: 4, epochs: 100, vocab_min_freq: 1, ..TrainConfig::stage2() };
    let start = std::time::Instant::now();
    let stage2 = train_stage2(Stage2Init::FromCheckpoint(&stage1.checkpoint), &spans, &spans, &model_cfg, &stage2_cfg)?;
    println!("stage 2 starts from base {}", &stage2.initial_base_digest[..16]);
    for e in stage2.checkpoint.history.iter().step_by(10) {
        println!(
            "epoch {:>3}  train {:.5}  dev {:.5}  span f1 {:.3}  char error {:.2}",
            e.epoch,
            e.train_loss,
            e.dev_loss,
            e.dev_f1,
            e.dev_char_error.unwrap_or(f64::NAN)
        );
    }
    let model = stage2.checkpoint.to_model()?;
    let (_, pairs) = evaluate_spans(&model, &spans)?;
    let m = span_prf(&pairs)?;
    println!(
        "best epoch {}: span f1 {:.3}, exact match {:.3}, mean char error {:.2} ({:.1?})",
        stage2.checkpoint.best_epoch,
        m.f1,
        m.exact_match,
        mean_char_error(&pairs)?,
        start.elapsed()
    );
    Ok(())
}
