//! Train the two stages briefly, then attribute each token of a statement to
//! its most-attending final-layer heads, tag lexical categories, render the
//! predicted spans, and export a heatmap file.
//!
//! cargo run --release --example attention_analysis

use cfdetect::analysis::{analyze_statement, export_attention, render_text, Heatmap};
use cfdetect::synthetic::{detection_corpus, span_corpus};
use cfdetect::training::{train_stage1, train_stage2, Stage2Init};
use cfdetect::{ModelConfig, Statement, TrainConfig};

fn main() -> cfdetect::Result<()> {
    let cfg = ModelConfig {
        num_layers: 3,
        num_heads: 4,
        model_dim: 32,
        ffn_dim: 64,
        max_len: 20,
        conv_channels: [4, 8],
        attention_embed_dim: 16,
        feature_dim: 32,
        ..ModelConfig::default()
    };
    let tcfg =
        TrainConfig { learning_rate: 1e-3, batch_size: 8, epochs: 20, vocab_min_freq: 1, ..TrainConfig::default() };
    let detect = detection_corpus(32);
    let s1 = train_stage1(&detect, &detect, &cfg, &tcfg)?;
    let spans = span_corpus(16);
    let s2 = train_stage2(
        Stage2Init::FromCheckpoint(&s1.checkpoint),
        &spans,
        &spans,
        &cfg,
        &TrainConfig { batch_size: 4, epochs: 40, ..tcfg },
    )?;
    let model = s2.checkpoint.to_model()?;

    let statement = Statement::new("demo", "If the bank had lowered the rates, we would have met her.");
    let a = analyze_statement(&model, &statement)?;
    print!("{}", render_text(&a.report));
    for t in &a.report.tokens {
        println!("{:<10} {:<12} heads {:?}", t.surface, format!("{:?}", t.category), t.top_heads);
    }

    let path = std::env::temp_dir().join("cfdetect-heatmap.json");
    export_attention(&a.attention, &a.heatmap.tokens, &path)?;
    let back = Heatmap::read(&path)?;
    println!("heatmap: {} heads × {} tokens written to {}", back.num_heads, back.num_tokens, path.display());
    Ok(())
}
