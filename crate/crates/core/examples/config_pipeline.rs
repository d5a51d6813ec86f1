//! The command-line workflow driven from code: write data and a TOML run
//! configuration, train both stages, predict, evaluate, and analyze. The
//! same steps run from a shell as `cfdetect train detect --config run.toml`
//! and so on.
//!
//! cargo run --release --example config_pipeline

use cfdetect::cli::{
    cmd_analyze, cmd_eval, cmd_predict, cmd_train, AnalyzeArgs, EvalArgs, PredictArgs, Task, TrainArgs,
};
use cfdetect::corpus::{write_detection_data, write_span_data};
use cfdetect::synthetic::{detection_corpus, span_corpus};

const CONFIG: &str = r#"seed = 7
split_ratio = 0.75

[paths]
detect_train = "detect.csv"
spans_train = "spans.csv"
checkpoint_dir = "ckpt"

[model]
num_layers = 3
num_heads = 2
model_dim = 32
ffn_dim = 64
max_len = 20
conv_channels = [4, 8]
attention_embed_dim = 16
feature_dim = 32

[detect]
learning_rate = 0.001
batch_size = 8
epochs = 15
vocab_min_freq = 1

[spans]
learning_rate = 0.001
batch_size = 4
epochs = 30
vocab_min_freq = 1
"#;

fn main() -> cfdetect::Result<()> {
    let dir = std::env::temp_dir().join("cfdetect-config-example");
    std::fs::create_dir_all(&dir).map_err(|e| cfdetect::Error::io(&dir, e))?;
    write_detection_data(dir.join("detect.csv"), &detection_corpus(40))?;
    write_span_data(dir.join("spans.csv"), &span_corpus(24))?;
    let config = dir.join("run.toml");
    std::fs::write(&config, CONFIG).map_err(|e| cfdetect::Error::io(&config, e))?;

    let train = |task, from_checkpoint| TrainArgs {
        task,
        config: config.clone(),
        seed: None,
        from_checkpoint,
        cold_start: false,
        out: None,
    };
    let s1 = cmd_train(&train(Task::Detect, None))?;
    let s2 = cmd_train(&train(Task::Spans, Some(s1.checkpoint.clone())))?;
    println!("wrote {} and {}", s1.checkpoint.display(), s2.checkpoint.display());

    cmd_predict(&PredictArgs {
        task: Task::Spans,
        checkpoint: s2.checkpoint.clone(),
        input: dir.join("spans.csv"),
        out: dir.join("pred.csv"),
    })?;
    let preds =
        std::fs::read_to_string(dir.join("pred.csv")).map_err(|e| cfdetect::Error::io(dir.join("pred.csv"), e))?;
    println!("{}", preds.lines().take(5).collect::<Vec<_>>().join("\n"));

    let (_, text) = cmd_eval(&EvalArgs {
        task: Task::Spans,
        checkpoint: s2.checkpoint.clone(),
        data: dir.join("spans.csv"),
        out: None,
    })?;
    print!("{text}");
    let n = cmd_analyze(&AnalyzeArgs {
        checkpoint: s2.checkpoint,
        input: dir.join("spans.csv"),
        out: dir.join("analysis"),
    })?;
    println!("{n} statements analyzed under {}", dir.join("analysis").display());
    Ok(())
}
