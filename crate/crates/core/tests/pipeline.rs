use std::fs;
use std::path::{Path, PathBuf};

use cfdetect::analysis::{analyze_statement, Heatmap};
use cfdetect::cli::{cmd_analyze, cmd_eval, cmd_predict, AnalyzeArgs, EvalArgs, PredictArgs, Task};
use cfdetect::corpus::{write_detection_data, write_span_data};
use cfdetect::synthetic::{detection_corpus, span_corpus};
use cfdetect::training::{train_stage1, train_stage2, Stage2Init, TrainOutcome};
use cfdetect::{Checkpoint, Error, HeadKind, ModelConfig, Stage, TrainConfig};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        num_heads: 2,
        model_dim: 16,
        ffn_dim: 32,
        max_len: 20,
        conv_channels: [4, 8],
        attention_embed_dim: 8,
        feature_dim: 16,
        ..ModelConfig::default()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, batch_size: 4, epochs, vocab_min_freq: 1, ..TrainConfig::default() }
}

fn stage1() -> TrainOutcome {
    let data = detection_corpus(12);
    train_stage1(&data, &data, &tiny_config(), &quick(2)).unwrap()
}

fn stage2(from: &Checkpoint) -> TrainOutcome {
    let data = span_corpus(8);
    train_stage2(Stage2Init::FromCheckpoint(from), &data, &data, &tiny_config(), &quick(2)).unwrap()
}

fn save(dir: &Path, name: &str, ckpt: &Checkpoint) -> PathBuf {
    let path = dir.join(name);
    ckpt.save(&path).unwrap();
    path
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s1 = stage1();
    let path = save(dir.path(), "s1.json", &s1.checkpoint);
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, s1.checkpoint);
    assert_eq!(back.base_digest().unwrap(), s1.final_base_digest);
    let model = back.to_model().unwrap();
    assert_eq!(model.head(), HeadKind::Classification);
    assert_eq!(model.base_digest(), s1.final_base_digest);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s1 = stage1();
    let mut wrong_version = s1.checkpoint.clone();
    wrong_version.version = 99;
    let path = save(dir.path(), "v.json", &wrong_version);
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));

    let mut wrong_shape = s1.checkpoint.clone();
    wrong_shape.params[0].tensor = cfdetect::Tensor::zeros(&[1, 1]);
    let path = save(dir.path(), "s.json", &wrong_shape);
    assert!(Checkpoint::load(&path).is_err());

    fs::write(dir.path().join("junk.json"), "{not json").unwrap();
    assert!(Checkpoint::load(dir.path().join("junk.json")).is_err());
}

#[test]
fn stage2_transfers_base_and_guards_inputs() {
    let s1 = stage1();
    let s2 = stage2(&s1.checkpoint);
    assert_eq!(s2.initial_base_digest, s1.final_base_digest);
    assert_eq!(s2.checkpoint.stage, Stage::Stage2);
    assert_eq!(s2.checkpoint.vocab, s1.checkpoint.vocab);
    assert!(s2.checkpoint.history.iter().all(|e| e.dev_char_error.is_some()));

    let data = span_corpus(8);
    let other = ModelConfig { model_dim: 8, ..tiny_config() };
    assert!(train_stage2(Stage2Init::FromCheckpoint(&s1.checkpoint), &data, &data, &other, &quick(1)).is_err());
    assert!(train_stage2(Stage2Init::FromCheckpoint(&s2.checkpoint), &data, &data, &tiny_config(), &quick(1)).is_err());
    assert!(train_stage2(Stage2Init::FromCheckpoint(&s1.checkpoint), &data, &[], &tiny_config(), &quick(1)).is_err());

    let cold = train_stage2(Stage2Init::ColdStart, &data, &data, &tiny_config(), &quick(1)).unwrap();
    assert_ne!(cold.initial_base_digest, s1.final_base_digest);
}

#[test]
fn training_is_deterministic() {
    let a = stage1();
    let b = stage1();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log(), b.log());
}

#[test]
fn predict_eval_and_analyze_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s1 = stage1();
    let s2 = stage2(&s1.checkpoint);
    let c1 = save(d, "s1.json", &s1.checkpoint);
    let c2 = save(d, "s2.json", &s2.checkpoint);
    let detect = detection_corpus(12);
    let spans = span_corpus(8);
    write_detection_data(d.join("detect.csv"), &detect).unwrap();
    write_span_data(d.join("spans.csv"), &spans).unwrap();

    let n = cmd_predict(&PredictArgs {
        task: Task::Detect,
        checkpoint: c1.clone(),
        input: d.join("detect.csv"),
        out: d.join("p1.csv"),
    })
    .unwrap();
    assert_eq!(n, 12);
    let text = fs::read_to_string(d.join("p1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sentenceID,label,probability"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let p: f64 = f[2].parse().unwrap();
        assert!(p > 0.0 && p < 1.0 && (f[1] == "0" || f[1] == "1"));
    }

    cmd_predict(&PredictArgs {
        task: Task::Spans,
        checkpoint: c2.clone(),
        input: d.join("spans.csv"),
        out: d.join("p2.csv"),
    })
    .unwrap();
    let text = fs::read_to_string(d.join("p2.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
    for line in text.lines().skip(1) {
        let ids: Vec<i64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(ids.len(), 4);
        assert!(ids[0] >= 0 && ids[0] <= ids[1]);
        assert!((ids[2] == -1 && ids[3] == -1) || (ids[2] >= 0 && ids[2] <= ids[3]));
    }

    let wrong =
        PredictArgs { task: Task::Detect, checkpoint: c2.clone(), input: d.join("detect.csv"), out: d.join("x.csv") };
    assert!(cmd_predict(&wrong).is_err());
    let missing =
        PredictArgs { task: Task::Detect, checkpoint: c1.clone(), input: d.join("none.csv"), out: d.join("x.csv") };
    assert!(cmd_predict(&missing).is_err());

    let (json, text) = cmd_eval(&EvalArgs {
        task: Task::Detect,
        checkpoint: c1.clone(),
        data: d.join("detect.csv"),
        out: Some(d.join("r")),
    })
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["precision", "recall", "f1"] {
        assert!(v.get(key).is_some(), "{key}");
        assert!(text.contains(&format!("{key} = ")));
    }
    assert!(d.join("r/eval_detect.json").is_file() && d.join("r/eval_detect.txt").is_file());
    let (json, _) =
        cmd_eval(&EvalArgs { task: Task::Spans, checkpoint: c2.clone(), data: d.join("spans.csv"), out: None })
            .unwrap();
    assert!(json.contains("mean_char_error"));
    assert!(cmd_eval(&EvalArgs { task: Task::Detect, checkpoint: c2.clone(), data: d.join("detect.csv"), out: None })
        .is_err());

    let n = cmd_analyze(&AnalyzeArgs { checkpoint: c2.clone(), input: d.join("spans.csv"), out: d.join("a") }).unwrap();
    assert_eq!(n, 8);
    let files: Vec<_> =
        fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".report.json")).count(), 8);
    assert_eq!(files.iter().filter(|f| f.ends_with(".heatmap.json")).count(), 8);
    let heat = Heatmap::read(d.join("a/0001_s001.heatmap.json")).unwrap();
    assert_eq!(heat.num_heads, 2);
    assert_eq!(heat.tokens[0], "[CLS]");
    for head in &heat.weights {
        for row in head {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("a/0001_s001.report.json")).unwrap()).unwrap();
    let heads = report["tokens"][0]["top_heads"].as_array().unwrap();
    assert!(heads.iter().all(|h| (1..=2).contains(&h.as_u64().unwrap())));

    // A stage-1 checkpoint analyzes too, without span flags.
    let model = s1.checkpoint.to_model().unwrap();
    let a = analyze_statement(&model, &detect[0].0).unwrap();
    assert!(a.probability.is_some() && a.predicted.is_none());
    assert!(a.report.tokens.iter().all(|t| !t.antecedent && !t.consequent));
}
