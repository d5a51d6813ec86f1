//! Losses, optimizer, and the two-stage training protocol.
//!
//! Stage 1 trains the base and a classification head with binary cross
//! entropy. Stage 2 swaps in a fresh regression head on top of the stage-1
//! base and fine-tunes everything with Smooth L1 on length-normalized spans.
//! Both stages keep the weights of their best dev epoch.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, EpochRecord, Stage, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::autograd::{self, BatchStats, Gradients, Graph};
use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{encode_ids, tokenize, BinaryLabel, EncodedInput, SpanQuad, Statement, Vocab};
use crate::error::{Error, Result};
use crate::heads::decide;
use crate::metrics::{binary_prf, mean_char_error, span_prf, SpanPair};
use crate::model::{Buffers, HeadKind, Model, Pass};
use crate::params::ParamStore;
use crate::spans::{denormalize, normalize, NormalizedSpanQuad};

/// Binary cross entropy of one probability, clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: BinaryLabel) -> f64 {
    autograd::bce_term(p, y.as_f64())
}

/// Mean Smooth L1 over the four coordinates.
pub fn smooth_l1(pred: &NormalizedSpanQuad, target: &NormalizedSpanQuad) -> f64 {
    let (p, t) = (pred.to_array(), target.to_array());
    p.iter().zip(t).map(|(a, b)| autograd::smooth_l1_term(a - b)).sum::<f64>() / 4.0
}

struct Sample {
    input: EncodedInput,
    target: Vec<f64>,
}

/// What a finished stage hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Base digest right before the first optimizer step.
    pub initial_base_digest: String,
    /// Base digest of the returned (best-epoch) weights.
    pub final_base_digest: String,
}

/// Serializable training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub best_epoch: usize,
    pub initial_base_digest: String,
    pub final_base_digest: String,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn log(&self) -> TrainLog {
        TrainLog {
            stage: self.checkpoint.stage,
            best_epoch: self.checkpoint.best_epoch,
            initial_base_digest: self.initial_base_digest.clone(),
            final_base_digest: self.final_base_digest.clone(),
            epochs: self.checkpoint.history.clone(),
        }
    }
}

fn encode_all(model: &Model, texts: impl Iterator<Item = String>) -> Result<Vec<EncodedInput>> {
    texts.map(|t| encode_ids(&tokenize(&t)?, model.vocab(), model.config().max_len)).collect()
}

fn detection_samples(model: &Model, data: &[(Statement, BinaryLabel)]) -> Result<Vec<Sample>> {
    let inputs = encode_all(model, data.iter().map(|(s, _)| s.text.clone()))?;
    Ok(inputs.into_iter().zip(data).map(|(input, (_, y))| Sample { input, target: vec![y.as_f64()] }).collect())
}

fn span_samples(model: &Model, data: &[(Statement, SpanQuad)]) -> Result<Vec<Sample>> {
    let inputs = encode_all(model, data.iter().map(|(s, _)| s.text.clone()))?;
    inputs
        .into_iter()
        .zip(data)
        .map(|(input, (s, q))| Ok(Sample { input, target: normalize(q, s.length)?.to_array().to_vec() }))
        .collect()
}

/// Dev metrics in eval mode.
pub fn evaluate_detection(
    model: &Model,
    data: &[(Statement, BinaryLabel)],
    threshold: f64,
) -> Result<(f64, crate::metrics::BinaryMetrics)> {
    let inputs = encode_all(model, data.iter().map(|(s, _)| s.text.clone()))?;
    let probs = model.predict(&inputs)?;
    let loss = probs.iter().zip(data).map(|(p, (_, y))| bce_loss(p[0], *y)).sum::<f64>() / data.len() as f64;
    let pairs: Vec<_> = probs.iter().zip(data).map(|(p, (_, y))| (decide(p[0], threshold), *y)).collect();
    Ok((loss, binary_prf(&pairs)?))
}

/// Smooth L1 on normalized targets plus decoded span pairs, in eval mode.
pub fn evaluate_spans(model: &Model, data: &[(Statement, SpanQuad)]) -> Result<(f64, Vec<SpanPair>)> {
    let inputs = encode_all(model, data.iter().map(|(s, _)| s.text.clone()))?;
    let outputs = model.predict(&inputs)?;
    let mut loss = 0.0;
    let mut pairs = Vec::with_capacity(data.len());
    for (out, (s, gold)) in outputs.iter().zip(data) {
        let pred = NormalizedSpanQuad::from_slice(out);
        loss += smooth_l1(&pred, &normalize(gold, s.length)?);
        pairs.push(SpanPair { pred: denormalize(&pred, s.length)?, gold: *gold, length: s.length });
    }
    Ok((loss / data.len() as f64, pairs))
}

/// Loss, gradients, and observed batch-norm statistics of one batch.
pub struct BatchStep {
    pub loss: f64,
    pub gradients: Gradients,
    pub(crate) bn_stats: Vec<(usize, BatchStats)>,
}

/// Forward and backward pass over one batch with the objective of the
/// model's head: BCE against 0/1 targets or Smooth L1 against four
/// normalized span values per input. Parameters are left untouched.
pub fn batch_gradients(
    model: &Model,
    inputs: &[&EncodedInput],
    targets: &[f64],
    pass: &mut Pass<'_>,
) -> Result<BatchStep> {
    let mut g = Graph::new(model.params());
    let fwd = model.forward(&mut g, inputs, pass)?;
    let loss = match model.head() {
        HeadKind::Classification => g.bce(fwd.output, targets)?,
        HeadKind::Regression => g.smooth_l1(fwd.output, targets)?,
    };
    let value = g.value(loss).data()[0];
    let gradients = if value.is_finite() { g.backward(loss)? } else { Gradients::default() };
    Ok(BatchStep { loss: value, gradients, bn_stats: fwd.bn_stats })
}

struct Snapshot {
    params: ParamStore,
    buffers: Buffers,
}

/// Runs up to `tcfg.epochs` epochs, tracking the best dev epoch according to
/// `better(candidate, incumbent)`, and leaves the best weights in `model`.
fn fit(
    model: &mut Model,
    train: &[Sample],
    tcfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut dev_eval: impl FnMut(&Model) -> Result<EpochRecord>,
    better: impl Fn(&EpochRecord, &EpochRecord) -> bool,
) -> Result<(Vec<EpochRecord>, usize)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut state = AdamState::new();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, Snapshot)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tcfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let inputs: Vec<&EncodedInput> = batch.iter().map(|&i| &train[i].input).collect();
            let targets: Vec<f64> = batch.iter().flat_map(|&i| train[i].target.iter().copied()).collect();
            let step = batch_gradients(model, &inputs, &targets, &mut Pass::train(rng))?;
            if !step.loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1, loss: step.loss });
            }
            let (grads, stats, loss) = (step.gradients, step.bn_stats, step.loss);
            adam_step(model.params_mut(), &grads, &mut state, tcfg)?;
            model.apply_bn_stats(&stats);
            loss_sum += loss * batch.len() as f64;
        }
        let mut record = dev_eval(model)?;
        record.epoch = epoch;
        record.train_loss = loss_sum / train.len() as f64;
        if !record.dev_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0, loss: record.dev_loss });
        }
        let improved = match &best {
            None => true,
            Some((e, _)) => better(&record, &history[e - 1]),
        };
        if improved {
            best = Some((epoch, Snapshot { params: model.params().clone(), buffers: model.buffers().clone() }));
        }
        history.push(record);
        if let (Some(patience), Some((best_epoch, _))) = (tcfg.patience, &best) {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }
    let (best_epoch, snap) = best.expect("at least one epoch ran");
    *model = Model::from_parts(model.config().clone(), model.vocab().clone(), model.head(), snap.params, snap.buffers)?;
    Ok((history, best_epoch))
}

/// Stage 1: builds the vocabulary from `train`, then trains base plus
/// classifier. The best epoch maximizes dev F1, ties going to lower dev BCE.
pub fn train_stage1(
    train: &[(Statement, BinaryLabel)],
    dev: &[(Statement, BinaryLabel)],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if dev.is_empty() {
        return Err(Error::InvalidInput("dev set is empty".into()));
    }
    let vocab = Vocab::build(train.iter().map(|(s, _)| s.text.as_str()), tcfg.vocab_min_freq, tcfg.vocab_max_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Model::new(mcfg.clone(), vocab, HeadKind::Classification, &mut rng)?;
    let samples = detection_samples(&model, train)?;
    let initial_base_digest = model.base_digest();
    let threshold = tcfg.threshold;
    let (history, best_epoch) = fit(
        &mut model,
        &samples,
        tcfg,
        &mut rng,
        |m| {
            let (loss, metrics) = evaluate_detection(m, dev, threshold)?;
            Ok(EpochRecord { epoch: 0, train_loss: 0.0, dev_loss: loss, dev_f1: metrics.f1, dev_char_error: None })
        },
        |new, old| new.dev_f1 > old.dev_f1 || (new.dev_f1 == old.dev_f1 && new.dev_loss < old.dev_loss),
    )?;
    let final_base_digest = model.base_digest();
    let checkpoint = Checkpoint::from_model(&model, Stage::Stage1, tcfg.clone(), history, best_epoch)?;
    Ok(TrainOutcome { checkpoint, initial_base_digest, final_base_digest })
}

/// Where the stage-2 base comes from.
#[derive(Clone, Copy, Debug)]
pub enum Stage2Init<'a> {
    /// Transfer the base (and vocabulary) of a stage-1 checkpoint.
    FromCheckpoint(&'a Checkpoint),
    /// Ablation: fresh base, vocabulary built from the span training data.
    ColdStart,
}

/// Stage 2: fresh regression head over the given base, all parameters
/// trainable, best epoch by lowest dev Smooth L1.
pub fn train_stage2(
    init: Stage2Init<'_>,
    train: &[(Statement, SpanQuad)],
    dev: &[(Statement, SpanQuad)],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if dev.is_empty() {
        return Err(Error::InvalidInput("dev set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = match init {
        Stage2Init::FromCheckpoint(ckpt) => {
            if ckpt.stage != Stage::Stage1 {
                return Err(Error::Checkpoint(format!("stage 2 needs a stage-1 checkpoint, got {:?}", ckpt.stage)));
            }
            if !ckpt.model_config.same_shape(mcfg) {
                return Err(Error::Shape(format!(
                    "checkpoint architecture {:?} differs from requested {:?}",
                    ckpt.model_config, mcfg
                )));
            }
            let mut model = ckpt.to_model()?;
            model.replace_head(HeadKind::Regression, &mut rng)?;
            model
        }
        Stage2Init::ColdStart => {
            let vocab =
                Vocab::build(train.iter().map(|(s, _)| s.text.as_str()), tcfg.vocab_min_freq, tcfg.vocab_max_size)?;
            Model::new(mcfg.clone(), vocab, HeadKind::Regression, &mut rng)?
        }
    };
    let samples = span_samples(&model, train)?;
    let initial_base_digest = model.base_digest();
    let (history, best_epoch) = fit(
        &mut model,
        &samples,
        tcfg,
        &mut rng,
        |m| {
            let (loss, pairs) = evaluate_spans(m, dev)?;
            Ok(EpochRecord {
                epoch: 0,
                train_loss: 0.0,
                dev_loss: loss,
                dev_f1: span_prf(&pairs)?.f1,
                dev_char_error: Some(mean_char_error(&pairs)?),
            })
        },
        |new, old| new.dev_loss < old.dev_loss,
    )?;
    let final_base_digest = model.base_digest();
    let checkpoint = Checkpoint::from_model(&model, Stage::Stage2, tcfg.clone(), history, best_epoch)?;
    Ok(TrainOutcome { checkpoint, initial_base_digest, final_base_digest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, BinaryLabel::Counterfactual) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-7, BinaryLabel::Counterfactual) < 1e-6);
        assert!((bce_loss(1e-7, BinaryLabel::Counterfactual) - 16.12).abs() < 1e-2);
        assert!((bce_loss(0.0, BinaryLabel::Counterfactual) - 16.118_095_650_958_32).abs() < 1e-9);
        assert!((bce_loss(0.2, BinaryLabel::NonCounterfactual) - (-(0.8f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_values() {
        let zero = NormalizedSpanQuad::new([0.1, 0.2, 0.3, 0.4]);
        assert_eq!(smooth_l1(&zero, &zero), 0.0);
        let half = NormalizedSpanQuad::new([0.0; 4]);
        let off = NormalizedSpanQuad::new([0.5, 0.0, 0.0, 0.0]);
        assert_eq!(smooth_l1(&off, &half), 0.03125);
        let far = NormalizedSpanQuad::new([0.0, 0.0, 2.0, 0.0]);
        assert_eq!(smooth_l1(&far, &half), 0.375);
    }
}
