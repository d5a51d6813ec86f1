//! The full network: encoder, fusion base, and one task head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::config::ModelConfig;
use crate::corpus::{encode_ids, tokenize, EncodedInput, TokenSpan, Vocab};
use crate::encoder;
use crate::error::{Error, Result};
use crate::fusion;
use crate::heads;
use crate::params::{digest, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the mode, plus the dropout RNG in training.
pub struct Pass<'r> {
    mode: Mode,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Pass<'r> {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, rng: None }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self { mode: Mode::Train, rng: Some(rng) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub(crate) fn dropout(&mut self, g: &mut Graph<'_>, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        g.dropout_mask(x, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification => 1,
            HeadKind::Regression => 4,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Classification => "head.classifier",
            HeadKind::Regression => "head.regressor",
        }
    }
}

pub(crate) struct LayerIds {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
    pub down: (ParamId, ParamId),
}

pub(crate) struct Layout {
    pub token: ParamId,
    pub position: ParamId,
    pub layers: Vec<LayerIds>,
    pub conv: [ParamId; 2],
    pub bn: [(ParamId, ParamId); 2],
    pub attn_proj: (ParamId, ParamId),
    pub norm: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
}

fn pair(store: &ParamStore, prefix: &str, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((store.id(&format!("{prefix}.{a}"))?, store.id(&format!("{prefix}.{b}"))?))
}

impl Layout {
    fn resolve(store: &ParamStore, cfg: &ModelConfig, head: HeadKind) -> Result<Self> {
        let lin = |p: &str| pair(store, p, "weight", "bias");
        let norm = |p: &str| pair(store, p, "gain", "bias");
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                Ok(LayerIds {
                    ln1: norm(&format!("{p}.ln1"))?,
                    q: lin(&format!("{p}.attn.q"))?,
                    k: lin(&format!("{p}.attn.k"))?,
                    v: lin(&format!("{p}.attn.v"))?,
                    o: lin(&format!("{p}.attn.o"))?,
                    ln2: norm(&format!("{p}.ln2"))?,
                    up: lin(&format!("{p}.ffn.up"))?,
                    down: lin(&format!("{p}.ffn.down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token: store.id("encoder.embed.token")?,
            position: store.id("encoder.embed.position")?,
            layers,
            conv: [store.id("fusion.conv1.weight")?, store.id("fusion.conv2.weight")?],
            bn: [norm("fusion.bn1")?, norm("fusion.bn2")?],
            attn_proj: lin("fusion.attn_proj")?,
            norm: norm("fusion.norm")?,
            proj: lin("fusion.proj")?,
            head: lin(head.prefix())?,
        })
    }
}

/// Running batch-norm statistics, keyed by buffer name.
pub type Buffers = BTreeMap<String, Tensor>;

pub(crate) fn bn_buffer_names(block: usize) -> (String, String) {
    (format!("fusion.bn{}.running_mean", block + 1), format!("fusion.bn{}.running_var", block + 1))
}

pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    head: HeadKind,
    params: ParamStore,
    buffers: Buffers,
    layout: Layout,
}

/// Graph handles produced by one batched forward pass.
pub(crate) struct Forward {
    pub output: Var,
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// Bias the regressor starts from: the middle of the normalized target range.
/// With non-negative features and a zero bias, an output whose pre-activation
/// starts negative for every sample never receives gradient through the ReLU.
pub const REGRESSOR_BIAS_INIT: f64 = 0.5;

fn add_head<R: Rng + ?Sized>(s: &mut ParamStore, head: HeadKind, fan_in: usize, rng: &mut R) -> Result<()> {
    add_linear(s, head.prefix(), fan_in, head.outputs(), rng)?;
    if head == HeadKind::Regression {
        let id = s.id(&format!("{}.bias", head.prefix()))?;
        s.get_mut(id).data_mut().fill(REGRESSOR_BIAS_INIT);
    }
    Ok(())
}

fn add_linear<R: Rng + ?Sized>(
    s: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    s.add(&format!("{name}.weight"), ParamKind::Weight, &[fan_in, fan_out], rng)?;
    s.add(&format!("{name}.bias"), ParamKind::Bias, &[fan_out], rng)?;
    Ok(())
}

fn add_norm<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<()> {
    s.add(&format!("{name}.gain"), ParamKind::Gain, &[width], rng)?;
    s.add(&format!("{name}.bias"), ParamKind::Bias, &[width], rng)?;
    Ok(())
}

impl Model {
    /// Fresh model; `config.vocab_size` is taken from `vocab`.
    pub fn new<R: Rng + ?Sized>(mut config: ModelConfig, vocab: Vocab, head: HeadKind, rng: &mut R) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let (d, s) = (config.model_dim, config.max_len);
        let mut p = ParamStore::new();
        p.add("encoder.embed.token", ParamKind::Embedding, &[config.vocab_size, d], rng)?;
        p.add("encoder.embed.position", ParamKind::Embedding, &[s, d], rng)?;
        for l in 0..config.num_layers {
            let pre = format!("encoder.layers.{l}");
            add_norm(&mut p, &format!("{pre}.ln1"), d, rng)?;
            for m in ["q", "k", "v", "o"] {
                add_linear(&mut p, &format!("{pre}.attn.{m}"), d, d, rng)?;
            }
            add_norm(&mut p, &format!("{pre}.ln2"), d, rng)?;
            add_linear(&mut p, &format!("{pre}.ffn.up"), d, config.ffn_dim, rng)?;
            add_linear(&mut p, &format!("{pre}.ffn.down"), config.ffn_dim, d, rng)?;
        }
        let [c1, c2] = config.conv_channels;
        let in_channels = 3 * config.num_heads;
        p.add("fusion.conv1.weight", ParamKind::Weight, &[c1, in_channels, 3, 3], rng)?;
        add_norm(&mut p, "fusion.bn1", c1, rng)?;
        p.add("fusion.conv2.weight", ParamKind::Weight, &[c2, c1, 3, 3], rng)?;
        add_norm(&mut p, "fusion.bn2", c2, rng)?;
        let side = config.conv_output_side();
        add_linear(&mut p, "fusion.attn_proj", c2 * side * side, config.attention_embed_dim, rng)?;
        let fused = 3 * d + config.attention_embed_dim;
        add_norm(&mut p, "fusion.norm", fused, rng)?;
        add_linear(&mut p, "fusion.proj", fused, config.feature_dim, rng)?;
        add_head(&mut p, head, config.feature_dim, rng)?;

        let mut buffers = Buffers::new();
        for (block, c) in [c1, c2].into_iter().enumerate() {
            let (m, v) = bn_buffer_names(block);
            buffers.insert(m, Tensor::zeros(&[c]));
            buffers.insert(v, Tensor::filled(&[c], 1.0));
        }
        let layout = Layout::resolve(&p, &config, head)?;
        Ok(Self { config, vocab, head, params: p, buffers, layout })
    }

    /// Reassembles a model from stored tensors, validating names and shapes
    /// against a freshly constructed reference.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        head: HeadKind,
        params: ParamStore,
        buffers: Buffers,
    ) -> Result<Self> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Self::new(config, vocab, head, &mut rng)?;
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for e in reference.params.entries() {
            let got =
                params.by_name(&e.name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if got.shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    got.shape(),
                    e.tensor.shape()
                )));
            }
        }
        for (name, t) in &reference.buffers {
            match buffers.get(name) {
                Some(b) if b.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen buffer {name}"))),
            }
        }
        let Model { config, vocab, head, .. } = reference;
        let layout = Layout::resolve(&params, &config, head)?;
        Ok(Self { config, vocab, head, params, buffers, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &Buffers {
        &self.buffers
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Drops the current head and attaches a freshly initialized one. The
    /// base parameters and running statistics are untouched.
    pub fn replace_head<R: Rng + ?Sized>(&mut self, head: HeadKind, rng: &mut R) -> Result<()> {
        self.params.retain(|n| !n.starts_with("head."));
        add_head(&mut self.params, head, self.config.feature_dim, rng)?;
        self.head = head;
        self.layout = Layout::resolve(&self.params, &self.config, head)?;
        Ok(())
    }

    /// Digest of every non-head parameter and the batch-norm buffers.
    pub fn base_digest(&self) -> String {
        let params =
            self.params.entries().iter().filter(|e| !e.name.starts_with("head.")).map(|e| (e.name.as_str(), &e.tensor));
        let buffers = self.buffers.iter().map(|(n, t)| (n.as_str(), t));
        digest(params.chain(buffers))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.first_non_finite() {
            Some(name) => Err(Error::NonFinite(format!("parameter {name}"))),
            None => Ok(()),
        }
    }

    /// Tokenizes and encodes raw text for this model.
    pub fn prepare(&self, text: &str) -> Result<(Vec<TokenSpan>, EncodedInput)> {
        let tokens = tokenize(text)?;
        let input = encode_ids(&tokens, &self.vocab, self.config.max_len)?;
        Ok((tokens, input))
    }

    pub(crate) fn validate_input(&self, input: &EncodedInput) -> Result<()> {
        if input.ids.len() != self.config.max_len {
            return Err(Error::Shape(format!("expected {} ids, got {}", self.config.max_len, input.ids.len())));
        }
        if input.true_len == 0 {
            return Err(Error::InvalidInput("true_len must be at least 1".into()));
        }
        if input.true_len > self.config.max_len {
            return Err(Error::Shape(format!("true_len {} exceeds max_len {}", input.true_len, self.config.max_len)));
        }
        if let Some(bad) = input.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Batched forward pass through encoder, fusion, and head.
    pub(crate) fn forward(&self, g: &mut Graph<'_>, inputs: &[&EncodedInput], pass: &mut Pass<'_>) -> Result<Forward> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        self.check_finite()?;
        let mut pooled = Vec::with_capacity(inputs.len());
        let mut attention = Vec::with_capacity(inputs.len());
        for input in inputs {
            self.validate_input(input)?;
            let enc = encoder::encode_graph(g, self, input, pass)?;
            let (emb, att) = encoder::last3_graph(g, &enc)?;
            pooled.push(g.mean_rows(emb, input.true_len)?);
            attention.push(att);
        }
        let pooled = g.stack(&pooled)?;
        let attention = g.stack(&attention)?;
        let (attn_embed, bn_stats) = fusion::attention_embed_graph(g, self, attention, pass)?;
        let features = fusion::fuse_graph(g, self, pooled, attn_embed, pass)?;
        let output = heads::head_graph(g, self, features)?;
        Ok(Forward { output, bn_stats })
    }

    /// Folds observed batch statistics into the running estimates.
    pub(crate) fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (block, s) in stats {
            let (m, v) = bn_buffer_names(*block);
            for (slot, new) in [(m, &s.mean), (v, &s.var)] {
                let buf = self.buffers.get_mut(&slot).expect("buffer exists");
                for (r, x) in buf.data_mut().iter_mut().zip(new) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
                }
            }
        }
    }

    /// Eval-mode head outputs, one row per input: a probability for the
    /// classifier, four normalized span values for the regressor.
    pub fn predict(&self, inputs: &[EncodedInput]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(CHUNK) {
            let refs: Vec<&EncodedInput> = chunk.iter().collect();
            let mut g = Graph::new(&self.params);
            let fwd = self.forward(&mut g, &refs, &mut Pass::eval())?;
            let k = self.head.outputs();
            out.extend(g.value(fwd.output).data().chunks(k).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}
