//! Adam, learning-rate schedules, the training loop and checkpoints.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Vocabulary;
use crate::corpus::{batch_iter, BatchSize, Corpus, Direction};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{BackboneConfig, ModelError, ModelKind, NeuralModel};
use crate::rnn::RnnConfig;
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::transformer::TransformerConfig;

pub const CHECKPOINT_MAGIC: &str = "TRANSLIT-CKPT";
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {name}")]
    NanGradient { name: String },
    #[error("non-finite loss at step {step}")]
    NanLoss { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training setting: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint version {0:?}")]
    UnsupportedVersion(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not match its configuration: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update from the gradients accumulated in `store`.
    /// Nothing is modified when any gradient is not finite.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), TrainError> {
        if let Some(p) = store.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(TrainError::NanGradient { name: p.name.clone() });
        }
        if self.m.len() != store.len() {
            return Err(TrainError::InvalidConfig("optimizer built for a different parameter set".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                value[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    StepDecay,
    Warmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: u64,
    pub warmup_steps: u64,
    pub d_model: usize,
}

impl ScheduleSpec {
    /// Step decay: 5e-4, times 0.9 every 20 epochs.
    pub fn rnn_default() -> Self {
        Self {
            kind: ScheduleKind::StepDecay,
            base_lr: 0.0005,
            decay_factor: 0.9,
            decay_every_epochs: 20,
            warmup_steps: 1,
            d_model: 1,
        }
    }

    /// Inverse-square-root decay after 8000 warmup steps, base 0.2, d = 128.
    pub fn transformer_default() -> Self {
        Self {
            kind: ScheduleKind::Warmup,
            base_lr: 0.2,
            decay_factor: 1.0,
            decay_every_epochs: 1,
            warmup_steps: 8000,
            d_model: 128,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            decay_factor: 1.0,
            base_lr: lr,
            ..Self::rnn_default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("base_lr {} must be positive", self.base_lr)));
        }
        match self.kind {
            ScheduleKind::StepDecay => {
                if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
                    return Err(TrainError::InvalidConfig(format!(
                        "decay_factor {} outside (0, 1]",
                        self.decay_factor
                    )));
                }
                if self.decay_every_epochs == 0 {
                    return Err(TrainError::InvalidConfig("decay_every_epochs must be at least 1".into()));
                }
            }
            ScheduleKind::Warmup => {
                if self.warmup_steps == 0 || self.d_model == 0 {
                    return Err(TrainError::InvalidConfig("warmup_steps and d_model must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Rate for a 0-based epoch and a 1-based global step.
    pub fn lr(&self, epoch: u64, step: u64) -> f64 {
        match self.kind {
            ScheduleKind::StepDecay => rnn_lr_schedule(epoch, self),
            ScheduleKind::Warmup => warmup_lr_schedule(step, self),
        }
    }
}

/// `base_lr * decay_factor^floor(epoch / decay_every_epochs)`.
pub fn rnn_lr_schedule(epoch: u64, spec: &ScheduleSpec) -> f64 {
    let k = epoch / spec.decay_every_epochs.max(1);
    spec.base_lr * spec.decay_factor.powi(k as i32)
}

/// `base_lr * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`; step 0 counts
/// as step 1.
pub fn warmup_lr_schedule(step: u64, spec: &ScheduleSpec) -> f64 {
    let s = step.max(1) as f64;
    let w = spec.warmup_steps.max(1) as f64;
    spec.base_lr * (spec.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Optional cap on optimizer steps across epochs.
    pub max_steps: Option<u64>,
    pub batch: BatchSize,
    pub schedule: ScheduleSpec,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: u64,
    /// Beam width for evaluation decodes; 1 is greedy.
    pub eval_beam: usize,
    /// Score the training set at each evaluation.
    pub eval_train: bool,
    /// Stop after an evaluation whose training-set WER is at most this.
    pub target_train_wer: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            max_steps: None,
            batch: BatchSize::Sequences(32),
            schedule: ScheduleSpec::rnn_default(),
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            eval_every: 10,
            eval_beam: 1,
            eval_train: true,
            target_train_wer: None,
            seed: 1,
        }
    }
}

/// One evaluation-interval record, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub train_wer: Option<f64>,
    pub train_cer: Option<f64>,
    pub test_wer: Option<f64>,
    pub test_cer: Option<f64>,
    pub wall_secs: f64,
}

impl TrainRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn to_json_lines(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// Decodes every source of `corpus` and scores it with multi-reference
/// WER/CER.
pub fn evaluate_neural(model: &NeuralModel, corpus: &Corpus, beam_width: usize) -> EvalReport {
    let predictions: Vec<Vec<String>> = corpus
        .groups
        .iter()
        .map(|g| model.translate(&g.source, beam_width))
        .collect();
    evaluate(&predictions, &corpus.groups).expect("one prediction per group")
}

/// Teacher-forced training with Adam, global-norm clipping and periodic
/// evaluation. The result is a pure function of the model's initial
/// parameters, the corpus and `config`.
///
/// `on_eval` runs after every evaluation, e.g. to write a checkpoint; a
/// failing gradient leaves the model at its last good parameters.
pub fn train_loop(
    model: &mut NeuralModel,
    train: &Corpus,
    test: Option<&Corpus>,
    config: &TrainConfig,
    mut on_eval: impl FnMut(&NeuralModel, &TrainRecord) -> Result<(), TrainError>,
) -> Result<TrainReport, TrainError> {
    config.schedule.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("training corpus is empty".into()));
    }
    if train.direction != model.direction {
        return Err(TrainError::InvalidConfig(format!(
            "corpus direction {} differs from model direction {}",
            train.direction, model.direction
        )));
    }
    let pairs = train.encoded_pairs(&model.src_vocab, &model.tgt_vocab);
    let mut adam = Adam::new(model.backbone.params(), config.adam);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(u64::MAX);
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut step = 0u64;

    'epochs: for epoch in 0..config.epochs {
        let mut losses = Vec::new();
        let mut lr = config.schedule.lr(epoch, step + 1);
        for batch in batch_iter(&pairs, config.batch, config.seed, epoch) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            step += 1;
            lr = config.schedule.lr(epoch, step);
            let (loss, grads) = {
                let mut g = Graph::new();
                let loss = model.backbone.loss(&mut g, &batch, Some(&mut dropout_rng))?;
                g.backward(loss)?;
                (g.value(loss).item(), g.param_grads())
            };
            if !loss.is_finite() {
                return Err(TrainError::NanLoss { step });
            }
            let store = model.backbone.params_mut();
            store.zero_grad();
            store.accumulate(&grads)?;
            if store.grad_norm().is_finite() {
                store.clip_grad_norm(config.clip_norm);
            }
            adam.update(store, lr)?;
            losses.push(loss);
        }
        let mean = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        report.epoch_losses.push(mean);
        let out_of_steps = config.max_steps.is_some_and(|m| step >= m);
        let last = epoch + 1 == config.epochs || out_of_steps;
        if (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) || last {
            let train_eval = config.eval_train.then(|| evaluate_neural(model, train, config.eval_beam));
            let test_eval = test.map(|t| evaluate_neural(model, t, config.eval_beam));
            let record = TrainRecord {
                epoch: epoch + 1,
                step,
                loss: mean,
                lr,
                train_wer: train_eval.as_ref().map(|r| r.wer),
                train_cer: train_eval.as_ref().map(|r| r.cer),
                test_wer: test_eval.as_ref().map(|r| r.wer),
                test_cer: test_eval.as_ref().map(|r| r.cer),
                wall_secs: start.elapsed().as_secs_f64(),
            };
            on_eval(model, &record)?;
            report.records.push(record);
            let reached = matches!(
                (config.target_train_wer, train_eval.as_ref()),
                (Some(t), Some(r)) if r.wer <= t
            );
            if reached {
                break 'epochs;
            }
        }
        if out_of_steps {
            break;
        }
    }
    report.steps = step;
    Ok(report)
}

fn header_lines(model: &NeuralModel) -> Vec<(String, String)> {
    let json = |v: &Vocabulary| serde_json::to_string(v.symbols()).expect("symbols serialize");
    let mut kv = vec![
        ("kind".to_string(), model.kind().to_string()),
        ("direction".to_string(), model.direction.to_string()),
        ("src_vocab".to_string(), json(&model.src_vocab)),
        ("tgt_vocab".to_string(), json(&model.tgt_vocab)),
    ];
    match model.backbone.config() {
        BackboneConfig::Rnn(c) => {
            kv.push(("embed_dim".into(), c.embed_dim.to_string()));
            kv.push(("hidden_units".into(), c.hidden_units.to_string()));
            kv.push(("layers".into(), c.layers.to_string()));
            kv.push(("attention".into(), c.attention.to_string()));
            kv.push(("dropout".into(), c.dropout.to_string()));
        }
        BackboneConfig::Transformer(c) => {
            kv.push(("d_model".into(), c.d_model.to_string()));
            kv.push(("heads".into(), c.heads.to_string()));
            kv.push(("layers".into(), c.layers.to_string()));
            kv.push(("ffn_dim".into(), c.ffn_dim.to_string()));
            kv.push(("dropout".into(), c.dropout.to_string()));
            kv.push(("label_smoothing".into(), c.label_smoothing.to_string()));
        }
    }
    kv.push(("params".into(), model.backbone.params().len().to_string()));
    kv
}

/// Serializes a model: the `TRANSLIT-CKPT v1` line, `key=value` config
/// lines, an empty line, then one binary record per parameter (u32 name
/// length, UTF-8 name, u32 rank, u64 dims, little-endian f64 values).
pub fn checkpoint_bytes(model: &NeuralModel) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
    for (k, v) in header_lines(model) {
        writeln!(out, "{k}={v}").unwrap();
    }
    out.push(b'\n');
    for p in model.backbone.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &NeuralModel, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NeuralModel, TrainError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::CorruptCheckpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn line(&mut self) -> Result<&'b str, TrainError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| TrainError::CorruptCheckpoint("unterminated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| TrainError::CorruptCheckpoint("header is not UTF-8".into()))
    }
}

fn field<'h>(header: &'h [(String, String)], key: &str) -> Result<&'h str, TrainError> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing header key {key:?}")))
}

fn parsed<T: std::str::FromStr>(header: &[(String, String)], key: &str) -> Result<T, TrainError> {
    field(header, key)?
        .parse()
        .map_err(|_| TrainError::CorruptCheckpoint(format!("bad value for {key:?}")))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<NeuralModel, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let first = r.line()?;
    let version = first
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| TrainError::CorruptCheckpoint("bad magic".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::UnsupportedVersion(version.to_string()));
    }
    let mut header = Vec::new();
    loop {
        let line = r.line()?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::CorruptCheckpoint(format!("bad header line {line:?}")))?;
        header.push((k.to_string(), v.to_string()));
    }

    let kind: ModelKind = field(&header, "kind")?.parse().map_err(TrainError::CorruptCheckpoint)?;
    let direction: Direction = field(&header, "direction")?.parse().map_err(TrainError::CorruptCheckpoint)?;
    let vocab = |key: &str, side| -> Result<Vocabulary, TrainError> {
        let symbols: Vec<String> = serde_json::from_str(field(&header, key)?)
            .map_err(|e| TrainError::CorruptCheckpoint(format!("{key}: {e}")))?;
        Ok(Vocabulary::from_symbols(side, symbols))
    };
    let src_vocab = vocab("src_vocab", direction.source_side())?;
    let tgt_vocab = vocab("tgt_vocab", direction.target_side())?;
    let config = match kind {
        ModelKind::Rnn | ModelKind::RnnAtt => BackboneConfig::Rnn(RnnConfig {
            embed_dim: parsed(&header, "embed_dim")?,
            hidden_units: parsed(&header, "hidden_units")?,
            layers: parsed(&header, "layers")?,
            attention: parsed(&header, "attention")?,
            dropout: parsed(&header, "dropout")?,
        }),
        ModelKind::Transformer => BackboneConfig::Transformer(TransformerConfig {
            d_model: parsed(&header, "d_model")?,
            heads: parsed(&header, "heads")?,
            layers: parsed(&header, "layers")?,
            ffn_dim: parsed(&header, "ffn_dim")?,
            dropout: parsed(&header, "dropout")?,
            label_smoothing: parsed(&header, "label_smoothing")?,
        }),
        ModelKind::Joint => {
            return Err(TrainError::ConfigMismatch("joint models use their own text format".into()));
        }
    };
    let mut model = NeuralModel::new(direction, src_vocab, tgt_vocab, &config, 0)
        .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    if model.kind() != kind {
        return Err(TrainError::ConfigMismatch(format!("kind {kind} disagrees with the stored configuration")));
    }
    let count: usize = parsed(&header, "params")?;
    if count != model.backbone.params().len() {
        return Err(TrainError::ConfigMismatch(format!(
            "{count} parameters stored, configuration defines {}",
            model.backbone.params().len()
        )));
    }
    let store = model.backbone.params_mut();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TrainError::CorruptCheckpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(TrainError::CorruptCheckpoint(format!("implausible rank {rank} for {name}")));
        }
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let id = store
            .id(&name)
            .ok_or_else(|| TrainError::ConfigMismatch(format!("unknown parameter {name:?}")))?;
        if store.value(id).shape() != dims.as_slice() {
            return Err(TrainError::ConfigMismatch(format!(
                "{name}: stored shape {dims:?}, expected {:?}",
                store.value(id).shape()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| TrainError::CorruptCheckpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *store.value_mut(id) = Tensor::new(dims, data)?;
    }
    if r.pos != bytes.len() {
        return Err(TrainError::CorruptCheckpoint("trailing bytes after the last parameter".into()));
    }
    Ok(model)
}
