//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use translit_core::corpus::{BatchSize, Direction};
use translit_core::joint::JointConfig;
use translit_core::model::{BackboneConfig, ModelKind};
use translit_core::rnn::RnnConfig;
use translit_core::training::{ScheduleKind, ScheduleSpec, TrainConfig};
use translit_core::transformer::TransformerConfig;

use crate::CliError;

/// Keys every model kind accepts.
const COMMON_KEYS: &[&str] = &[
    "direction",
    "model",
    "profile",
    "corpus",
    "test_corpus",
    "test_fraction",
    "split_seed",
    "table",
    "checkpoint",
    "report",
    "seed",
    "beam_width",
];

const JOINT_KEYS: &[&str] = &[
    "max_in",
    "max_out",
    "allow_epsilon",
    "em_iterations",
    "prune_eps",
    "order",
    "discount",
    "trim_min_count",
    "max_expand",
];

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "max_steps",
    "batch_size",
    "batch_unit",
    "lr_schedule",
    "base_lr",
    "decay_factor",
    "decay_every_epochs",
    "warmup_steps",
    "clip_norm",
    "eval_every",
    "eval_train",
    "target_train_wer",
    "dropout",
    "layers",
];

const RNN_KEYS: &[&str] = &["embed_dim", "hidden_units"];
const TRANSFORMER_KEYS: &[&str] = &["d_model", "heads", "ffn_dim", "label_smoothing"];

/// Raw `key = value` lines in file order, with their line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string(), idx + 1));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.retain(|(k, _, _)| k != key);
        self.entries.push((key.to_string(), value.to_string(), 0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub direction: Direction,
    pub model: ModelKind,
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub test_fraction: Option<f64>,
    pub split_seed: u64,
    pub table: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub seed: u64,
    pub beam_width: usize,
    pub joint: JointConfig,
    /// `None` for the joint model.
    pub backbone: Option<BackboneConfig>,
    pub train: TrainConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn allowed_keys(kind: ModelKind) -> Vec<&'static str> {
    let mut keys = COMMON_KEYS.to_vec();
    match kind {
        ModelKind::Joint => keys.extend(JOINT_KEYS),
        ModelKind::Rnn | ModelKind::RnnAtt => {
            keys.extend(TRAIN_KEYS);
            keys.extend(RNN_KEYS);
        }
        ModelKind::Transformer => {
            keys.extend(TRAIN_KEYS);
            keys.extend(TRANSFORMER_KEYS);
        }
    }
    keys
}

fn known_anywhere(key: &str) -> bool {
    [COMMON_KEYS, JOINT_KEYS, TRAIN_KEYS, RNN_KEYS, TRANSFORMER_KEYS]
        .iter()
        .any(|set| set.contains(&key))
}

/// Defaults for the `desk` (small, fast) and `full` (full-size) profiles.
fn defaults(kind: ModelKind, full: bool) -> (Option<BackboneConfig>, TrainConfig, JointConfig) {
    let joint = JointConfig {
        order: if full { 9 } else { 3 },
        ..JointConfig::default()
    };
    let rnn = |attention| {
        if full {
            RnnConfig {
                embed_dim: 128,
                hidden_units: 512,
                layers: 1,
                attention,
                dropout: 0.0,
            }
        } else {
            RnnConfig {
                embed_dim: 32,
                hidden_units: 64,
                layers: 1,
                attention,
                dropout: 0.0,
            }
        }
    };
    let rnn_train = if full {
        TrainConfig {
            epochs: 100,
            batch: BatchSize::Sequences(32),
            schedule: ScheduleSpec::rnn_default(),
            eval_every: 10,
            ..TrainConfig::default()
        }
    } else {
        TrainConfig {
            epochs: 80,
            batch: BatchSize::Sequences(16),
            schedule: ScheduleSpec {
                decay_factor: 0.7,
                decay_every_epochs: 10,
                ..ScheduleSpec::constant(0.005)
            },
            eval_every: 10,
            ..TrainConfig::default()
        }
    };
    match kind {
        ModelKind::Joint => (None, TrainConfig::default(), joint),
        ModelKind::Rnn => (Some(BackboneConfig::Rnn(rnn(false))), rnn_train, joint),
        ModelKind::RnnAtt => (Some(BackboneConfig::Rnn(rnn(true))), rnn_train, joint),
        ModelKind::Transformer => {
            if full {
                let train = TrainConfig {
                    epochs: u64::MAX,
                    max_steps: Some(100_000),
                    batch: BatchSize::Tokens(4096),
                    schedule: ScheduleSpec::transformer_default(),
                    eval_every: 10,
                    ..TrainConfig::default()
                };
                (Some(BackboneConfig::Transformer(TransformerConfig::default())), train, joint)
            } else {
                let cfg = TransformerConfig {
                    d_model: 64,
                    heads: 2,
                    layers: 2,
                    ffn_dim: 128,
                    dropout: 0.0,
                    label_smoothing: 0.0,
                };
                let train = TrainConfig {
                    epochs: 20,
                    batch: BatchSize::Sequences(16),
                    schedule: ScheduleSpec {
                        decay_factor: 0.5,
                        decay_every_epochs: 10,
                        ..ScheduleSpec::constant(0.005)
                    },
                    eval_every: 10,
                    ..TrainConfig::default()
                };
                (Some(BackboneConfig::Transformer(cfg)), train, joint)
            }
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let kv = KeyValues::parse(&text)?;
        Self::from_key_values(&kv, path.parent())
    }

    /// Validates every key against the chosen model kind. Relative paths are
    /// resolved against `base_dir`.
    pub fn from_key_values(kv: &KeyValues, base_dir: Option<&Path>) -> Result<Self, CliError> {
        let mut seen = BTreeMap::new();
        for (k, _, line) in &kv.entries {
            if !known_anywhere(k) {
                return Err(CliError::Config(format!("unknown key `{k}` (line {line})")));
            }
            if let Some(prev) = seen.insert(k.as_str(), *line) {
                if prev != 0 && *line != 0 {
                    return Err(CliError::Config(format!("key `{k}` given twice (lines {prev} and {line})")));
                }
            }
        }
        let model: ModelKind = kv
            .get("model")
            .ok_or_else(|| CliError::Config("missing key `model`".into()))?
            .parse()
            .map_err(CliError::Config)?;
        let allowed = allowed_keys(model);
        if let Some((k, _, _)) = kv.entries.iter().find(|(k, _, _)| !allowed.contains(&k.as_str())) {
            return Err(CliError::Config(format!("key `{k}` does not apply to model {model}")));
        }
        let direction: Direction = kv
            .get("direction")
            .ok_or_else(|| CliError::Config("missing key `direction`".into()))?
            .parse()
            .map_err(CliError::Config)?;
        let full = match kv.get("profile").unwrap_or("desk") {
            "desk" => false,
            "full" => true,
            other => return Err(CliError::Config(format!("invalid value {other:?} for key `profile`"))),
        };
        let (mut backbone, mut train, mut joint) = defaults(model, full);
        let path = |key: &str| {
            kv.get(key).map(|v| match base_dir {
                Some(dir) if Path::new(v).is_relative() => dir.join(v),
                _ => PathBuf::from(v),
            })
        };
        let seed = kv.get("seed").map(|v| parse_value("seed", v)).transpose()?.unwrap_or(1);
        train.seed = seed;

        for (key, value, _) in &kv.entries {
            let (key, value) = (key.as_str(), value.as_str());
            match key {
                "max_in" => joint.max_in = parse_value(key, value)?,
                "max_out" => joint.max_out = parse_value(key, value)?,
                "allow_epsilon" => joint.allow_epsilon = parse_value(key, value)?,
                "em_iterations" => joint.em_iterations = parse_value(key, value)?,
                "prune_eps" => joint.prune_eps = parse_value(key, value)?,
                "order" => joint.order = parse_value(key, value)?,
                "discount" => joint.discount = parse_value(key, value)?,
                "trim_min_count" => joint.trim_min_count = parse_value(key, value)?,
                "max_expand" => joint.max_expand = parse_value(key, value)?,
                "epochs" => train.epochs = parse_value(key, value)?,
                "max_steps" => train.max_steps = Some(parse_value(key, value)?),
                "clip_norm" => train.clip_norm = parse_value(key, value)?,
                "eval_every" => train.eval_every = parse_value(key, value)?,
                "eval_train" => train.eval_train = parse_value(key, value)?,
                "target_train_wer" => train.target_train_wer = Some(parse_value(key, value)?),
                "base_lr" => train.schedule.base_lr = parse_value(key, value)?,
                "decay_factor" => train.schedule.decay_factor = parse_value(key, value)?,
                "decay_every_epochs" => train.schedule.decay_every_epochs = parse_value(key, value)?,
                "warmup_steps" => train.schedule.warmup_steps = parse_value(key, value)?,
                "lr_schedule" => {
                    train.schedule.kind = match value {
                        "step_decay" => ScheduleKind::StepDecay,
                        "warmup" => ScheduleKind::Warmup,
                        other => return Err(CliError::Config(format!("invalid value {other:?} for key `lr_schedule`"))),
                    }
                }
                _ => {}
            }
        }

        let batch_size: usize = kv
            .get("batch_size")
            .map(|v| parse_value("batch_size", v))
            .transpose()?
            .unwrap_or(match train.batch {
                BatchSize::Sequences(n) | BatchSize::Tokens(n) => n,
            });
        let by_tokens = match kv.get("batch_unit") {
            None => matches!(train.batch, BatchSize::Tokens(_)),
            Some("sequences") => false,
            Some("tokens") => true,
            Some(other) => return Err(CliError::Config(format!("invalid value {other:?} for key `batch_unit`"))),
        };
        if batch_size == 0 {
            return Err(CliError::Config("batch_size must be at least 1".into()));
        }
        train.batch = if by_tokens {
            BatchSize::Tokens(batch_size)
        } else {
            BatchSize::Sequences(batch_size)
        };

        match &mut backbone {
            Some(BackboneConfig::Rnn(c)) => {
                for (key, value, _) in &kv.entries {
                    match key.as_str() {
                        "embed_dim" => c.embed_dim = parse_value(key, value)?,
                        "hidden_units" => c.hidden_units = parse_value(key, value)?,
                        "layers" => c.layers = parse_value(key, value)?,
                        "dropout" => c.dropout = parse_value(key, value)?,
                        _ => {}
                    }
                }
                c.validate().map_err(|e| CliError::Config(e.to_string()))?;
            }
            Some(BackboneConfig::Transformer(c)) => {
                for (key, value, _) in &kv.entries {
                    match key.as_str() {
                        "d_model" => c.d_model = parse_value(key, value)?,
                        "heads" => c.heads = parse_value(key, value)?,
                        "layers" => c.layers = parse_value(key, value)?,
                        "ffn_dim" => c.ffn_dim = parse_value(key, value)?,
                        "dropout" => c.dropout = parse_value(key, value)?,
                        "label_smoothing" => c.label_smoothing = parse_value(key, value)?,
                        _ => {}
                    }
                }
                c.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if train.schedule.kind == ScheduleKind::Warmup {
                    train.schedule.d_model = c.d_model;
                }
            }
            None => {}
        }
        if backbone.is_some() {
            train.schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if !(train.clip_norm > 0.0) {
                return Err(CliError::Config("clip_norm must be positive".into()));
            }
        }
        if joint.order == 0 {
            return Err(CliError::Config("order must be at least 1".into()));
        }

        let test_fraction = kv
            .get("test_fraction")
            .map(|v| parse_value::<f64>("test_fraction", v))
            .transpose()?;
        if test_fraction.is_some_and(|f| !(f > 0.0 && f < 1.0)) {
            return Err(CliError::Config("test_fraction must lie strictly between 0 and 1".into()));
        }
        let beam_width: usize = kv
            .get("beam_width")
            .map(|v| parse_value("beam_width", v))
            .transpose()?
            .unwrap_or(if model == ModelKind::Joint { joint.beam } else { 1 });
        if beam_width == 0 {
            return Err(CliError::Config("beam_width must be at least 1".into()));
        }
        joint.beam = beam_width;
        train.eval_beam = beam_width;

        Ok(Self {
            direction,
            model,
            corpus: path("corpus"),
            test_corpus: path("test_corpus"),
            test_fraction,
            split_seed: kv.get("split_seed").map(|v| parse_value("split_seed", v)).transpose()?.unwrap_or(0),
            table: path("table"),
            checkpoint: path("checkpoint"),
            report: path("report"),
            seed,
            beam_width,
            joint,
            backbone,
            train,
        })
    }
}
