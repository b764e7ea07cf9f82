//! Shared model plumbing for the neural backbones.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{CharSeq, Vocabulary};
use crate::corpus::{Batch, Direction};
use crate::decoding::{beam_decode, default_max_len, greedy_decode, BeamConfig};
use crate::rnn::{self, RnnConfig, RnnModel};
use crate::tensor::{Graph, ParamStore, TensorError, Var};
use crate::transformer::{self, TransformerConfig, TransformerModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The four compared systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Joint,
    Rnn,
    RnnAtt,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Joint, ModelKind::Rnn, ModelKind::RnnAtt, ModelKind::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Joint => "joint",
            ModelKind::Rnn => "rnn",
            ModelKind::RnnAtt => "rnn_att",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model kind {s:?} (expected joint, rnn, rnn_att or transformer)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneConfig {
    Rnn(RnnConfig),
    Transformer(TransformerConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Rnn(RnnModel),
    Transformer(TransformerModel),
}

impl Backbone {
    pub fn new(config: &BackboneConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self, ModelError> {
        Ok(match config {
            BackboneConfig::Rnn(c) => Backbone::Rnn(RnnModel::new(c.clone(), src_vocab, tgt_vocab, seed)?),
            BackboneConfig::Transformer(c) => {
                Backbone::Transformer(TransformerModel::new(c.clone(), src_vocab, tgt_vocab, seed)?)
            }
        })
    }

    pub fn config(&self) -> BackboneConfig {
        match self {
            Backbone::Rnn(m) => BackboneConfig::Rnn(m.config.clone()),
            Backbone::Transformer(m) => BackboneConfig::Transformer(m.config.clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Backbone::Rnn(m) if m.config.attention => ModelKind::RnnAtt,
            Backbone::Rnn(_) => ModelKind::Rnn,
            Backbone::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Backbone::Rnn(m) => &m.params,
            Backbone::Transformer(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Backbone::Rnn(m) => &mut m.params,
            Backbone::Transformer(m) => &mut m.params,
        }
    }

    /// Vocabulary sizes `(source, target)` the parameters were built for.
    pub fn vocab_sizes(&self) -> (usize, usize) {
        match self {
            Backbone::Rnn(m) => (m.src_vocab, m.tgt_vocab),
            Backbone::Transformer(m) => (m.src_vocab, m.tgt_vocab),
        }
    }

    /// Teacher-forced mean cross-entropy. Dropout is active only when `rng`
    /// is given.
    pub fn loss<'a>(&'a self, g: &mut Graph<'a>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
        match self {
            Backbone::Rnn(m) => rnn::forward_teacher_forced(g, m, batch, rng),
            Backbone::Transformer(m) => transformer::forward_teacher_forced(g, m, batch, rng),
        }
    }

    /// Greedy when `beam_width` is 1, beam search otherwise.
    pub fn decode(&self, source: &[usize], beam_width: usize) -> Vec<usize> {
        let max_len = default_max_len(source.len());
        if beam_width <= 1 {
            return match self {
                Backbone::Rnn(m) => greedy_decode(m, source, max_len),
                Backbone::Transformer(m) => greedy_decode(m, source, max_len),
            };
        }
        let cfg = BeamConfig {
            beam_width,
            max_len,
            length_norm_alpha: 0.0,
        };
        match self {
            Backbone::Rnn(m) => beam_decode(m, source, &cfg),
            Backbone::Transformer(m) => beam_decode(m, source, &cfg),
        }
    }
}

/// A neural backbone with its vocabularies and conversion direction.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub direction: Direction,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub backbone: Backbone,
}

impl NeuralModel {
    pub fn new(
        direction: Direction,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        config: &BackboneConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let backbone = Backbone::new(config, src_vocab.len(), tgt_vocab.len(), seed)?;
        Ok(Self {
            direction,
            src_vocab,
            tgt_vocab,
            backbone,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.backbone.kind()
    }

    /// Converts one tokenized word; the result holds target tokens.
    pub fn translate(&self, source: &CharSeq, beam_width: usize) -> Vec<String> {
        let ids = self.src_vocab.encode_ids(source, false);
        let out = self.backbone.decode(&ids, beam_width);
        self.tgt_vocab.decode_ids(&out).tokens
    }
}
