//! Pre-norm Transformer encoder-decoder with sinusoidal positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::decoding::StepDecoder;
use crate::model::ModelError;
use crate::rnn::MASK_BIAS;
use crate::tensor::{log_softmax, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, ModelError>;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 6,
            ffn_dim: 512,
            dropout: 0.0,
            label_smoothing: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(ModelError::ConfigError(
                "d_model, heads, layers and ffn_dim must be at least 1".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::ConfigError(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::ConfigError(format!("d_model {} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::ConfigError(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ModelError::ConfigError(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(ModelError::ConfigError(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut data = Vec::with_capacity(length * d_model);
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::new(vec![length, d_model], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub o: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub hidden: Affine,
    pub out: Affine,
}

/// One block. Encoder blocks have no cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub self_norm: Norm,
    pub self_attn: AttentionParams,
    pub cross: Option<(Norm, AttentionParams)>,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
struct TransformerIds {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc: Vec<BlockParams>,
    enc_norm: Norm,
    dec: Vec<BlockParams>,
    dec_norm: Norm,
    out: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub params: ParamStore,
    ids: TransformerIds,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Affine> {
        let mut a = self.linear(name, fan_in, fan_out)?;
        a.b = Some(self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?);
        Ok(a)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Affine> {
        let w = self
            .store
            .add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, self.rng)?;
        Ok(Affine { w, b: None })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        let gain = self.store.add(format!("{name}.g"), Tensor::ones(&[d]))?;
        let bias = self.store.add(format!("{name}.b"), Tensor::zeros(&[d]))?;
        Ok(Norm { gain, bias })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttentionParams> {
        Ok(AttentionParams {
            q: self.affine(&format!("{name}.q"), d, d)?,
            // A key bias shifts whole score rows, which softmax ignores.
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.affine(&format!("{name}.v"), d, d)?,
            o: self.affine(&format!("{name}.o"), d, d)?,
        })
    }

    fn block(&mut self, name: &str, d: usize, ffn: usize, cross: bool) -> Result<BlockParams> {
        let self_norm = self.norm(&format!("{name}.ln_self"), d)?;
        let self_attn = self.attention(&format!("{name}.self"), d)?;
        let cross = if cross {
            Some((self.norm(&format!("{name}.ln_cross"), d)?, self.attention(&format!("{name}.cross"), d)?))
        } else {
            None
        };
        let ffn_norm = self.norm(&format!("{name}.ln_ffn"), d)?;
        let ffn = FeedForward {
            hidden: self.affine(&format!("{name}.ffn1"), d, ffn)?,
            out: self.affine(&format!("{name}.ffn2"), ffn, d)?,
        };
        Ok(BlockParams {
            self_norm,
            self_attn,
            cross,
            ffn_norm,
            ffn,
        })
    }
}

impl TransformerModel {
    pub fn new(config: TransformerConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if src_vocab == 0 || tgt_vocab == 0 {
            return Err(ModelError::ConfigError("vocabularies must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (d, f) = (config.d_model, config.ffn_dim);
        let src_embed = b.store.add_uniform("src_embed", &[src_vocab, d], src_vocab, d, b.rng)?;
        let tgt_embed = b.store.add_uniform("tgt_embed", &[tgt_vocab, d], tgt_vocab, d, b.rng)?;
        let enc = (0..config.layers)
            .map(|l| b.block(&format!("enc.l{l}"), d, f, false))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = b.norm("enc.ln", d)?;
        let dec = (0..config.layers)
            .map(|l| b.block(&format!("dec.l{l}"), d, f, true))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = b.norm("dec.ln", d)?;
        let out = b.affine("out", d, tgt_vocab)?;
        // The final layer norm feeds unit-variance features, so the output
        // projection uses the narrower fan-in range 1/sqrt(d).
        let r = 1.0 / (d as f64).sqrt();
        b.store
            .value_mut(out.w)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = b.rng.gen_range(-r..r));
        Ok(Self {
            config,
            src_vocab,
            tgt_vocab,
            params: b.store,
            ids: TransformerIds {
                src_embed,
                tgt_embed,
                enc,
                enc_norm,
                dec,
                dec_norm,
                out,
            },
        })
    }

    pub fn encoder_blocks(&self) -> &[BlockParams] {
        &self.ids.enc
    }

    pub fn decoder_blocks(&self) -> &[BlockParams] {
        &self.ids.dec
    }
}

fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => x,
    }
}

/// `x W + b` over the last axis of a rank-3 `[B, T, in]` tensor.
fn affine3<'a>(g: &mut Graph<'a>, store: &'a ParamStore, p: Affine, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let w = g.param(store, p.w);
    let out = g.shape(w)[1];
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let mut y = g.matmul(flat, w)?;
    if let Some(b) = p.b {
        let b = g.param(store, b);
        y = g.add(y, b)?;
    }
    Ok(g.reshape(y, &[s[0], s[1], out])?)
}

fn norm3<'a>(g: &mut Graph<'a>, store: &'a ParamStore, p: Norm, x: Var) -> Result<Var> {
    let gain = g.param(store, p.gain);
    let bias = g.param(store, p.bias);
    Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
}

/// `[B, T, d]` to `[B*H, T, d/H]`.
fn split_heads(g: &mut Graph<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[b * heads, t, d / heads])?)
}

fn merge_heads(g: &mut Graph<'_>, x: Var, batch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (heads, t, dh) = (s[0] / batch, s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[batch, t, heads * dh])?)
}

/// Additive attention bias `[B*H, Tq, Tk]`: [`MASK_BIAS`] on padded keys
/// and, when `causal`, on keys after the query. A query's own position is
/// never masked in causal mode, so every row keeps at least one key.
pub fn attention_bias(key_mask: &[Vec<f64>], queries: usize, heads: usize, causal: bool) -> Tensor {
    let tk = key_mask.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(key_mask.len() * heads * queries * tk);
    for row in key_mask {
        let mut one = Vec::with_capacity(queries * tk);
        for i in 0..queries {
            for (j, &m) in row.iter().enumerate() {
                let blocked = if causal { j > i || (m == 0.0 && j != i) } else { m == 0.0 };
                one.push(if blocked { MASK_BIAS } else { 0.0 });
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&one);
        }
    }
    Tensor::new(vec![key_mask.len() * heads, queries, tk], data).expect("bias shape")
}

/// Multi-head scaled dot-product attention. `query` is `[B, Tq, d]`,
/// `memory` is `[B, Tk, d]` and `bias` comes from [`attention_bias`].
/// Returns the projected output `[B, Tq, d]` and the weights
/// `[B*H, Tq, Tk]`.
pub fn multi_head_attention<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    p: &AttentionParams,
    query: Var,
    memory: Var,
    bias: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let (qs, ms) = (g.shape(query).to_vec(), g.shape(memory).to_vec());
    if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != ms[2] || qs[2] % heads != 0 {
        return Err(ModelError::Tensor(TensorError::ShapeError {
            op: "multi_head_attention",
            lhs: qs,
            rhs: ms,
        }));
    }
    let batch = qs[0];
    let dh = qs[2] / heads;
    let q = affine3(g, store, p.q, query)?;
    let k = affine3(g, store, p.k, memory)?;
    let v = affine3(g, store, p.v, memory)?;
    let (q, k, v) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = g.add(scores, bias)?;
    let weights = g.softmax(scores);
    let ctx = g.batch_matmul(weights, v, false)?;
    let ctx = merge_heads(g, ctx, batch)?;
    let out = affine3(g, store, p.o, ctx)?;
    Ok((out, weights))
}

/// Biases for one block invocation.
#[derive(Clone, Copy)]
pub struct BlockMasks {
    pub self_bias: Var,
    pub cross_bias: Option<Var>,
}

/// Pre-norm block: `x + SelfAttn(LN(x))`, then `x + CrossAttn(LN(x), context)`
/// for decoder blocks, then `x + FFN(LN(x))` with a ReLU hidden layer.
pub fn transformer_block<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    p: &BlockParams,
    x: Var,
    context: Option<Var>,
    masks: BlockMasks,
    heads: usize,
    dropout_rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let h = norm3(g, store, p.self_norm, x)?;
    let (a, _) = multi_head_attention(g, store, &p.self_attn, h, h, masks.self_bias, heads)?;
    let a = dropout(g, a, dropout_rate, rng.as_deref_mut());
    let mut x = g.add(x, a)?;
    if let Some((norm, attn)) = &p.cross {
        let ctx = context.ok_or_else(|| ModelError::ConfigError("decoder block needs encoder context".into()))?;
        let bias = masks
            .cross_bias
            .ok_or_else(|| ModelError::ConfigError("decoder block needs a cross-attention mask".into()))?;
        let h = norm3(g, store, *norm, x)?;
        let (a, _) = multi_head_attention(g, store, attn, h, ctx, bias, heads)?;
        let a = dropout(g, a, dropout_rate, rng.as_deref_mut());
        x = g.add(x, a)?;
    }
    let h = norm3(g, store, p.ffn_norm, x)?;
    let h = affine3(g, store, p.ffn.hidden, h)?;
    let h = g.relu(h);
    let h = affine3(g, store, p.ffn.out, h)?;
    let h = dropout(g, h, dropout_rate, rng.as_deref_mut());
    Ok(g.add(x, h)?)
}

/// `embedding * sqrt(d) + PE` for a padded id batch, as `[B, T, d]`.
fn embed<'a>(g: &mut Graph<'a>, model: &'a TransformerModel, table: ParamId, ids: &[Vec<usize>]) -> Result<Var> {
    let (b, t, d) = (ids.len(), ids.first().map_or(0, Vec::len), model.config.d_model);
    if b == 0 || t == 0 {
        return Err(ModelError::ConfigError("empty id batch".into()));
    }
    let table = g.param(&model.params, table);
    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    let x = g.embedding(table, &flat)?;
    let x = g.scale(x, (d as f64).sqrt());
    let pe = positional_encoding(t, d)?;
    let pe = g.constant(pe);
    let x = g.reshape(x, &[b, t, d])?;
    Ok(g.add(x, pe)?)
}

/// Encoder output `[B, n, d]` after the final layer norm.
pub fn encode<'a>(
    g: &mut Graph<'a>,
    model: &'a TransformerModel,
    source: &[Vec<usize>],
    source_mask: &[Vec<f64>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let cfg = &model.config;
    let store = &model.params;
    let mut x = embed(g, model, model.ids.src_embed, source)?;
    x = dropout(g, x, cfg.dropout, rng.as_deref_mut());
    let n = source[0].len();
    let bias = g.constant(attention_bias(source_mask, n, cfg.heads, false));
    let masks = BlockMasks {
        self_bias: bias,
        cross_bias: None,
    };
    for p in &model.ids.enc {
        x = transformer_block(g, store, p, x, None, masks, cfg.heads, cfg.dropout, rng.as_deref_mut())?;
    }
    norm3(g, store, model.ids.enc_norm, x)
}

/// Logits `[B*t, V]` (row-major over batch then position) for target
/// prefixes `[B, t]` attending causally to themselves and to `enc_out`.
pub fn decode_logits<'a>(
    g: &mut Graph<'a>,
    model: &'a TransformerModel,
    prefix: &[Vec<usize>],
    prefix_mask: &[Vec<f64>],
    enc_out: Var,
    source_mask: &[Vec<f64>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let cfg = &model.config;
    let store = &model.params;
    let t = prefix.first().map_or(0, Vec::len);
    let mut y = embed(g, model, model.ids.tgt_embed, prefix)?;
    y = dropout(g, y, cfg.dropout, rng.as_deref_mut());
    let self_bias = g.constant(attention_bias(prefix_mask, t, cfg.heads, true));
    let cross_bias = g.constant(attention_bias(source_mask, t, cfg.heads, false));
    let masks = BlockMasks {
        self_bias,
        cross_bias: Some(cross_bias),
    };
    for p in &model.ids.dec {
        y = transformer_block(g, store, p, y, Some(enc_out), masks, cfg.heads, cfg.dropout, rng.as_deref_mut())?;
    }
    let y = norm3(g, store, model.ids.dec_norm, y)?;
    let logits = affine3(g, store, model.ids.out, y)?;
    Ok(g.reshape(logits, &[prefix.len() * t, model.tgt_vocab])?)
}

/// Mean masked cross-entropy under teacher forcing, with the configured
/// label smoothing.
pub fn forward_teacher_forced<'a>(
    g: &mut Graph<'a>,
    model: &'a TransformerModel,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let enc = encode(g, model, &batch.source, &batch.source_mask, rng.as_deref_mut())?;
    let logits = decode_logits(g, model, &batch.target_in, &batch.target_mask, enc, &batch.source_mask, rng)?;
    let targets: Vec<usize> = batch.target_out.iter().flatten().copied().collect();
    let mask: Vec<f64> = batch.target_mask.iter().flatten().copied().collect();
    Ok(g.cross_entropy_smoothed(logits, &targets, &mask, model.config.label_smoothing)?)
}

impl TransformerModel {
    /// Encoder output `[n, d]` for one unpadded source.
    pub fn encode(&self, source: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = encode(&mut g, self, &[source.to_vec()], &[vec![1.0; source.len()]], None)?;
        Ok(g.value(enc).clone().reshaped(&[source.len(), self.config.d_model])?)
    }

    /// Logits `[t, V]` for a single prefix (starting with BOS) against a
    /// precomputed encoder output.
    pub fn prefix_logits(&self, enc_out: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let n = enc_out.shape()[0];
        let mut g = Graph::new();
        let enc = g.constant(enc_out.clone().reshaped(&[1, n, self.config.d_model])?);
        let logits = decode_logits(
            &mut g,
            self,
            &[prefix.to_vec()],
            &[vec![1.0; prefix.len()]],
            enc,
            &[vec![1.0; n]],
            None,
        )?;
        Ok(g.value(logits).clone())
    }
}

/// Decoder state for incremental inference: the tokens emitted so far,
/// including the leading BOS once the first step has run.
#[derive(Debug, Clone)]
pub struct TransformerState {
    prefix: Vec<usize>,
}

impl StepDecoder for TransformerModel {
    type Memory = Tensor;
    type State = TransformerState;

    fn target_vocab(&self) -> usize {
        self.tgt_vocab
    }

    fn start(&self, source: &[usize]) -> (Tensor, TransformerState) {
        let enc = self.encode(source).expect("source ids within vocabulary");
        (enc, TransformerState { prefix: Vec::new() })
    }

    fn step(&self, memory: &Tensor, state: &TransformerState, prev: usize) -> (Vec<f64>, TransformerState) {
        let mut prefix = state.prefix.clone();
        prefix.push(prev);
        let logits = self.prefix_logits(memory, &prefix).expect("token ids within vocabulary");
        let last = logits.row(prefix.len() - 1);
        (log_softmax(last), TransformerState { prefix })
    }
}
