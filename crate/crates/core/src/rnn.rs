//! BiLSTM encoder with a stacked LSTM decoder and optional bilinear attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::decoding::StepDecoder;
use crate::model::ModelError;
use crate::tensor::{log_softmax, Graph, ParamId, ParamStore, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

/// Additive score for masked attention positions.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub layers: usize,
    pub attention: bool,
    pub dropout: f64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden_units: 512,
            layers: 1,
            attention: true,
            dropout: 0.0,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_units == 0 || self.layers == 0 {
            return Err(ModelError::ConfigError(
                "embed_dim, hidden_units and layers must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::ConfigError(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Weights of one LSTM cell: `w` is `[input + U, 4U]` with gate blocks in the
/// order input, forget, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct RnnIds {
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc_fwd: Vec<LstmParams>,
    enc_bwd: Vec<LstmParams>,
    dec: Vec<LstmParams>,
    bridge_w: Vec<ParamId>,
    bridge_b: Vec<ParamId>,
    attn: Option<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel {
    pub config: RnnConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub params: ParamStore,
    ids: RnnIds,
}

fn add_lstm(store: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut ChaCha8Rng) -> Result<LstmParams> {
    let w = store.add_uniform(format!("{name}.w"), &[input + units, 4 * units], input + units, 4 * units, rng)?;
    let mut bias = vec![0.0; 4 * units];
    bias[units..2 * units].iter_mut().for_each(|b| *b = 1.0);
    let b = store.add(format!("{name}.b"), Tensor::from_vec(bias))?;
    Ok(LstmParams { w, b, units })
}

impl RnnModel {
    /// Builds a freshly initialized model. Initialization is a pure function
    /// of `(config, vocab sizes, seed)`.
    pub fn new(config: RnnConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if src_vocab == 0 || tgt_vocab == 0 {
            return Err(ModelError::ConfigError("vocabularies must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (e, u, layers) = (config.embed_dim, config.hidden_units, config.layers);
        let src_embed = s.add_uniform("src_embed", &[src_vocab, e], src_vocab, e, &mut rng)?;
        let tgt_embed = s.add_uniform("tgt_embed", &[tgt_vocab, e], tgt_vocab, e, &mut rng)?;
        let mut enc_fwd = Vec::new();
        let mut enc_bwd = Vec::new();
        for l in 0..layers {
            let input = if l == 0 { e } else { 2 * u };
            enc_fwd.push(add_lstm(&mut s, &format!("enc.l{l}.fwd"), input, u, &mut rng)?);
            enc_bwd.push(add_lstm(&mut s, &format!("enc.l{l}.bwd"), input, u, &mut rng)?);
        }
        let mut dec = Vec::new();
        let mut bridge_w = Vec::new();
        let mut bridge_b = Vec::new();
        for l in 0..layers {
            let input = if l == 0 { e } else { u };
            dec.push(add_lstm(&mut s, &format!("dec.l{l}"), input, u, &mut rng)?);
            bridge_w.push(s.add_uniform(format!("bridge.l{l}.w"), &[2 * u, u], 2 * u, u, &mut rng)?);
            bridge_b.push(s.add(format!("bridge.l{l}.b"), Tensor::zeros(&[u]))?);
        }
        let attn = if config.attention {
            Some(s.add_uniform("attn.w", &[2 * u, u], 2 * u, u, &mut rng)?)
        } else {
            None
        };
        let feat = if config.attention { 3 * u } else { u };
        let out_w = s.add_uniform("out.w", &[feat, tgt_vocab], feat, tgt_vocab, &mut rng)?;
        let out_b = s.add("out.b", Tensor::zeros(&[tgt_vocab]))?;
        Ok(Self {
            config,
            src_vocab,
            tgt_vocab,
            params: s,
            ids: RnnIds {
                src_embed,
                tgt_embed,
                enc_fwd,
                enc_bwd,
                dec,
                bridge_w,
                bridge_b,
                attn,
                out_w,
                out_b,
            },
        })
    }

    /// Name and shape of every parameter, in creation order, without
    /// allocating them.
    pub fn param_shapes(config: &RnnConfig, src_vocab: usize, tgt_vocab: usize) -> Vec<(String, Vec<usize>)> {
        let (e, u) = (config.embed_dim, config.hidden_units);
        let mut out = vec![
            ("src_embed".to_string(), vec![src_vocab, e]),
            ("tgt_embed".to_string(), vec![tgt_vocab, e]),
        ];
        for l in 0..config.layers {
            let input = if l == 0 { e } else { 2 * u };
            for dir in ["fwd", "bwd"] {
                out.push((format!("enc.l{l}.{dir}.w"), vec![input + u, 4 * u]));
                out.push((format!("enc.l{l}.{dir}.b"), vec![4 * u]));
            }
        }
        for l in 0..config.layers {
            let input = if l == 0 { e } else { u };
            out.push((format!("dec.l{l}.w"), vec![input + u, 4 * u]));
            out.push((format!("dec.l{l}.b"), vec![4 * u]));
            out.push((format!("bridge.l{l}.w"), vec![2 * u, u]));
            out.push((format!("bridge.l{l}.b"), vec![u]));
        }
        if config.attention {
            out.push(("attn.w".to_string(), vec![2 * u, u]));
        }
        let feat = if config.attention { 3 * u } else { u };
        out.push(("out.w".to_string(), vec![feat, tgt_vocab]));
        out.push(("out.b".to_string(), vec![tgt_vocab]));
        out
    }

    pub fn lstm_params(&self) -> (&[LstmParams], &[LstmParams], &[LstmParams]) {
        (&self.ids.enc_fwd, &self.ids.enc_bwd, &self.ids.dec)
    }

    pub fn attention_param(&self) -> Option<ParamId> {
        self.ids.attn
    }
}

/// One LSTM step on a batch: `x` is `[B, in]`, `h` and `c` are `[B, U]`.
pub fn lstm_step<'a>(g: &mut Graph<'a>, store: &'a ParamStore, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let u = p.units;
    let w = g.param(store, p.w);
    let b = g.param(store, p.b);
    let xh = g.concat(&[x, h], 1)?;
    let z = g.matmul(xh, w)?;
    let z = g.add(z, b)?;
    let zi = g.narrow(z, 1, 0, u)?;
    let zf = g.narrow(z, 1, u, u)?;
    let zg = g.narrow(z, 1, 2 * u, u)?;
    let zo = g.narrow(z, 1, 3 * u, u)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let fc = g.mul(f, c)?;
    let ic = g.mul(i, cand)?;
    let c2 = g.add(fc, ic)?;
    let tc = g.tanh(c2);
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

/// `new` where `keep` is 1 and `old` where it is 0 (exact for 0/1 masks).
fn blend(g: &mut Graph<'_>, new: Var, old: Var, keep: Var, drop: Var) -> Result<Var> {
    let a = g.mul(new, keep)?;
    let b = g.mul(old, drop)?;
    Ok(g.add(a, b)?)
}

/// Encoder output for a padded batch.
pub struct Encoded {
    /// `[B, n, 2U]` top-layer forward/backward states.
    pub states: Var,
    /// Per layer: final forward state (last real token) and final backward
    /// state (first token), each `[B, U]`.
    pub finals: Vec<(Var, Var)>,
}

fn column(rows: &[Vec<usize>], t: usize) -> Vec<usize> {
    rows.iter().map(|r| r[t]).collect()
}

fn mask_columns(mask: &[Vec<f64>], t: usize, width: usize) -> (Tensor, Tensor) {
    let b = mask.len();
    let mut keep = Vec::with_capacity(b * width);
    for row in mask {
        keep.extend(std::iter::repeat(row[t]).take(width));
    }
    let drop = keep.iter().map(|m| 1.0 - m).collect();
    (
        Tensor::new(vec![b, width], keep).expect("mask shape"),
        Tensor::new(vec![b, width], drop).expect("mask shape"),
    )
}

/// Multi-layer BiLSTM over padded sources. Padded steps leave the state
/// untouched, so results match an unpadded run.
pub fn encode_bilstm<'a>(
    g: &mut Graph<'a>,
    model: &'a RnnModel,
    source: &[Vec<usize>],
    source_mask: &[Vec<f64>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    let bsz = source.len();
    let n = source.first().map_or(0, Vec::len);
    if bsz == 0 || n == 0 {
        return Err(ModelError::ConfigError("empty source batch".into()));
    }
    let u = model.config.hidden_units;
    let store = &model.params;
    let table = g.param(store, model.ids.src_embed);
    let masks: Vec<(Var, Var)> = (0..n)
        .map(|t| {
            let (k, d) = mask_columns(source_mask, t, u);
            (g.constant(k), g.constant(d))
        })
        .collect();
    let mut inputs = Vec::with_capacity(n);
    for t in 0..n {
        let x = g.embedding(table, &column(source, t))?;
        inputs.push(dropout(g, x, model.config.dropout, rng.as_deref_mut()));
    }
    let mut finals = Vec::with_capacity(model.config.layers);
    for l in 0..model.config.layers {
        let zero = g.constant(Tensor::zeros(&[bsz, u]));
        let run = |g: &mut Graph<'a>, p: &LstmParams, order: &mut dyn Iterator<Item = usize>| -> Result<(Vec<Option<Var>>, Var)> {
            let (mut h, mut c) = (zero, zero);
            let mut outs = vec![None; n];
            for t in order {
                let (h2, c2) = lstm_step(g, store, p, inputs[t], h, c)?;
                h = blend(g, h2, h, masks[t].0, masks[t].1)?;
                c = blend(g, c2, c, masks[t].0, masks[t].1)?;
                outs[t] = Some(h);
            }
            Ok((outs, h))
        };
        let (fwd, f_last) = run(g, &model.ids.enc_fwd[l], &mut (0..n))?;
        let (bwd, b_last) = run(g, &model.ids.enc_bwd[l], &mut (0..n).rev())?;
        finals.push((f_last, b_last));
        let mut next = Vec::with_capacity(n);
        for t in 0..n {
            let both = g.concat(&[fwd[t].expect("visited"), bwd[t].expect("visited")], 1)?;
            next.push(if l + 1 < model.config.layers {
                dropout(g, both, model.config.dropout, rng.as_deref_mut())
            } else {
                both
            });
        }
        inputs = next;
    }
    let mut rows = Vec::with_capacity(n);
    for x in inputs {
        rows.push(g.reshape(x, &[bsz, 1, 2 * u])?);
    }
    let states = g.concat(&rows, 1)?;
    Ok(Encoded { states, finals })
}

fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => x,
    }
}

/// Bilinear attention over encoder states.
pub struct AttentionState {
    /// `[B, 1, n]` attention weights.
    pub weights: Var,
    /// `[B, 2U]` context vectors.
    pub context: Var,
}

/// Encoder-side tensors reused by every decoder step.
#[derive(Clone, Copy)]
pub struct AttentionMemory {
    /// `[B, n, 2U]`.
    pub states: Var,
    /// `[B, n, U]`: `W h_n` for every position.
    pub keys: Var,
    /// `[B, 1, n]`: 0 for real positions, [`MASK_BIAS`] for padding.
    pub bias: Var,
}

pub fn attention_memory<'a>(
    g: &mut Graph<'a>,
    model: &'a RnnModel,
    states: Var,
    source_mask: &[Vec<f64>],
) -> Result<Option<AttentionMemory>> {
    let Some(attn) = model.ids.attn else { return Ok(None) };
    let (bsz, n, u) = (source_mask.len(), source_mask[0].len(), model.config.hidden_units);
    let w = g.param(&model.params, attn);
    let flat = g.reshape(states, &[bsz * n, 2 * u])?;
    let k = g.matmul(flat, w)?;
    let keys = g.reshape(k, &[bsz, n, u])?;
    let bias: Vec<f64> = source_mask
        .iter()
        .flat_map(|r| r.iter().map(|&m| if m > 0.0 { 0.0 } else { MASK_BIAS }))
        .collect();
    let bias = g.constant(Tensor::new(vec![bsz, 1, n], bias).expect("bias shape"));
    Ok(Some(AttentionMemory { states, keys, bias }))
}

/// Scores `e_n = s^T W h_n`, weights `softmax(e)`, context `Σ α_n h_n`.
pub fn attention_context(g: &mut Graph<'_>, s: Var, mem: &AttentionMemory) -> Result<AttentionState> {
    let shape = g.shape(mem.keys).to_vec();
    let (bsz, u) = (shape[0], shape[2]);
    let s3 = g.reshape(s, &[bsz, 1, u])?;
    let e = g.batch_matmul(s3, mem.keys, true)?;
    let e = g.add(e, mem.bias)?;
    let weights = g.softmax(e);
    let ctx = g.batch_matmul(weights, mem.states, false)?;
    let two_u = g.shape(mem.states)[2];
    let context = g.reshape(ctx, &[bsz, two_u])?;
    Ok(AttentionState { weights, context })
}

/// Decoder LSTM stack state, one `(h, c)` per layer.
#[derive(Clone)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
}

/// Initial decoder state: `h_l = tanh([fwd_l ; bwd_l] W_l + b_l)`, `c_l = 0`.
pub fn initial_decoder_state<'a>(g: &mut Graph<'a>, model: &'a RnnModel, enc: &Encoded) -> Result<DecoderState> {
    let mut layers = Vec::with_capacity(model.config.layers);
    for (l, &(f, b)) in enc.finals.iter().enumerate() {
        let w = g.param(&model.params, model.ids.bridge_w[l]);
        let bias = g.param(&model.params, model.ids.bridge_b[l]);
        let both = g.concat(&[f, b], 1)?;
        let z = g.matmul(both, w)?;
        let z = g.add(z, bias)?;
        let h = g.tanh(z);
        let shape = g.shape(h).to_vec();
        let c = g.constant(Tensor::zeros(&shape));
        layers.push((h, c));
    }
    Ok(DecoderState { layers })
}

/// One decoder step for a batch of previous tokens: returns `[B, V]` logits,
/// the new state, and the attention weights when attention is enabled.
pub fn decode_step<'a>(
    g: &mut Graph<'a>,
    model: &'a RnnModel,
    prev: &[usize],
    state: &DecoderState,
    memory: Option<&AttentionMemory>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, DecoderState, Option<Var>)> {
    let store = &model.params;
    let table = g.param(store, model.ids.tgt_embed);
    let mut x = g.embedding(table, prev)?;
    x = dropout(g, x, model.config.dropout, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(state.layers.len());
    for (l, &(h, c)) in state.layers.iter().enumerate() {
        let (h2, c2) = lstm_step(g, store, &model.ids.dec[l], x, h, c)?;
        layers.push((h2, c2));
        x = if l + 1 < state.layers.len() {
            dropout(g, h2, model.config.dropout, rng.as_deref_mut())
        } else {
            h2
        };
    }
    let top = layers.last().expect("at least one layer").0;
    let (feat, weights) = match memory {
        Some(mem) => {
            let att = attention_context(g, top, mem)?;
            (g.concat(&[top, att.context], 1)?, Some(att.weights))
        }
        None => (top, None),
    };
    let w = g.param(store, model.ids.out_w);
    let b = g.param(store, model.ids.out_b);
    let logits = g.matmul(feat, w)?;
    let logits = g.add(logits, b)?;
    Ok((logits, DecoderState { layers }, weights))
}

/// Mean masked cross-entropy of a padded batch under teacher forcing.
pub fn forward_teacher_forced<'a>(
    g: &mut Graph<'a>,
    model: &'a RnnModel,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let enc = encode_bilstm(g, model, &batch.source, &batch.source_mask, rng.as_deref_mut())?;
    let memory = attention_memory(g, model, enc.states, &batch.source_mask)?;
    let mut state = initial_decoder_state(g, model, &enc)?;
    let steps = batch.target_len();
    let mut logits = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps * batch.len());
    let mut mask = Vec::with_capacity(steps * batch.len());
    for t in 0..steps {
        let (lg, next, _) = decode_step(g, model, &column(&batch.target_in, t), &state, memory.as_ref(), rng.as_deref_mut())?;
        logits.push(lg);
        state = next;
        targets.extend(column(&batch.target_out, t));
        mask.extend(batch.target_mask.iter().map(|r| r[t]));
    }
    let all = g.concat(&logits, 0)?;
    Ok(g.cross_entropy(all, &targets, &mask)?)
}

/// Encoder output and attention tensors for a single source, detached from
/// any graph.
pub struct RnnMemory {
    states: Tensor,
    keys: Option<Tensor>,
}

#[derive(Clone)]
pub struct RnnState {
    layers: Vec<(Tensor, Tensor)>,
}

impl RnnModel {
    /// Top-layer encoder states `[n, 2U]` for one unpadded source.
    pub fn encode(&self, source: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = encode_bilstm(&mut g, self, &[source.to_vec()], &[vec![1.0; source.len()]], None)?;
        let t = g.value(enc.states).clone();
        let n = source.len();
        Ok(t.reshaped(&[n, 2 * self.config.hidden_units])?)
    }

    fn try_start(&self, source: &[usize]) -> Result<(RnnMemory, RnnState)> {
        let mask = vec![vec![1.0; source.len()]];
        let mut g = Graph::new();
        let enc = encode_bilstm(&mut g, self, &[source.to_vec()], &mask, None)?;
        let mem = attention_memory(&mut g, self, enc.states, &mask)?;
        let init = initial_decoder_state(&mut g, self, &enc)?;
        let memory = RnnMemory {
            states: g.value(enc.states).clone(),
            keys: mem.map(|m| g.value(m.keys).clone()),
        };
        let state = RnnState {
            layers: init.layers.iter().map(|&(h, c)| (g.value(h).clone(), g.value(c).clone())).collect(),
        };
        Ok((memory, state))
    }

    fn try_step(&self, memory: &RnnMemory, state: &RnnState, prev: usize) -> Result<(Vec<f64>, RnnState)> {
        let mut g = Graph::new();
        let layers = state
            .layers
            .iter()
            .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
            .collect();
        let mem = match &memory.keys {
            Some(k) => {
                let n = k.shape()[1];
                Some(AttentionMemory {
                    states: g.constant(memory.states.clone()),
                    keys: g.constant(k.clone()),
                    bias: g.constant(Tensor::zeros(&[1, 1, n])),
                })
            }
            None => None,
        };
        let (logits, next, _) = decode_step(&mut g, self, &[prev], &DecoderState { layers }, mem.as_ref(), None)?;
        let logp = log_softmax(g.value(logits).data());
        let next = RnnState {
            layers: next.layers.iter().map(|&(h, c)| (g.value(h).clone(), g.value(c).clone())).collect(),
        };
        Ok((logp, next))
    }
}

impl StepDecoder for RnnModel {
    type Memory = RnnMemory;
    type State = RnnState;

    fn target_vocab(&self) -> usize {
        self.tgt_vocab
    }

    fn start(&self, source: &[usize]) -> (RnnMemory, RnnState) {
        self.try_start(source).expect("source ids within vocabulary")
    }

    fn step(&self, memory: &RnnMemory, state: &RnnState, prev: usize) -> (Vec<f64>, RnnState) {
        self.try_step(memory, state, prev).expect("token ids within vocabulary")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EncodedPair;
    use crate::tensor::{param_gradient_check, Tensor};
    use rand::Rng;

    fn tiny(attention: bool) -> RnnModel {
        let cfg = RnnConfig {
            embed_dim: 3,
            hidden_units: 4,
            layers: 1,
            attention,
            dropout: 0.0,
        };
        RnnModel::new(cfg, 6, 6, 7).unwrap()
    }

    fn batch_of(pairs: &[(Vec<usize>, Vec<usize>)]) -> Batch {
        let enc: Vec<EncodedPair> = pairs
            .iter()
            .map(|(s, t)| EncodedPair {
                source: s.clone(),
                target: t.clone(),
            })
            .collect();
        let refs: Vec<&EncodedPair> = enc.iter().collect();
        Batch::from_pairs(&refs, (0..enc.len()).collect())
    }

    #[test]
    fn zero_params_give_zero_state() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[5, 8])).unwrap();
        let b = store.add("b", Tensor::zeros(&[8])).unwrap();
        let p = LstmParams { w, b, units: 2 };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let (h2, c2) = lstm_step(&mut g, &store, &p, x, h, h).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[3, 8])).unwrap();
        let mut bias = vec![0.0; 8];
        bias[0..2].iter_mut().for_each(|b| *b = -50.0);
        bias[2..4].iter_mut().for_each(|b| *b = 50.0);
        let b = store.add("b", Tensor::from_vec(bias)).unwrap();
        let p = LstmParams { w, b, units: 2 };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1], vec![0.7]).unwrap());
        let h = g.constant(Tensor::new(vec![1, 2], vec![0.1, -0.2]).unwrap());
        let c = g.constant(Tensor::new(vec![1, 2], vec![0.8, -1.5]).unwrap());
        let (_, c2) = lstm_step(&mut g, &store, &p, x, h, c).unwrap();
        assert!((g.value(c2).data()[0] - 0.8).abs() < 1e-12);
        assert!((g.value(c2).data()[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn lstm_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = add_lstm(&mut store, "cell", 3, 4, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let h = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = param_gradient_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
                let (h2, _) = lstm_step(&mut g, s, &p, xv, hv, cv).unwrap();
                let l = g.sum(h2);
                g.backward(l).unwrap();
                (g.value(l).item(), g.param_grads())
            },
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let m = tiny(true);
        for n in 1..5 {
            let src: Vec<usize> = (0..n).map(|i| 4 + i % 2).collect();
            let a = m.encode(&src).unwrap();
            assert_eq!(a.shape(), &[n, 8]);
            assert_eq!(a, m.encode(&src).unwrap());
        }
    }

    #[test]
    fn backward_half_reverses_with_tied_weights() {
        let mut m = tiny(false);
        let (fwd, bwd, _) = m.lstm_params();
        let (fw, fb, bw, bb) = (fwd[0].w, fwd[0].b, bwd[0].w, bwd[0].b);
        *m.params.value_mut(bw) = m.params.value(fw).clone();
        *m.params.value_mut(bb) = m.params.value(fb).clone();
        let ab = m.encode(&[4, 5]).unwrap();
        let ba = m.encode(&[5, 4]).unwrap();
        // Forward state after "a b" at position 1 equals backward state at
        // position 0 of "b a" (both read a then b).
        assert_eq!(&ab.row(1)[..4], &ba.row(0)[4..]);
        assert_eq!(&ab.row(0)[..4], &ba.row(1)[4..]);
    }

    #[test]
    fn attention_single_position_and_uniform() {
        let m = tiny(true);
        let mut g = Graph::new();
        let enc = encode_bilstm(&mut g, &m, &[vec![4]], &[vec![1.0]], None).unwrap();
        let mem = attention_memory(&mut g, &m, enc.states, &[vec![1.0]]).unwrap().unwrap();
        let s = g.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.9]).unwrap());
        let att = attention_context(&mut g, s, &mem).unwrap();
        assert_eq!(g.value(att.weights).data(), &[1.0]);
        assert_eq!(g.value(att.context).data(), g.value(enc.states).data());

        let mut g = Graph::new();
        let row: Vec<f64> = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
        let states = g.constant(Tensor::new(vec![1, 3, 8], row.repeat(3)).unwrap());
        let mem = attention_memory(&mut g, &m, states, &[vec![1.0; 3]]).unwrap().unwrap();
        let s = g.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.9]).unwrap());
        let att = attention_context(&mut g, s, &mem).unwrap();
        for &w in g.value(att.weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = tiny(true);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let mut g = Graph::new();
            let mask = vec![vec![1.0; n]];
            let enc = encode_bilstm(&mut g, &m, &[src], &mask, None).unwrap();
            let mem = attention_memory(&mut g, &m, enc.states, &mask).unwrap().unwrap();
            let mut state = initial_decoder_state(&mut g, &m, &enc).unwrap();
            for t in 0..4 {
                let (_, next, w) = decode_step(&mut g, &m, &[t % 3 + 3], &state, Some(&mem), None).unwrap();
                let w = g.value(w.unwrap());
                assert!(w.data().iter().all(|&x| x >= 0.0));
                assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                state = next;
            }
        }
    }

    #[test]
    fn attention_context_gradients() {
        let m = tiny(true);
        let enc_states = m.encode(&[4, 5, 3]).unwrap().reshaped(&[1, 3, 8]).unwrap();
        let s = Tensor::new(vec![1, 4], vec![0.4, -0.7, 0.2, 0.9]).unwrap();
        let err = crate::tensor::finite_difference_check(
            |sv| {
                let mut g = Graph::new();
                let states = g.input(enc_states.clone());
                let mem = attention_memory(&mut g, &m, states, &[vec![1.0; 3]]).unwrap().unwrap();
                let x = g.input(sv.clone());
                let att = attention_context(&mut g, x, &mem).unwrap();
                let sq = g.mul(att.context, att.context).unwrap();
                let l = g.sum(sq);
                (g, x, l)
            },
            &s,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn no_attention_ignores_non_final_encoder_outputs() {
        let m = tiny(false);
        let mut g = Graph::new();
        let enc = encode_bilstm(&mut g, &m, &[vec![4, 5, 3]], &[vec![1.0; 3]], None).unwrap();
        let state = initial_decoder_state(&mut g, &m, &enc).unwrap();
        let (a, _, _) = decode_step(&mut g, &m, &[1], &state, None, None).unwrap();
        // Replace the encoder output tensor: without attention nothing reads it.
        let fake = g.constant(Tensor::full(&[1, 3, 8], 3.0));
        let _ = attention_memory(&mut g, &m, fake, &[vec![1.0; 3]]).unwrap();
        let (b, _, _) = decode_step(&mut g, &m, &[1], &state, None, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(g.shape(a), &[1, 6]);
    }

    fn loss_of(m: &RnnModel, b: &Batch) -> f64 {
        let mut g = Graph::new();
        let l = forward_teacher_forced(&mut g, m, b, None).unwrap();
        g.value(l).item()
    }

    #[test]
    fn full_model_gradients() {
        for attention in [false, true] {
            let mut m = tiny(attention);
            let batch = batch_of(&[(vec![4, 5], vec![5, 4]), (vec![5], vec![4, 4, 5])]);
            let cfg = m.clone();
            let err = param_gradient_check(
                &mut m.params,
                |s| {
                    let view = RnnModel {
                        params: s.clone(),
                        ..cfg.clone()
                    };
                    let mut g = Graph::new();
                    let l = forward_teacher_forced(&mut g, &view, &batch, None).unwrap();
                    g.backward(l).unwrap();
                    (g.value(l).item(), g.param_grads())
                },
                1e-3,
            );
            assert!(err < 1e-4, "attention={attention}: {err}");
        }
    }

    #[test]
    fn initial_loss_near_log_vocab() {
        let cfg = RnnConfig {
            embed_dim: 16,
            hidden_units: 16,
            layers: 1,
            attention: true,
            dropout: 0.0,
        };
        let m = RnnModel::new(cfg, 12, 12, 3).unwrap();
        let batch = batch_of(&[(vec![4, 5, 6], vec![7, 8, 9]), (vec![10, 11], vec![4, 5])]);
        let l = loss_of(&m, &batch);
        let ln_v = (12f64).ln();
        assert!((l - ln_v).abs() < 0.2 * ln_v, "{l} vs {ln_v}");
    }

    #[test]
    fn padding_does_not_change_loss() {
        let m = tiny(true);
        let short = batch_of(&[(vec![4, 5], vec![5, 4])]);
        let mut padded = short.clone();
        padded.source[0].extend([0, 0, 0]);
        padded.source_mask[0].extend([0.0; 3]);
        padded.target_in[0].extend([0, 0]);
        padded.target_out[0].extend([0, 0]);
        padded.target_mask[0].extend([0.0; 2]);
        assert!((loss_of(&m, &short) - loss_of(&m, &padded)).abs() < 1e-12);

        let both = batch_of(&[(vec![4, 5], vec![5, 4]), (vec![3, 4, 5, 4, 3], vec![4])]);
        let mut g = Graph::new();
        let enc = encode_bilstm(&mut g, &m, &both.source, &both.source_mask, None).unwrap();
        let st = g.value(enc.states).clone();
        let alone = m.encode(&[4, 5]).unwrap();
        for t in 0..2 {
            for j in 0..8 {
                assert!((st.data()[t * 8 + j] - alone.row(t)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_loss_is_an_error() {
        let m = tiny(false);
        let mut b = batch_of(&[(vec![4], vec![5])]);
        b.target_mask[0].iter_mut().for_each(|x| *x = 0.0);
        let mut g = Graph::new();
        assert!(forward_teacher_forced(&mut g, &m, &b, None).is_err());
    }

    #[test]
    fn declared_shapes_match_built_model() {
        for attention in [false, true] {
            for layers in 1..=3 {
                let cfg = RnnConfig {
                    embed_dim: 3,
                    hidden_units: 5,
                    layers,
                    attention,
                    dropout: 0.0,
                };
                let m = RnnModel::new(cfg.clone(), 7, 9, 0).unwrap();
                let built: Vec<(String, Vec<usize>)> =
                    m.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
                assert_eq!(built, RnnModel::param_shapes(&cfg, 7, 9));
            }
        }
    }

    #[test]
    fn sweep_grid_shapes() {
        for u in [512, 1024] {
            for layers in [1, 2, 4] {
                let cfg = RnnConfig {
                    embed_dim: 128,
                    hidden_units: u,
                    layers,
                    attention: true,
                    dropout: 0.0,
                };
                let shapes = RnnModel::param_shapes(&cfg, 40, 30);
                let names: std::collections::HashSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
                assert_eq!(names.len(), shapes.len());
                let get = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1.clone();
                assert_eq!(get("out.w"), vec![3 * u, 30]);
                assert_eq!(get(&format!("dec.l{}.w", layers - 1)), vec![if layers == 1 { 128 + u } else { 2 * u }, 4 * u]);
                assert_eq!(get(&format!("enc.l{}.fwd.w", layers - 1)), vec![if layers == 1 { 128 + u } else { 3 * u }, 4 * u]);
            }
        }
    }
}
