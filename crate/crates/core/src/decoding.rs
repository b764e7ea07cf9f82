//! Greedy and beam-search inference for autoregressive models.

use std::cmp::Ordering;

use crate::codec::{BOS, EOS, PAD};

/// A model that scores the next target token one step at a time.
pub trait StepDecoder {
    /// Per-source data computed once (encoder output).
    type Memory;
    /// Per-hypothesis decoder state.
    type State: Clone;

    fn target_vocab(&self) -> usize;

    fn start(&self, source: &[usize]) -> (Self::Memory, Self::State);

    /// Log-probabilities over the target vocabulary for the token after
    /// `prev`, and the state after consuming `prev`.
    fn step(&self, memory: &Self::Memory, state: &Self::State, prev: usize) -> (Vec<f64>, Self::State);
}

/// PAD and BOS are never emitted.
fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_norm_alpha: f64,
}

impl BeamConfig {
    /// Width `beam_width`, no length normalization, `max_len = 2n + 5`.
    pub fn for_source(beam_width: usize, source_len: usize) -> Self {
        Self {
            beam_width,
            max_len: default_max_len(source_len),
            length_norm_alpha: 0.0,
        }
    }
}

pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 5
}

/// Argmax decoding; ties go to the lowest token id. The result excludes BOS
/// and EOS and has at most `max_len` tokens.
pub fn greedy_decode<M: StepDecoder>(model: &M, source: &[usize], max_len: usize) -> Vec<usize> {
    let (memory, mut state) = model.start(source);
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (logp, next) = model.step(&memory, &state, prev);
        let mut best = None;
        for (tok, &lp) in logp.iter().enumerate() {
            if emittable(tok) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((tok, lp));
            }
        }
        let (tok, _) = best.expect("vocabulary has an emittable token");
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = next;
        prev = tok;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
    pub state: S,
}

impl<S> Hypothesis<S> {
    fn ranked(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.score
        } else {
            self.score / (self.tokens.len().max(1) as f64).powf(alpha)
        }
    }
}

fn by_score_then_tokens(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

/// Beam search. Returns the best hypothesis' tokens (without EOS) and its
/// raw log-probability.
///
/// Each step expands every live hypothesis by every emittable token and
/// keeps the `beam_width` best candidates; candidates ending in EOS move to
/// the finished pool. Hypotheses still live at `max_len` compete as
/// truncated outputs. With `beam_width = 1` and `alpha = 0` this reproduces
/// [`greedy_decode`].
pub fn beam_search<M: StepDecoder>(model: &M, source: &[usize], cfg: &BeamConfig) -> (Vec<usize>, f64) {
    assert!(cfg.beam_width >= 1 && cfg.max_len >= 1, "invalid beam config {cfg:?}");
    let (memory, state) = model.start(source);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        state,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();
    let alpha = cfg.length_norm_alpha;

    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(alive.len());
        for (hi, h) in alive.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let (logp, next) = model.step(&memory, &h.state, prev);
            next_states.push(next);
            for (tok, &lp) in logp.iter().enumerate() {
                if emittable(tok) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    cands.push((h.score + lp, tokens, hi));
                }
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens(a.0, &a.1, b.0, &b.1));
        cands.truncate(cfg.beam_width);
        let mut next_alive = Vec::new();
        for (score, tokens, hi) in cands {
            let done = tokens.last() == Some(&EOS);
            let h = Hypothesis {
                tokens,
                score,
                finished: done,
                state: next_states[hi].clone(),
            };
            if done {
                finished.push(h);
            } else {
                next_alive.push(h);
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
        if alpha == 0.0 {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    finished.extend(alive);
    let best = finished
        .into_iter()
        .min_by(|a, b| by_score_then_tokens(a.ranked(alpha), &a.tokens, b.ranked(alpha), &b.tokens))
        .expect("at least one hypothesis");
    let mut tokens = best.tokens;
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    (tokens, best.score)
}

pub fn beam_decode<M: StepDecoder>(model: &M, source: &[usize], cfg: &BeamConfig) -> Vec<usize> {
    beam_search(model, source, cfg).0
}
