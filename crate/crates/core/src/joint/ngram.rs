use std::collections::HashMap;

use super::JointError;

/// Counts and backoff mass for one history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStats {
    pub total: f64,
    pub counts: HashMap<u32, f64>,
    /// Mass handed to the shorter history: `1 - Σ max(c - D, 0) / total`.
    pub backoff: f64,
}

/// Interpolated absolute-discounting n-gram over integer symbols.
///
/// Symbols `0..vocab` are predictable; `vocab - 1` is reserved as the end
/// marker by convention of the caller. Histories may additionally contain
/// the start marker `vocab`, which is never predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    pub vocab: usize,
    pub discount: f64,
    pub trim_min_count: f64,
    /// `levels[k]` holds histories of length `k`.
    pub levels: Vec<HashMap<Vec<u32>, HistoryStats>>,
}

impl NGramModel {
    pub fn start_symbol(&self) -> u32 {
        self.vocab as u32
    }

    pub fn end_symbol(&self) -> u32 {
        self.vocab as u32 - 1
    }

    /// Stored histories usable for `history`, longest first.
    pub fn chain<'a>(&'a self, history: &[u32]) -> Vec<&'a HistoryStats> {
        let keep = history.len().min(self.order - 1);
        let h = &history[history.len() - keep..];
        (0..=keep)
            .rev()
            .filter_map(|k| self.levels[k].get(&h[h.len() - k..]))
            .collect()
    }

    /// `P(w | chain)` given the result of [`NGramModel::chain`].
    pub fn prob_in_chain(&self, chain: &[&HistoryStats], w: u32) -> f64 {
        let mut p = 1.0 / self.vocab as f64;
        for stats in chain.iter().rev() {
            let c = stats.counts.get(&w).copied().unwrap_or(0.0);
            p = (c - self.discount).max(0.0) / stats.total + stats.backoff * p;
        }
        p
    }

    pub fn prob(&self, history: &[u32], w: u32) -> f64 {
        self.prob_in_chain(&self.chain(history), w)
    }

    pub fn log_prob(&self, history: &[u32], w: u32) -> f64 {
        self.prob(history, w).ln()
    }

    /// Updates `history` in place to the context after emitting `w`.
    pub fn advance(&self, history: &mut Vec<u32>, w: u32) {
        history.push(w);
        let keep = self.order - 1;
        if history.len() > keep {
            history.drain(..history.len() - keep);
        }
    }

    /// The context before the first symbol.
    pub fn initial_history(&self) -> Vec<u32> {
        if self.order > 1 {
            vec![self.start_symbol()]
        } else {
            Vec::new()
        }
    }

    pub fn num_histories(&self) -> usize {
        self.levels.iter().map(HashMap::len).sum()
    }
}

/// Estimates an n-gram from symbol sequences. Each sequence is framed by the
/// start marker (context only) and the end marker `vocab - 1` (predicted).
///
/// Histories whose total count is below `trim_min_count` are dropped; the
/// empty history is always kept.
pub fn estimate_ngram(
    sequences: &[Vec<u32>],
    vocab: usize,
    order: usize,
    discount: f64,
    trim_min_count: f64,
) -> Result<NGramModel, JointError> {
    if !(1..=10).contains(&order) {
        return Err(JointError::InvalidConfig(format!("n-gram order {order} outside 1..=10")));
    }
    if !(0.0..1.0).contains(&discount) {
        return Err(JointError::InvalidConfig(format!("discount {discount} outside [0, 1)")));
    }
    if sequences.is_empty() || vocab == 0 {
        return Err(JointError::EmptyModel);
    }
    let start = vocab as u32;
    let end = vocab as u32 - 1;
    let mut levels: Vec<HashMap<Vec<u32>, HistoryStats>> = vec![HashMap::new(); order];
    for seq in sequences {
        if let Some(&bad) = seq.iter().find(|&&s| s >= end) {
            return Err(JointError::InvalidConfig(format!("symbol {bad} outside vocabulary of {vocab}")));
        }
        let framed: Vec<u32> = std::iter::once(start).chain(seq.iter().copied()).chain([end]).collect();
        for t in 1..framed.len() {
            let w = framed[t];
            for k in 0..order.min(t + 1) {
                let h = &framed[t - k..t];
                let stats = levels[k].entry(h.to_vec()).or_insert_with(|| HistoryStats {
                    total: 0.0,
                    counts: HashMap::new(),
                    backoff: 0.0,
                });
                stats.total += 1.0;
                *stats.counts.entry(w).or_insert(0.0) += 1.0;
            }
        }
    }
    for (k, level) in levels.iter_mut().enumerate() {
        if k > 0 {
            level.retain(|_, s| s.total >= trim_min_count);
        }
        for s in level.values_mut() {
            let kept: f64 = s.counts.values().map(|&c| (c - discount).max(0.0)).sum();
            s.backoff = 1.0 - kept / s.total;
        }
    }
    Ok(NGramModel {
        order,
        vocab,
        discount,
        trim_min_count,
        levels,
    })
}
