use std::cmp::Ordering;
use std::collections::HashMap;

use super::align::{prefer, AlignmentModel};
use super::ngram::NGramModel;
use super::JointError;

#[derive(Debug, Clone)]
struct Hyp {
    pos: usize,
    history: Vec<u32>,
    score: f64,
    path: Vec<u32>,
}

/// Retained graphones grouped by input part.
pub struct GraphoneIndex<'a> {
    by_input: HashMap<&'a [String], Vec<u32>>,
    max_in: usize,
}

impl<'a> GraphoneIndex<'a> {
    pub fn new(align: &'a AlignmentModel) -> Self {
        let mut by_input: HashMap<&[String], Vec<u32>> = HashMap::new();
        let mut max_in = 0;
        for (id, g) in align.inventory.iter() {
            if align.is_retained(id) {
                by_input.entry(g.input.as_slice()).or_default().push(id);
                max_in = max_in.max(g.input.len());
            }
        }
        Self { by_input, max_in }
    }

    pub fn candidates(&self, input: &[String]) -> &[u32] {
        self.by_input.get(input).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Beam search for the best graphone sequence whose input parts spell
/// `source`; returns the concatenated output parts.
///
/// Hypotheses advance one graphone per step, so every hypothesis alive at a
/// step has the same length. Hypotheses sharing position and n-gram context
/// are recombined. The search stops once the best finished score is at
/// least the best live score, since further graphones only lower scores.
pub fn decode_joint(
    source: &[String],
    align: &AlignmentModel,
    lm: &NGramModel,
    beam: usize,
    max_expand: usize,
) -> Result<Vec<String>, JointError> {
    let index = GraphoneIndex::new(align);
    decode_with_index(source, align, &index, lm, beam, max_expand)
}

pub fn decode_with_index(
    source: &[String],
    align: &AlignmentModel,
    index: &GraphoneIndex<'_>,
    lm: &NGramModel,
    beam: usize,
    max_expand: usize,
) -> Result<Vec<String>, JointError> {
    if beam == 0 {
        return Err(JointError::InvalidConfig("beam must be at least 1".into()));
    }
    let n = source.len();
    let end = lm.end_symbol();
    let inv = &align.inventory;
    let mut alive = vec![Hyp {
        pos: 0,
        history: lm.initial_history(),
        score: 0.0,
        path: Vec::new(),
    }];
    let mut finished: Option<(f64, Vec<u32>)> = None;

    for step in 0..=max_expand {
        for h in alive.iter().filter(|h| h.pos == n) {
            let score = h.score + lm.log_prob(&h.history, end);
            if score == f64::NEG_INFINITY {
                continue;
            }
            let better = match &finished {
                None => true,
                Some((fs, fp)) => prefer(inv, score, &h.path, *fs, fp) == Ordering::Less,
            };
            if better {
                finished = Some((score, h.path.clone()));
            }
        }
        if step == max_expand {
            break;
        }
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if matches!(&finished, Some((fs, _)) if *fs >= best_alive) {
            break;
        }

        let mut next: HashMap<(usize, Vec<u32>), Hyp> = HashMap::new();
        for h in &alive {
            let chain = lm.chain(&h.history);
            for len in 0..=index.max_in.min(n - h.pos) {
                for &g in index.candidates(&source[h.pos..h.pos + len]) {
                    let lp = lm.prob_in_chain(&chain, g).ln();
                    if lp == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut history = h.history.clone();
                    lm.advance(&mut history, g);
                    let mut path = h.path.clone();
                    path.push(g);
                    let cand = Hyp {
                        pos: h.pos + len,
                        history,
                        score: h.score + lp,
                        path,
                    };
                    let key = (cand.pos, cand.history.clone());
                    match next.get(&key) {
                        Some(old) if prefer(inv, old.score, &old.path, cand.score, &cand.path) != Ordering::Greater => {}
                        _ => {
                            next.insert(key, cand);
                        }
                    }
                }
            }
        }
        alive = next.into_values().collect();
        alive.sort_by(|a, b| prefer(inv, a.score, &a.path, b.score, &b.path));
        alive.truncate(beam);
        if alive.is_empty() {
            break;
        }
    }

    match finished {
        Some((_, path)) => Ok(path.iter().flat_map(|&g| inv.get(g).output.iter().cloned()).collect()),
        None => Err(JointError::DecodeFailure {
            input: source.concat(),
        }),
    }
}
