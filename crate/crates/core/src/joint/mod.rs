//! Joint-sequence (graphone) transliteration model.
//!
//! Training aligns each pair into graphones by EM over segmentation
//! lattices, takes the 1-best segmentation of every pair, and fits an
//! n-gram over the resulting graphone strings. Conversion is a beam search
//! over graphone sequences whose input parts spell the source word.

mod align;
mod decode;
mod lattice;
mod ngram;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{corpus_log_likelihood, em_train, viterbi_segment, AlignmentModel};
pub use decode::{decode_joint, decode_with_index, GraphoneIndex};
pub use lattice::{build_lattice, Graphone, GraphoneInventory, GraphoneLattice, GraphoneShape, LatticeEdge};
pub use ngram::{estimate_ngram, HistoryStats, NGramModel};

pub const FORMAT_HEADER: &str = "JOINT-NGRAM v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JointError {
    #[error("pair {index} ({input:?} -> {output:?}) has no segmentation under the retained graphones")]
    UnalignablePair {
        index: usize,
        input: String,
        output: String,
    },
    #[error("no training sequences")]
    EmptyModel,
    #[error("no complete hypothesis for {input:?}")]
    DecodeFailure { input: String },
    #[error("invalid joint-model setting: {0}")]
    InvalidConfig(String),
    #[error("unsupported model format {0:?}")]
    UnsupportedVersion(String),
    #[error("model file line {line}: {reason}")]
    Format { line: usize, reason: String },
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub max_in: usize,
    pub max_out: usize,
    pub allow_epsilon: bool,
    pub em_iterations: usize,
    pub prune_eps: f64,
    pub order: usize,
    pub discount: f64,
    pub trim_min_count: f64,
    pub beam: usize,
    pub max_expand: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            max_in: 2,
            max_out: 2,
            allow_epsilon: true,
            em_iterations: 20,
            prune_eps: 1e-6,
            order: 3,
            discount: 0.5,
            trim_min_count: 1.0,
            beam: 20,
            max_expand: 64,
        }
    }
}

impl JointConfig {
    pub fn shape(&self) -> GraphoneShape {
        GraphoneShape {
            max_in: self.max_in,
            max_out: self.max_out,
            allow_epsilon: self.allow_epsilon,
        }
    }
}

/// A trained alignment model together with its graphone n-gram.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub config: JointConfig,
    pub align: AlignmentModel,
    pub lm: NGramModel,
    /// Free-form string attributes persisted with the model.
    pub meta: BTreeMap<String, String>,
}

impl JointModel {
    /// EM alignment, 1-best segmentation, then n-gram estimation. The n-gram
    /// symbol ids are the retained graphone ids; the end marker follows them.
    pub fn train(pairs: &[(&[String], &[String])], config: &JointConfig) -> Result<Self, JointError> {
        let align = em_train(pairs, config.shape(), config.em_iterations, config.prune_eps)?;
        let align = compact(&align);
        let mut seqs = Vec::with_capacity(pairs.len());
        for (idx, (s, t)) in pairs.iter().enumerate() {
            let seg = viterbi_segment(s, t, &align).map_err(|e| match e {
                JointError::UnalignablePair { input, output, .. } => JointError::UnalignablePair {
                    index: idx,
                    input,
                    output,
                },
                other => other,
            })?;
            seqs.push(seg.iter().map(|g| align.inventory.id(g).expect("segment uses inventory")).collect());
        }
        let lm = estimate_ngram(
            &seqs,
            align.inventory.len() + 1,
            config.order,
            config.discount,
            config.trim_min_count,
        )?;
        Ok(Self {
            config: config.clone(),
            align,
            lm,
            meta: BTreeMap::new(),
        })
    }

    pub fn convert(&self, source: &[String]) -> Result<Vec<String>, JointError> {
        decode_joint(source, &self.align, &self.lm, self.config.beam, self.config.max_expand)
    }

    /// Same as [`JointModel::convert`] for many words, sharing one index.
    pub fn convert_all(&self, sources: &[&[String]]) -> Vec<Result<Vec<String>, JointError>> {
        let index = GraphoneIndex::new(&self.align);
        sources
            .iter()
            .map(|s| decode_with_index(s, &self.align, &index, &self.lm, self.config.beam, self.config.max_expand))
            .collect()
    }

    /// Serializes to the line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let json = |v: &Vec<String>| serde_json::to_string(v).expect("strings serialize");
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        writeln!(out, "config\t{}", serde_json::to_string(&self.config).unwrap()).unwrap();
        writeln!(out, "meta\t{}", serde_json::to_string(&self.meta).unwrap()).unwrap();
        writeln!(out, "loglik\t{}", serde_json::to_string(&self.align.log_likelihoods).unwrap()).unwrap();
        writeln!(out, "graphones\t{}", self.align.inventory.len()).unwrap();
        for (id, g) in self.align.inventory.iter() {
            writeln!(
                out,
                "{}\t{}\t{}",
                json(&g.input),
                json(&g.output),
                self.align.log_prob(id)
            )
            .unwrap();
        }
        let mut records: Vec<(usize, &Vec<u32>, &HistoryStats)> = Vec::new();
        for (k, level) in self.lm.levels.iter().enumerate() {
            let mut keys: Vec<&Vec<u32>> = level.keys().collect();
            keys.sort();
            records.extend(keys.into_iter().map(|h| (k, h, &level[h])));
        }
        writeln!(
            out,
            "ngram\t{}\t{}\t{}\t{}\t{}",
            self.lm.order,
            self.lm.vocab,
            self.lm.discount,
            self.lm.trim_min_count,
            records.len()
        )
        .unwrap();
        for (k, h, s) in records {
            let mut counts: Vec<(u32, f64)> = s.counts.iter().map(|(&w, &c)| (w, c)).collect();
            counts.sort_by_key(|&(w, _)| w);
            writeln!(
                out,
                "{k}\t{}\t{}\t{}\t{}",
                serde_json::to_string(h).unwrap(),
                s.total,
                s.backoff,
                serde_json::to_string(&counts).unwrap()
            )
            .unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, JointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, reason: &str| JointError::Format {
            line,
            reason: reason.to_string(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(0, &format!("missing {what}")));

        let (_, header) = next("header")?;
        if header.trim_end() != FORMAT_HEADER {
            return Err(JointError::UnsupportedVersion(header.to_string()));
        }
        let (ln, line) = next("config")?;
        let config: JointConfig = tagged(line, "config")
            .and_then(|v| serde_json::from_str(v).ok())
            .ok_or_else(|| bad(ln, "bad config record"))?;
        let (ln, line) = next("meta")?;
        let meta: BTreeMap<String, String> = tagged(line, "meta")
            .and_then(|v| serde_json::from_str(v).ok())
            .ok_or_else(|| bad(ln, "bad meta record"))?;
        let (ln, line) = next("loglik")?;
        let log_likelihoods: Vec<f64> = tagged(line, "loglik")
            .and_then(|v| serde_json::from_str(v).ok())
            .ok_or_else(|| bad(ln, "bad loglik record"))?;
        let (ln, line) = next("graphones")?;
        let count: usize = tagged(line, "graphones")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(ln, "bad graphone count"))?;

        let mut inventory = GraphoneInventory::new();
        let mut log_probs = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = next("graphone")?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(ln, "graphone record needs 3 fields"));
            }
            let input: Vec<String> = serde_json::from_str(f[0]).map_err(|e| bad(ln, &e.to_string()))?;
            let output: Vec<String> = serde_json::from_str(f[1]).map_err(|e| bad(ln, &e.to_string()))?;
            let lp: f64 = f[2].parse().map_err(|_| bad(ln, "bad log-probability"))?;
            if input.is_empty() && output.is_empty() {
                return Err(bad(ln, "graphone with two empty parts"));
            }
            if inventory.intern(Graphone { input, output }) as usize != log_probs.len() {
                return Err(bad(ln, "duplicate graphone"));
            }
            log_probs.push(lp);
        }

        let (ln, line) = next("ngram header")?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 || f[0] != "ngram" {
            return Err(bad(ln, "bad ngram header"));
        }
        let parse_err = |_| bad(ln, "bad ngram header field");
        let order: usize = f[1].parse().map_err(parse_err)?;
        let vocab: usize = f[2].parse().map_err(parse_err)?;
        let discount: f64 = f[3].parse().map_err(|_| bad(ln, "bad discount"))?;
        let trim_min_count: f64 = f[4].parse().map_err(|_| bad(ln, "bad trim"))?;
        let n_records: usize = f[5].parse().map_err(parse_err)?;
        if !(1..=10).contains(&order) || vocab == 0 {
            return Err(bad(ln, "ngram order or vocabulary out of range"));
        }
        let mut levels = vec![std::collections::HashMap::new(); order];
        for _ in 0..n_records {
            let (ln, line) = next("ngram record")?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(ln, "ngram record needs 5 fields"));
            }
            let k: usize = f[0].parse().map_err(|_| bad(ln, "bad level"))?;
            let h: Vec<u32> = serde_json::from_str(f[1]).map_err(|e| bad(ln, &e.to_string()))?;
            let total: f64 = f[2].parse().map_err(|_| bad(ln, "bad total"))?;
            let backoff: f64 = f[3].parse().map_err(|_| bad(ln, "bad backoff"))?;
            let counts: Vec<(u32, f64)> = serde_json::from_str(f[4]).map_err(|e| bad(ln, &e.to_string()))?;
            if k >= order || h.len() != k {
                return Err(bad(ln, "history length does not match level"));
            }
            levels[k].insert(
                h,
                HistoryStats {
                    total,
                    counts: counts.into_iter().collect(),
                    backoff,
                },
            );
        }
        if let Some((ln, extra)) = lines.next() {
            if !extra.trim().is_empty() {
                return Err(bad(ln, "trailing data"));
            }
        }
        Ok(Self {
            align: AlignmentModel {
                shape: config.shape(),
                inventory,
                log_probs,
                log_likelihoods,
            },
            lm: NGramModel {
                order,
                vocab,
                discount,
                trim_min_count,
                levels,
            },
            config,
            meta,
        })
    }
}

fn tagged<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    line.strip_prefix(tag)?.strip_prefix('\t')
}

/// Drops pruned graphones, renumbering the survivors densely.
fn compact(model: &AlignmentModel) -> AlignmentModel {
    let mut inventory = GraphoneInventory::new();
    let mut log_probs = Vec::new();
    for (id, g) in model.inventory.iter() {
        if model.is_retained(id) {
            inventory.intern(g.clone());
            log_probs.push(model.log_prob(id));
        }
    }
    AlignmentModel {
        shape: model.shape,
        inventory,
        log_probs,
        log_likelihoods: model.log_likelihoods.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.chars().map(String::from).collect()
    }

    fn lexicon() -> Vec<(Vec<String>, Vec<String>)> {
        [("кат", "qad"), ("ам", "am"), ("мака", "maqa"), ("тама", "tama"), ("ак", "aq")]
            .iter()
            .map(|(a, b)| (toks(a), toks(b)))
            .collect()
    }

    fn as_pairs(v: &[(Vec<String>, Vec<String>)]) -> Vec<(&[String], &[String])> {
        v.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect()
    }

    #[test]
    fn memorizes_single_pair() {
        let data = vec![(toks("сайн"), toks("sayin"))];
        let m = JointModel::train(&as_pairs(&data), &JointConfig::default()).unwrap();
        assert_eq!(m.convert(&toks("сайн")).unwrap().concat(), "sayin");
    }

    #[test]
    fn memorizes_small_lexicon() {
        let data = lexicon();
        let m = JointModel::train(&as_pairs(&data), &JointConfig::default()).unwrap();
        for (s, t) in &data {
            assert_eq!(&m.convert(s).unwrap(), t);
        }
    }

    #[test]
    fn compacted_inventory_is_normalized() {
        let data = lexicon();
        let m = JointModel::train(&as_pairs(&data), &JointConfig::default()).unwrap();
        let total: f64 = m.align.log_probs.iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(m.lm.vocab, m.align.inventory.len() + 1);
    }

    #[test]
    fn text_round_trip() {
        let data = lexicon();
        let mut m = JointModel::train(&as_pairs(&data), &JointConfig::default()).unwrap();
        m.meta.insert("direction".into(), "c2t".into());
        let text = m.to_text();
        assert!(text.starts_with("JOINT-NGRAM v1\n"));
        let back = JointModel::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let data = lexicon();
        let text = JointModel::train(&as_pairs(&data), &JointConfig::default()).unwrap().to_text();
        let v2 = text.replacen("JOINT-NGRAM v1", "JOINT-NGRAM v2", 1);
        assert!(matches!(JointModel::from_text(&v2), Err(JointError::UnsupportedVersion(_))));
        let cut: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(matches!(JointModel::from_text(&cut), Err(JointError::Format { .. })));
    }

    #[test]
    fn log_add_matches_direct() {
        let (a, b) = (-1.3f64, -0.2f64);
        assert!((log_add(a, b) - (a.exp() + b.exp()).ln()).abs() < 1e-15);
        assert_eq!(log_add(f64::NEG_INFINITY, b), b);
    }
}
