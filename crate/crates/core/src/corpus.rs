//! Word-pair corpora with multi-reference targets.
//!
//! File format: one `source<TAB>ref1|ref2|...` group per line, `#` comment
//! lines and blank lines ignored.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{tokenize, CharSeq, CodecError, Side, TransliterationTable, Vocabulary, PAD};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: {source}")]
    Codec {
        line: usize,
        #[source]
        source: CodecError,
    },
    #[error("split sizes {train}+{test} do not match corpus size {total}")]
    SplitSizeError {
        train: usize,
        test: usize,
        total: usize,
    },
    #[error("corpus is empty")]
    Empty,
}

/// Conversion direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Cyrillic source, Latin-transcribed Traditional target.
    C2T,
    /// Latin-transcribed Traditional source, Cyrillic target.
    T2C,
}

impl Direction {
    pub fn source_side(self) -> Side {
        match self {
            Direction::C2T => Side::Cyrillic,
            Direction::T2C => Side::Latin,
        }
    }

    pub fn target_side(self) -> Side {
        match self {
            Direction::C2T => Side::Latin,
            Direction::T2C => Side::Cyrillic,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::C2T => f.write_str("c2t"),
            Direction::T2C => f.write_str("t2c"),
        }
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "c2t" => Ok(Direction::C2T),
            "t2c" => Ok(Direction::T2C),
            other => Err(format!("unknown direction {other:?} (expected c2t or t2c)")),
        }
    }
}

/// One source word with every acceptable target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPairGroup {
    pub source: CharSeq,
    pub references: Vec<CharSeq>,
    /// 1-based line in the originating file, 0 when built in memory.
    pub line: usize,
}

impl WordPairGroup {
    /// Builds a group, dropping exact duplicate references.
    pub fn new(source: CharSeq, references: Vec<CharSeq>) -> Self {
        let mut uniq: Vec<CharSeq> = Vec::with_capacity(references.len());
        for r in references {
            if !uniq.iter().any(|u| u.tokens == r.tokens) {
                uniq.push(r);
            }
        }
        Self {
            source,
            references: uniq,
            line: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub groups: Vec<WordPairGroup>,
    pub direction: Direction,
}

/// Tokenizes a word that belongs on the Latin (Traditional) side. Non-ASCII
/// input is treated as Traditional script and transcribed through `table`.
pub fn tokenize_traditional(word: &str, table: &TransliterationTable) -> Result<CharSeq, CodecError> {
    let word = word.trim();
    if word.is_ascii() {
        tokenize(word, Side::Latin)
    } else {
        let latin = table.traditional_to_latin(word)?;
        tokenize(&latin, Side::Latin)
    }
}

/// Tokenizes an input word for the given source side.
pub fn tokenize_side(word: &str, side: Side, table: &TransliterationTable) -> Result<CharSeq, CodecError> {
    match side {
        Side::Cyrillic => tokenize(word, Side::Cyrillic),
        Side::Latin => tokenize_traditional(word, table),
    }
}

impl Corpus {
    pub fn new(direction: Direction, groups: Vec<WordPairGroup>) -> Self {
        Self { groups, direction }
    }

    pub fn parse(text: &str, direction: Direction, table: &TransliterationTable) -> Result<Self, CorpusError> {
        let mut groups = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (src, refs) = raw.split_once('\t').ok_or_else(|| CorpusError::MalformedLine {
                line,
                reason: "expected source<TAB>references".into(),
            })?;
            let refs: Vec<&str> = refs.split('|').map(str::trim).filter(|r| !r.is_empty()).collect();
            if refs.is_empty() {
                return Err(CorpusError::MalformedLine {
                    line,
                    reason: "empty reference list".into(),
                });
            }
            let codec = |source| CorpusError::Codec { line, source };
            let source = tokenize_side(src, direction.source_side(), table).map_err(codec)?;
            let references = refs
                .iter()
                .map(|r| tokenize_side(r, direction.target_side(), table))
                .collect::<Result<Vec<_>, _>>()
                .map_err(codec)?;
            let mut group = WordPairGroup::new(source, references);
            group.line = line;
            groups.push(group);
        }
        Ok(Self { groups, direction })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Seeded shuffle followed by a prefix/suffix split.
    pub fn split(&self, spec: SplitSpec) -> Result<(Corpus, Corpus), CorpusError> {
        let total = self.groups.len();
        if spec.train_count + spec.test_count != total || spec.train_count == 0 || spec.test_count == 0 {
            return Err(CorpusError::SplitSizeError {
                train: spec.train_count,
                test: spec.test_count,
                total,
            });
        }
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        let take = |idx: &[usize]| Corpus {
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            direction: self.direction,
        };
        Ok((take(&order[..spec.train_count]), take(&order[spec.train_count..])))
    }

    /// Every symbol seen on `side`, sorted, after the reserved ids.
    pub fn build_vocabulary(&self, side: Side) -> Vocabulary {
        let mut symbols = Vec::new();
        for g in &self.groups {
            if g.source.side == side {
                symbols.extend(g.source.tokens.iter().cloned());
            }
            for r in g.references.iter().filter(|r| r.side == side) {
                symbols.extend(r.tokens.iter().cloned());
            }
        }
        Vocabulary::from_symbols(side, symbols)
    }

    /// One `(source, reference)` pair per reference.
    pub fn training_pairs(&self) -> Vec<(&CharSeq, &CharSeq)> {
        self.groups
            .iter()
            .flat_map(|g| g.references.iter().map(move |r| (&g.source, r)))
            .collect()
    }

    /// Training pairs as id sequences (no BOS/EOS framing).
    pub fn encoded_pairs(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Vec<EncodedPair> {
        self.training_pairs()
            .into_iter()
            .map(|(s, t)| EncodedPair {
                source: src_vocab.encode_ids(s, false),
                target: tgt_vocab.encode_ids(t, false),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// A padded mini-batch, row-major `[batch][time]`.
///
/// `target_in` is `BOS + target`, `target_out` is `target + EOS`; both share
/// `target_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<f64>>,
    pub target_in: Vec<Vec<usize>>,
    pub target_out: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<f64>>,
    /// Indices of the pairs in the slice handed to [`batch_iter`].
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair], indices: Vec<usize>) -> Self {
        let src_len = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|p| p.target.len() + 1).max().unwrap_or(1);
        let pad = |ids: &[usize], len: usize| {
            let mut v = ids.to_vec();
            v.resize(len, PAD);
            v
        };
        let mask = |n: usize, len: usize| (0..len).map(|t| if t < n { 1.0 } else { 0.0 }).collect();
        let mut batch = Batch {
            source: Vec::with_capacity(pairs.len()),
            source_mask: Vec::with_capacity(pairs.len()),
            target_in: Vec::with_capacity(pairs.len()),
            target_out: Vec::with_capacity(pairs.len()),
            target_mask: Vec::with_capacity(pairs.len()),
            indices,
        };
        for p in pairs {
            batch.source.push(pad(&p.source, src_len));
            batch.source_mask.push(mask(p.source.len(), src_len));
            let mut tin = vec![crate::codec::BOS];
            tin.extend_from_slice(&p.target);
            let mut tout = p.target.clone();
            tout.push(crate::codec::EOS);
            batch.target_in.push(pad(&tin, tgt_len));
            batch.target_out.push(pad(&tout, tgt_len));
            batch.target_mask.push(mask(p.target.len() + 1, tgt_len));
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source.first().map_or(0, Vec::len)
    }

    pub fn target_len(&self) -> usize {
        self.target_in.first().map_or(0, Vec::len)
    }

    /// Count of unmasked target positions.
    pub fn target_tokens(&self) -> usize {
        self.target_mask.iter().flatten().filter(|&&m| m > 0.0).count()
    }
}

/// How batches are sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// Fixed number of pairs per batch.
    Sequences(usize),
    /// Pairs are packed until source+target tokens would exceed the budget.
    Tokens(usize),
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Shuffles pairs deterministically by `(seed, epoch)` and cuts them into
/// padded batches.
pub fn batch_iter(pairs: &[EncodedPair], batch_size: BatchSize, seed: u64, epoch: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    let mut batches = Vec::new();
    match batch_size {
        BatchSize::Sequences(n) => {
            let n = n.max(1);
            for chunk in order.chunks(n) {
                let refs: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
                batches.push(Batch::from_pairs(&refs, chunk.to_vec()));
            }
        }
        BatchSize::Tokens(budget) => {
            let mut current: Vec<usize> = Vec::new();
            let mut tokens = 0;
            for i in order {
                let cost = pairs[i].source.len() + pairs[i].target.len() + 1;
                if !current.is_empty() && tokens + cost > budget {
                    let refs: Vec<&EncodedPair> = current.iter().map(|&j| &pairs[j]).collect();
                    batches.push(Batch::from_pairs(&refs, std::mem::take(&mut current)));
                    tokens = 0;
                }
                current.push(i);
                tokens += cost;
            }
            if !current.is_empty() {
                let refs: Vec<&EncodedPair> = current.iter().map(|&j| &pairs[j]).collect();
                batches.push(Batch::from_pairs(&refs, current));
            }
        }
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> TransliterationTable {
        TransliterationTable::builtin()
    }

    fn pairs(n: usize) -> Vec<EncodedPair> {
        (0..n)
            .map(|i| EncodedPair {
                source: vec![4; 1 + i % 3],
                target: vec![5; 1 + i % 4],
            })
            .collect()
    }

    #[test]
    fn parse_multi_reference_group() {
        let c = Corpus::parse("дал\tdala|dalv\n", Direction::C2T, &table()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.groups[0].references.len(), 2);
        assert_eq!(c.groups[0].references[1].joined(), "dalv");
        assert_eq!(c.groups[0].line, 1);
    }

    #[test]
    fn duplicate_references_are_dropped() {
        let c = Corpus::parse("дал\tdala|dala|dalv\n", Direction::C2T, &table()).unwrap();
        assert_eq!(c.groups[0].references.len(), 2);
    }

    #[test]
    fn malformed_lines() {
        let t = table();
        assert!(matches!(
            Corpus::parse("w\t\n", Direction::C2T, &t).unwrap_err(),
            CorpusError::MalformedLine { line: 1, .. }
        ));
        assert!(matches!(
            Corpus::parse("# c\nno tab here\n", Direction::C2T, &t).unwrap_err(),
            CorpusError::MalformedLine { line: 2, .. }
        ));
        assert!(matches!(
            Corpus::parse("w\t | \n", Direction::C2T, &t).unwrap_err(),
            CorpusError::MalformedLine { .. }
        ));
    }

    #[test]
    fn three_valid_lines() {
        let text = "# header\nа\ta\nб\tb\n\nв\tw\n";
        assert_eq!(Corpus::parse(text, Direction::C2T, &table()).unwrap().len(), 3);
    }

    #[test]
    fn script_references_are_transcribed() {
        let c = Corpus::parse("дал\t\u{1833}\u{1820}\u{182F}\u{1820}\n", Direction::C2T, &table()).unwrap();
        assert_eq!(c.groups[0].references[0].joined(), "dala");
        let c = Corpus::parse("\u{1833}\u{1820}\u{182F}\u{1820}\tдал\n", Direction::T2C, &table()).unwrap();
        assert_eq!(c.groups[0].source.joined(), "dala");
        assert_eq!(c.groups[0].source.side, Side::Latin);
        assert_eq!(c.groups[0].references[0].side, Side::Cyrillic);
    }

    #[test]
    fn unknown_script_symbol_reports_line() {
        let err = Corpus::parse("дал\t\u{1820}\u{0F00}\n", Direction::C2T, &table()).unwrap_err();
        assert!(matches!(err, CorpusError::Codec { line: 1, .. }));
    }

    fn synthetic_corpus(n: usize) -> Corpus {
        let groups = (0..n)
            .map(|i| {
                let s = CharSeq::new(vec![format!("s{i}")], Side::Cyrillic);
                let t = CharSeq::new(vec![format!("t{i}")], Side::Latin);
                WordPairGroup::new(s, vec![t])
            })
            .collect();
        Corpus::new(Direction::C2T, groups)
    }

    #[test]
    fn split_sizes_and_partition() {
        let c = synthetic_corpus(63668);
        let (train, test) = c
            .split(SplitSpec {
                train_count: 58436,
                test_count: 5232,
                seed: 7,
            })
            .unwrap();
        assert_eq!(train.len(), 58436);
        assert_eq!(test.len(), 5232);
        let mut seen: Vec<&str> = train
            .groups
            .iter()
            .chain(&test.groups)
            .map(|g| g.source.tokens[0].as_str())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 63668);
    }

    #[test]
    fn split_is_deterministic() {
        let c = synthetic_corpus(50);
        let spec = SplitSpec {
            train_count: 40,
            test_count: 10,
            seed: 3,
        };
        assert_eq!(c.split(spec).unwrap(), c.split(spec).unwrap());
        let other = c.split(SplitSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(c.split(spec).unwrap().1, other.1);
    }

    #[test]
    fn split_size_mismatch() {
        let c = synthetic_corpus(15);
        let err = c
            .split(SplitSpec {
                train_count: 10,
                test_count: 10,
                seed: 0,
            })
            .unwrap_err();
        assert_eq!(
            err,
            CorpusError::SplitSizeError {
                train: 10,
                test: 10,
                total: 15
            }
        );
    }

    #[test]
    fn vocabulary_is_sorted_and_deterministic() {
        let t = table();
        let a = Corpus::parse("ба\tba\n", Direction::C2T, &t).unwrap();
        let b = Corpus::parse("аб\tab\nба\tba\n", Direction::C2T, &t).unwrap();
        let va = a.build_vocabulary(Side::Latin);
        assert_eq!(va.len(), 6);
        assert_eq!(va.symbols(), &["a".to_string(), "b".to_string()]);
        assert_eq!(va, b.build_vocabulary(Side::Latin));
        assert_eq!(va, a.build_vocabulary(Side::Latin));
        assert_eq!(a.build_vocabulary(Side::Cyrillic).symbols(), &["а".to_string(), "б".to_string()]);
    }

    #[test]
    fn batch_sizes_and_masks() {
        let p = pairs(10);
        let batches = batch_iter(&p, BatchSize::Sequences(4), 1, 0);
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        for b in &batches {
            for (row, idx) in b.indices.iter().enumerate() {
                let pair = &p[*idx];
                for t in 0..b.source_len() {
                    let real = t < pair.source.len();
                    assert_eq!(b.source_mask[row][t], if real { 1.0 } else { 0.0 });
                    if !real {
                        assert_eq!(b.source[row][t], PAD);
                    }
                }
                for t in 0..b.target_len() {
                    let real = t <= pair.target.len();
                    assert_eq!(b.target_mask[row][t], if real { 1.0 } else { 0.0 });
                    if !real {
                        assert_eq!(b.target_out[row][t], PAD);
                    }
                }
                assert_eq!(b.target_in[row][0], crate::codec::BOS);
                assert_eq!(b.target_out[row][pair.target.len()], crate::codec::EOS);
            }
        }
    }

    #[test]
    fn batch_order_is_deterministic_per_epoch() {
        let p = pairs(20);
        let a = batch_iter(&p, BatchSize::Sequences(3), 9, 2);
        let b = batch_iter(&p, BatchSize::Sequences(3), 9, 2);
        assert_eq!(a, b);
        let c = batch_iter(&p, BatchSize::Sequences(3), 9, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn every_pair_once_per_epoch() {
        let p = pairs(37);
        for bs in [BatchSize::Sequences(5), BatchSize::Tokens(20)] {
            let mut seen: Vec<usize> = batch_iter(&p, bs, 4, 1).into_iter().flat_map(|b| b.indices).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn token_budget_is_respected() {
        let p = pairs(40);
        for b in batch_iter(&p, BatchSize::Tokens(16), 0, 0) {
            let cost: usize = b.indices.iter().map(|&i| p[i].source.len() + p[i].target.len() + 1).sum();
            assert!(cost <= 16 || b.len() == 1);
        }
    }

    #[test]
    fn multi_reference_groups_expand_to_pairs() {
        let c = Corpus::parse("дал\tdala|dalv\nба\tba\n", Direction::C2T, &table()).unwrap();
        assert_eq!(c.training_pairs().len(), 3);
    }
}
