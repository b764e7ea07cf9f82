//! Table-driven conversion between Traditional Mongolian script and its Latin
//! transcription, plus tokenization and integer encoding of words.
//!
//! The models never see Traditional Mongolian code points directly: every
//! script word is first rewritten into a Latin transcription through a
//! [`TransliterationTable`], and model output is mapped back the same way.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// The table shipped with the crate (`data/mongolian_latin.tsv`).
pub const DEFAULT_TABLE: &str = include_str!("../data/mongolian_latin.tsv");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("line {line}: malformed table entry: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate {side} entry {value:?}")]
    DuplicateEntry {
        line: usize,
        side: &'static str,
        value: String,
    },
    #[error("transliteration table has no entries")]
    EmptyTable,
    #[error("latin entry {shorter:?} is a prefix of {longer:?}; longest-match parsing would be ambiguous")]
    PrefixConflict { shorter: String, longer: String },
    #[error("symbol {symbol:?} at position {position} is not in the table")]
    UnknownSymbol { symbol: char, position: usize },
    #[error("cannot parse latin transcription at byte offset {offset}")]
    UnparseableLatin { offset: usize },
    #[error("empty input word")]
    EmptyInput,
}

/// Bijective mapping between script symbols and Latin strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransliterationTable {
    entries: Vec<(String, String)>,
    by_script: HashMap<String, usize>,
    by_latin: HashMap<String, usize>,
    max_script_chars: usize,
    max_latin_len: usize,
}

impl TransliterationTable {
    /// Parses `script<TAB>latin` lines; `#` starts a comment line, blank lines
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (script, latin) = line.split_once('\t').ok_or_else(|| CodecError::MalformedLine {
                line: line_no,
                reason: "expected script<TAB>latin".into(),
            })?;
            let latin = latin.trim();
            if script.is_empty() || latin.is_empty() {
                return Err(CodecError::MalformedLine {
                    line: line_no,
                    reason: "empty field".into(),
                });
            }
            if latin.contains('\t') {
                return Err(CodecError::MalformedLine {
                    line: line_no,
                    reason: "more than two fields".into(),
                });
            }
            if !latin
                .chars()
                .all(|c| c.is_ascii() && !c.is_ascii_uppercase() && !c.is_ascii_whitespace())
            {
                return Err(CodecError::MalformedLine {
                    line: line_no,
                    reason: format!("latin side {latin:?} must be lowercase ASCII"),
                });
            }
            pairs.push((line_no, script.to_string(), latin.to_string()));
        }
        Self::from_numbered(pairs)
    }

    /// Builds a table from `(script, latin)` pairs in order.
    pub fn from_pairs<S: Into<String>, L: Into<String>>(
        pairs: impl IntoIterator<Item = (S, L)>,
    ) -> Result<Self, CodecError> {
        let numbered = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (s, l))| (i + 1, s.into(), l.into()))
            .collect();
        Self::from_numbered(numbered)
    }

    fn from_numbered(pairs: Vec<(usize, String, String)>) -> Result<Self, CodecError> {
        if pairs.is_empty() {
            return Err(CodecError::EmptyTable);
        }
        let mut entries = Vec::with_capacity(pairs.len());
        let mut by_script = HashMap::new();
        let mut by_latin = HashMap::new();
        for (line, script, latin) in pairs {
            if script.is_empty() || latin.is_empty() {
                return Err(CodecError::MalformedLine {
                    line,
                    reason: "empty field".into(),
                });
            }
            if by_script.contains_key(&script) {
                return Err(CodecError::DuplicateEntry {
                    line,
                    side: "script",
                    value: script,
                });
            }
            if by_latin.contains_key(&latin) {
                return Err(CodecError::DuplicateEntry {
                    line,
                    side: "latin",
                    value: latin,
                });
            }
            by_script.insert(script.clone(), entries.len());
            by_latin.insert(latin.clone(), entries.len());
            entries.push((script, latin));
        }
        for (_, a) in &entries {
            for (_, b) in &entries {
                if a.len() < b.len() && b.starts_with(a.as_str()) {
                    return Err(CodecError::PrefixConflict {
                        shorter: a.clone(),
                        longer: b.clone(),
                    });
                }
            }
        }
        let max_script_chars = entries.iter().map(|(s, _)| s.chars().count()).max().unwrap_or(1);
        let max_latin_len = entries.iter().map(|(_, l)| l.len()).max().unwrap_or(1);
        Ok(Self {
            entries,
            by_script,
            by_latin,
            max_script_chars,
            max_latin_len,
        })
    }

    /// The table shipped in `data/mongolian_latin.tsv`.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TABLE).expect("builtin table is valid")
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rewrites a script word into its Latin transcription, matching the
    /// longest script symbol at each position.
    pub fn traditional_to_latin(&self, word: &str) -> Result<String, CodecError> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = String::with_capacity(chars.len());
        let mut pos = 0;
        let mut buf = String::new();
        'outer: while pos < chars.len() {
            let longest = self.max_script_chars.min(chars.len() - pos);
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&chars[pos..pos + len]);
                if let Some(&idx) = self.by_script.get(&buf) {
                    out.push_str(&self.entries[idx].1);
                    pos += len;
                    continue 'outer;
                }
            }
            return Err(CodecError::UnknownSymbol {
                symbol: chars[pos],
                position: pos,
            });
        }
        Ok(out)
    }

    /// Inverse of [`traditional_to_latin`](Self::traditional_to_latin).
    pub fn latin_to_traditional(&self, latin: &str) -> Result<String, CodecError> {
        let mut out = String::new();
        let mut offset = 0;
        'outer: while offset < latin.len() {
            let rest = &latin[offset..];
            let longest = self.max_latin_len.min(rest.len());
            for len in (1..=longest).rev() {
                let Some(piece) = rest.get(..len) else { continue };
                if let Some(&idx) = self.by_latin.get(piece) {
                    out.push_str(&self.entries[idx].0);
                    offset += len;
                    continue 'outer;
                }
            }
            return Err(CodecError::UnparseableLatin { offset });
        }
        Ok(out)
    }

    /// Splits a Latin transcription into table entries (one string per
    /// script symbol).
    pub fn latin_units<'a>(&self, latin: &'a str) -> Result<Vec<&'a str>, CodecError> {
        let mut units = Vec::new();
        let mut offset = 0;
        'outer: while offset < latin.len() {
            let rest = &latin[offset..];
            for len in (1..=self.max_latin_len.min(rest.len())).rev() {
                let Some(piece) = rest.get(..len) else { continue };
                if self.by_latin.contains_key(piece) {
                    units.push(piece);
                    offset += len;
                    continue 'outer;
                }
            }
            return Err(CodecError::UnparseableLatin { offset });
        }
        Ok(units)
    }
}

/// Which writing system a token sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Cyrillic,
    Latin,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Cyrillic => f.write_str("cyrillic"),
            Side::Latin => f.write_str("latin"),
        }
    }
}

/// A tokenized word: one token per logical character.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CharSeq {
    pub tokens: Vec<String>,
    pub side: Side,
    /// Set when a Cyrillic word started with a capital that was folded.
    pub capitalized: bool,
}

impl CharSeq {
    pub fn new(tokens: Vec<String>, side: Side) -> Self {
        Self {
            tokens,
            side,
            capitalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenated, normalized form (initial capital stays folded).
    pub fn joined(&self) -> String {
        self.tokens.concat()
    }

    /// Concatenated form with the initial capital restored.
    pub fn to_word(&self) -> String {
        let joined = self.joined();
        if !self.capitalized {
            return joined;
        }
        let mut chars = joined.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => joined,
        }
    }
}

/// Splits a word into characters. Cyrillic words have an initial capital
/// folded to lowercase and recorded in [`CharSeq::capitalized`].
pub fn tokenize(word: &str, side: Side) -> Result<CharSeq, CodecError> {
    let word = word.trim();
    if word.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    match side {
        Side::Latin => Ok(CharSeq::new(word.chars().map(String::from).collect(), side)),
        Side::Cyrillic => {
            let mut chars = word.chars();
            let first = chars.next().expect("non-empty");
            let capitalized = first.is_uppercase();
            let mut tokens = Vec::with_capacity(word.len());
            if capitalized {
                tokens.push(first.to_lowercase().collect::<String>());
            } else {
                tokens.push(first.to_string());
            }
            tokens.extend(chars.map(String::from));
            Ok(CharSeq {
                tokens,
                side,
                capitalized,
            })
        }
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Dense symbol-to-id map with reserved ids `PAD=0, BOS=1, EOS=2, UNK=3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    side: Side,
    symbols: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from symbols; duplicates are ignored and the rest
    /// sorted so the result does not depend on input order.
    pub fn from_symbols<I, S>(side: Side, symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut uniq: Vec<String> = symbols.into_iter().map(Into::into).collect();
        uniq.sort();
        uniq.dedup();
        let mut ids = HashMap::with_capacity(uniq.len());
        for (i, s) in uniq.iter().enumerate() {
            ids.insert(s.clone(), i + NUM_RESERVED);
        }
        Self {
            side,
            symbols: uniq,
            ids,
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// Total id count including the four reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved symbols in id order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.ids.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        if id < NUM_RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.symbols.get(id - NUM_RESERVED).map(String::as_str)
        }
    }

    pub fn encode_ids(&self, seq: &CharSeq, add_bos_eos: bool) -> Vec<usize> {
        let mut out = Vec::with_capacity(seq.len() + 2);
        if add_bos_eos {
            out.push(BOS);
        }
        out.extend(seq.tokens.iter().map(|t| self.id(t)));
        if add_bos_eos {
            out.push(EOS);
        }
        out
    }

    /// Maps ids back to tokens, dropping PAD/BOS/EOS. UNK decodes to `<unk>`.
    pub fn decode_ids(&self, ids: &[usize]) -> CharSeq {
        let tokens = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.symbol(id).unwrap_or(RESERVED_NAMES[UNK]).to_string())
            .collect();
        CharSeq::new(tokens, self.side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TransliterationTable {
        TransliterationTable::parse("# toy\nA\ta\nB\tba\n").unwrap()
    }

    #[test]
    fn load_two_line_table() {
        let t = toy();
        assert_eq!(t.len(), 2);
        assert_eq!(t.entries()[1], ("B".to_string(), "ba".to_string()));
    }

    #[test]
    fn duplicate_latin_is_rejected() {
        let err = TransliterationTable::parse("A\ta\nB\ta\n").unwrap_err();
        assert!(matches!(err, CodecError::DuplicateEntry { line: 2, side: "latin", .. }));
        let err = TransliterationTable::parse("A\ta\nA\tb\n").unwrap_err();
        assert!(matches!(err, CodecError::DuplicateEntry { side: "script", .. }));
    }

    #[test]
    fn empty_table_and_malformed_lines() {
        assert_eq!(TransliterationTable::parse("").unwrap_err(), CodecError::EmptyTable);
        assert_eq!(
            TransliterationTable::parse("# only comments\n\n").unwrap_err(),
            CodecError::EmptyTable
        );
        assert!(matches!(
            TransliterationTable::parse("A\ta\nB\t\n").unwrap_err(),
            CodecError::MalformedLine { line: 2, .. }
        ));
        assert!(matches!(
            TransliterationTable::parse("A a\n").unwrap_err(),
            CodecError::MalformedLine { line: 1, .. }
        ));
        assert!(matches!(
            TransliterationTable::parse("A\tA\n").unwrap_err(),
            CodecError::MalformedLine { .. }
        ));
    }

    #[test]
    fn prefix_violation_is_rejected() {
        let err = TransliterationTable::parse("A\tn\nB\tng\n").unwrap_err();
        assert!(matches!(err, CodecError::PrefixConflict { .. }));
    }

    #[test]
    fn eight_character_transcription() {
        let table = TransliterationTable::from_pairs([
            ("\u{182A}", "b"),
            ("\u{1820}", "a"),
            ("\u{1837}", "r"),
            ("\u{1822}", "i"),
            ("\u{1836}", "y"),
            ("\u{1830}", "s"),
            ("\u{1824}", "v"),
        ])
        .unwrap();
        let word = "\u{182A}\u{1820}\u{1837}\u{1822}\u{1836}\u{1820}\u{1830}\u{1824}";
        let latin = table.traditional_to_latin(word).unwrap();
        assert_eq!(latin, "bariyasv");
        assert_eq!(latin.len(), 8);
        assert_eq!(table.latin_to_traditional(&latin).unwrap(), word);
    }

    #[test]
    fn empty_word_and_unknown_symbol() {
        let t = toy();
        assert_eq!(t.traditional_to_latin("").unwrap(), "");
        assert_eq!(
            t.traditional_to_latin("AZ").unwrap_err(),
            CodecError::UnknownSymbol { symbol: 'Z', position: 1 }
        );
    }

    #[test]
    fn dala_parses_into_four_symbols() {
        let t = TransliterationTable::from_pairs([("D", "d"), ("A", "a"), ("L", "l")]).unwrap();
        let script = t.latin_to_traditional("dala").unwrap();
        assert_eq!(script, "DALA");
        assert_eq!(script.chars().count(), 4);
    }

    #[test]
    fn unparseable_latin_reports_offset() {
        let t = TransliterationTable::from_pairs([("Q", "q")]).unwrap();
        assert_eq!(
            t.latin_to_traditional("xq").unwrap_err(),
            CodecError::UnparseableLatin { offset: 0 }
        );
        assert_eq!(
            t.latin_to_traditional("qx").unwrap_err(),
            CodecError::UnparseableLatin { offset: 1 }
        );
    }

    #[test]
    fn longest_match_on_multi_char_latin() {
        let t = toy();
        assert_eq!(t.latin_to_traditional("baa").unwrap(), "BA");
        assert_eq!(t.latin_units("abaa").unwrap(), vec!["a", "ba", "a"]);
    }

    #[test]
    fn tokenize_latin() {
        let s = tokenize("dala", Side::Latin).unwrap();
        assert_eq!(s.tokens, vec!["d", "a", "l", "a"]);
        assert_eq!(tokenize("bariyasv", Side::Latin).unwrap().len(), 8);
        assert_eq!(tokenize("", Side::Latin).unwrap_err(), CodecError::EmptyInput);
        assert_eq!(tokenize("   ", Side::Cyrillic).unwrap_err(), CodecError::EmptyInput);
        assert_eq!(tokenize("arbatv-yin", Side::Latin).unwrap().tokens[6], "-");
    }

    #[test]
    fn tokenize_cyrillic_folds_initial_capital() {
        let s = tokenize("Монгол", Side::Cyrillic).unwrap();
        assert!(s.capitalized);
        assert_eq!(s.tokens[0], "м");
        assert_eq!(s.joined(), "монгол");
        assert_eq!(s.to_word(), "Монгол");
        let s = tokenize("дал", Side::Cyrillic).unwrap();
        assert!(!s.capitalized);
        assert_eq!(s.to_word(), "дал");
    }

    #[test]
    fn vocabulary_encoding() {
        let vocab = Vocabulary::from_symbols(Side::Latin, ["a"]);
        assert_eq!(vocab.id("a"), 4);
        let seq = CharSeq::new(vec!["a".into(), "a".into()], Side::Latin);
        assert_eq!(vocab.encode_ids(&seq, true), vec![1, 4, 4, 2]);
        assert_eq!(vocab.encode_ids(&seq, false), vec![4, 4]);
        let unk = CharSeq::new(vec!["z".into()], Side::Latin);
        assert_eq!(vocab.encode_ids(&unk, false), vec![UNK]);
        assert_eq!(vocab.decode_ids(&[1, 4, 4, 2]), seq);
        assert_eq!(vocab.len(), 5);
    }

    #[test]
    fn builtin_table_loads() {
        let t = TransliterationTable::builtin();
        assert!(t.len() >= 35);
        assert_eq!(t.traditional_to_latin("\u{1833}\u{1820}\u{182F}\u{1820}").unwrap(), "dala");
    }
}
