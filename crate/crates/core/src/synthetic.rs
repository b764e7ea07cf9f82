//! A rule-generated Cyrillic → Latin-transcription language for desk-scale
//! experiments.
//!
//! Words are a 1–2 syllable root with back/front vowel harmony plus an
//! optional harmonizing suffix. The transcription keeps first-syllable
//! vowels, writes о and ө of later syllables like у and ү, spells long
//! vowels with an inserted `g`, and devoices a final д.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{tokenize, Side};
use crate::corpus::{Corpus, Direction, WordPairGroup};

const CONSONANTS: &[(char, &str)] = &[
    ('б', "b"),
    ('г', "g"),
    ('д', "d"),
    ('л', "l"),
    ('м', "m"),
    ('н', "n"),
    ('р', "r"),
    ('с', "s"),
    ('т', "t"),
    ('х', "h"),
    ('ш', "xs"),
    ('ж', "j"),
    ('ц', "c"),
];

const BACK: &[char] = &['а', 'о', 'у', 'и'];
const FRONT: &[char] = &['э', 'ө', 'ү', 'и'];
const CODAS: &[char] = &['н', 'л', 'р', 'д', 'с', 'г'];

/// Suffixes after a consonant-final root, then after a vowel-final root.
const BACK_SUFFIXES: [&[&str]; 2] = [&["аас", "аар", "ууд", "ох"], &["тан", "гаа", "сон", "д"]];
const FRONT_SUFFIXES: [&[&str]; 2] = [&["ээс", "ээр", "үүд", "өх"], &["тэн", "гээ", "сөн", "д"]];

fn vowel_code(v: char, first_syllable: bool) -> &'static str {
    match (v, first_syllable) {
        ('а', _) => "a",
        ('э', _) => "e",
        ('и', _) => "i",
        ('о', true) => "q",
        ('о', false) => "v",
        ('у', _) => "v",
        ('ө', true) => "o",
        ('ө', false) => "u",
        ('ү', _) => "u",
        _ => unreachable!("not a vowel: {v}"),
    }
}

fn consonant_code(c: char) -> &'static str {
    CONSONANTS
        .iter()
        .find(|(k, _)| *k == c)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| unreachable!("not a consonant: {c}"))
}

/// Transcribes a generated word (syllables given separately).
pub fn transcribe(syllables: &[String]) -> String {
    let mut out = String::new();
    let n = syllables.len();
    for (si, syl) in syllables.iter().enumerate() {
        let chars: Vec<char> = syl.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if BACK.contains(&c) || FRONT.contains(&c) {
                let code = vowel_code(c, si == 0);
                out.push_str(code);
                if chars.get(i + 1) == Some(&c) {
                    out.push('g');
                    out.push_str(code);
                    i += 1;
                }
            } else if c == 'д' && si + 1 == n && i + 1 == chars.len() {
                out.push('t');
            } else {
                out.push_str(consonant_code(c));
            }
            i += 1;
        }
    }
    out
}

fn random_word(rng: &mut ChaCha8Rng) -> Vec<String> {
    let back = rng.gen_bool(0.5);
    let vowels = if back { BACK } else { FRONT };
    let count = rng.gen_range(1..=2);
    let mut syllables: Vec<String> = (0..count)
        .map(|si| {
            let mut s = String::new();
            s.push(CONSONANTS.choose(rng).expect("non-empty").0);
            let v = *vowels.choose(rng).expect("non-empty");
            s.push(v);
            if v != 'и' && rng.gen_bool(0.2) {
                s.push(v);
            }
            if (si + 1 == count && rng.gen_bool(0.5)) || rng.gen_bool(0.15) {
                s.push(*CODAS.choose(rng).expect("non-empty"));
            }
            s
        })
        .collect();
    if rng.gen_bool(0.5) {
        let last = syllables.last().expect("at least one").chars().last().expect("non-empty");
        let after_vowel = usize::from(BACK.contains(&last) || FRONT.contains(&last));
        let set = if back { BACK_SUFFIXES } else { FRONT_SUFFIXES }[after_vowel];
        syllables.push(set.choose(rng).expect("non-empty").to_string());
    }
    syllables
}

/// `n` distinct (Cyrillic, Latin) pairs, a pure function of `seed`.
pub fn synthetic_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pairs.len() < n {
        attempts += 1;
        assert!(attempts < 100 * n + 1000, "cannot generate {n} distinct words");
        let syllables = random_word(&mut rng);
        let word: String = syllables.concat();
        if seen.insert(word.clone(), ()).is_none() {
            pairs.push((word, transcribe(&syllables)));
        }
    }
    pairs
}

/// The pairs as a corpus. For T2C, sources sharing a transcription become
/// one group with every Cyrillic spelling as a reference.
pub fn synthetic_corpus(n: usize, seed: u64, direction: Direction) -> Corpus {
    let pairs = synthetic_pairs(n, seed);
    let tok = |w: &str, side| tokenize(w, side).expect("generated words are non-empty");
    let groups = match direction {
        Direction::C2T => pairs
            .iter()
            .map(|(c, l)| WordPairGroup::new(tok(c, Side::Cyrillic), vec![tok(l, Side::Latin)]))
            .collect(),
        Direction::T2C => {
            let mut by_latin: Vec<(String, Vec<String>)> = Vec::new();
            for (c, l) in &pairs {
                match by_latin.iter_mut().find(|(k, _)| k == l) {
                    Some((_, refs)) => refs.push(c.clone()),
                    None => by_latin.push((l.clone(), vec![c.clone()])),
                }
            }
            by_latin
                .into_iter()
                .map(|(l, refs)| {
                    WordPairGroup::new(tok(&l, Side::Latin), refs.iter().map(|c| tok(c, Side::Cyrillic)).collect())
                })
                .collect()
        }
    };
    Corpus::new(direction, groups)
}

/// Tab-separated corpus text in the usual file format.
pub fn to_corpus_text(corpus: &Corpus) -> String {
    corpus
        .groups
        .iter()
        .map(|g| {
            let refs: Vec<String> = g.references.iter().map(|r| r.to_word()).collect();
            format!("{}\t{}\n", g.source.to_word(), refs.join("|"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TransliterationTable;

    #[test]
    fn rules() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(transcribe(&s(&["бо", "ло"])), "bqlv");
        assert_eq!(transcribe(&s(&["мөр", "дөд"])), "mordut");
        assert_eq!(transcribe(&s(&["таа"])), "taga");
        assert_eq!(transcribe(&s(&["ша", "жоо"])), "xsajvgv");
        assert_eq!(transcribe(&s(&["бод", "ууд"])), "bqdvgvt");
        assert_eq!(transcribe(&s(&["нэ", "д"])), "net");
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = synthetic_pairs(2000, 7);
        assert_eq!(a, synthetic_pairs(2000, 7));
        assert_ne!(a, synthetic_pairs(2000, 8));
        let mut words: Vec<&String> = a.iter().map(|(c, _)| c).collect();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), 2000);
    }

    #[test]
    fn text_round_trip() {
        for dir in [Direction::C2T, Direction::T2C] {
            let c = synthetic_corpus(300, 1, dir);
            let back = Corpus::parse(&to_corpus_text(&c), dir, &TransliterationTable::builtin()).unwrap();
            assert_eq!(back.len(), c.len());
            for (a, b) in back.groups.iter().zip(&c.groups) {
                assert_eq!(a.source.tokens, b.source.tokens);
                assert_eq!(a.references.len(), b.references.len());
            }
        }
    }

    #[test]
    fn latin_side_decodes_to_script() {
        let table = TransliterationTable::builtin();
        for (_, latin) in synthetic_pairs(200, 3) {
            let script = table.latin_to_traditional(&latin).unwrap();
            assert_eq!(table.traditional_to_latin(&script).unwrap(), latin);
        }
    }
}
