//! Typo injection for query augmentation.
//!
//! At most one edit per call: with the configured probability an operation is
//! drawn uniformly from the enabled set, then a target word uniformly from
//! the words that operation can act on. A fully numeric target cancels the
//! injection so model numbers ("iphone 14") are never mangled.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::is_numeric;

const LETTERS: &[u8; 26] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypoOp {
    Delete,
    Transpose,
    Insert,
    Substitute,
    KeyboardReplace,
    SpaceInsert,
}

impl TypoOp {
    pub const ALL: [TypoOp; 6] = [
        TypoOp::Delete,
        TypoOp::Transpose,
        TypoOp::Insert,
        TypoOp::Substitute,
        TypoOp::KeyboardReplace,
        TypoOp::SpaceInsert,
    ];

    /// Whether this operation is well defined on `word`.
    pub fn eligible(self, word: &[char]) -> bool {
        let n = word.len();
        match self {
            TypoOp::Delete | TypoOp::SpaceInsert => n >= 2,
            TypoOp::Transpose => word.windows(2).any(|w| w[0] != w[1]),
            TypoOp::Insert | TypoOp::Substitute | TypoOp::KeyboardReplace => n >= 1,
        }
    }
}

impl fmt::Display for TypoOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TypoOp::Delete => "delete",
            TypoOp::Transpose => "transpose",
            TypoOp::Insert => "insert",
            TypoOp::Substitute => "substitute",
            TypoOp::KeyboardReplace => "keyboard_replace",
            TypoOp::SpaceInsert => "space_insert",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypoConfig {
    pub injection_probability: f64,
    pub operations: Vec<TypoOp>,
    pub seed: u64,
}

impl Default for TypoConfig {
    fn default() -> Self {
        Self {
            injection_probability: 0.5,
            operations: TypoOp::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl TypoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.injection_probability) {
            return Err(Error::Config(format!(
                "injection_probability {} outside [0, 1]",
                self.injection_probability
            )));
        }
        if self.operations.is_empty() {
            return Err(Error::Config("no typo operations enabled".into()));
        }
        Ok(())
    }
}

/// QWERTY key adjacency, symmetric over letter keys.
#[derive(Debug, Clone)]
pub struct KeyboardMap {
    adjacency: BTreeMap<char, Vec<char>>,
}

impl KeyboardMap {
    pub fn qwerty() -> Self {
        const ROWS: &[(char, &str)] = &[
            ('q', "was"),
            ('w', "qeasd"),
            ('e', "wrsdf"),
            ('r', "etdfg"),
            ('t', "ryfgh"),
            ('y', "tughj"),
            ('u', "yihjk"),
            ('i', "uojkl"),
            ('o', "ipkl"),
            ('p', "ol"),
            ('a', "qwsz"),
            ('s', "adwezx"),
            ('d', "sferxc"),
            ('f', "dgrtcv"),
            ('g', "fhtyvb"),
            ('h', "gjyubn"),
            ('j', "hkuinm"),
            ('k', "jliom"),
            ('l', "kopm"),
            ('z', "asx"),
            ('x', "zcsd"),
            ('c', "xvdf"),
            ('v', "cbfg"),
            ('b', "vngh"),
            ('n', "bmhj"),
            ('m', "njkl"),
        ];
        let mut adjacency: BTreeMap<char, Vec<char>> = BTreeMap::new();
        for &(key, neighbors) in ROWS {
            for n in neighbors.chars() {
                adjacency.entry(key).or_default().push(n);
                adjacency.entry(n).or_default().push(key);
            }
        }
        for list in adjacency.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self { adjacency }
    }

    pub fn neighbors(&self, c: char) -> &[char] {
        self.adjacency
            .get(&c.to_ascii_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

impl Default for KeyboardMap {
    fn default() -> Self {
        Self::qwerty()
    }
}

fn random_letter(rng: &mut Rng) -> char {
    LETTERS[rng.random_range(0..LETTERS.len())] as char
}

fn chars(word: &str) -> Vec<char> {
    word.chars().collect()
}

pub fn op_delete(word: &str, index: usize) -> Result<String> {
    let mut c = chars(word);
    if c.len() < 2 {
        return Err(Error::Validation(format!("`{word}` too short to delete from")));
    }
    if index >= c.len() {
        return Err(Error::Validation(format!("delete index {index} out of range")));
    }
    c.remove(index);
    Ok(c.into_iter().collect())
}

pub fn op_transpose(word: &str, index: usize) -> Result<String> {
    let mut c = chars(word);
    if index + 1 >= c.len() {
        return Err(Error::Validation(format!("transpose index {index} out of range")));
    }
    c.swap(index, index + 1);
    Ok(c.into_iter().collect())
}

/// Inserts a random letter before position `index` (`index == len` appends).
pub fn op_insert(word: &str, index: usize, rng: &mut Rng) -> Result<String> {
    let mut c = chars(word);
    if index > c.len() {
        return Err(Error::Validation(format!("insert index {index} out of range")));
    }
    c.insert(index, random_letter(rng));
    Ok(c.into_iter().collect())
}

/// Replaces the character at `index` with a different random letter.
pub fn op_substitute(word: &str, index: usize, rng: &mut Rng) -> Result<String> {
    let mut c = chars(word);
    if index >= c.len() {
        return Err(Error::Validation(format!("substitute index {index} out of range")));
    }
    let original = c[index];
    let mut replacement = random_letter(rng);
    while replacement == original {
        replacement = random_letter(rng);
    }
    c[index] = replacement;
    Ok(c.into_iter().collect())
}

/// Replaces the character at `index` with a keyboard neighbor, or a random
/// different letter when the key has no neighbors defined.
pub fn op_keyboard_replace(
    word: &str,
    index: usize,
    keyboard: &KeyboardMap,
    rng: &mut Rng,
) -> Result<String> {
    let c = chars(word);
    if index >= c.len() {
        return Err(Error::Validation(format!("replace index {index} out of range")));
    }
    let neighbors = keyboard.neighbors(c[index]);
    if neighbors.is_empty() {
        return op_substitute(word, index, rng);
    }
    let mut out = c;
    out[index] = neighbors[rng.random_range(0..neighbors.len())];
    Ok(out.into_iter().collect())
}

/// Splits a word with a space before interior position `index`.
pub fn op_space_insert(word: &str, index: usize) -> Result<String> {
    let mut c = chars(word);
    if index == 0 || index >= c.len() {
        return Err(Error::Validation(format!("space index {index} not interior")));
    }
    c.insert(index, ' ');
    Ok(c.into_iter().collect())
}

/// One applied edit, for diff reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypoEdit {
    pub op: TypoOp,
    pub word_index: usize,
    pub before: String,
    pub after: String,
}

fn apply(op: TypoOp, word: &str, keyboard: &KeyboardMap, rng: &mut Rng) -> Result<String> {
    let c = chars(word);
    let n = c.len();
    match op {
        TypoOp::Delete => op_delete(word, rng.random_range(0..n)),
        TypoOp::Transpose => {
            let spots: Vec<usize> = (0..n - 1).filter(|&i| c[i] != c[i + 1]).collect();
            op_transpose(word, spots[rng.random_range(0..spots.len())])
        }
        TypoOp::Insert => op_insert(word, rng.random_range(0..=n), rng),
        TypoOp::Substitute => op_substitute(word, rng.random_range(0..n), rng),
        TypoOp::KeyboardReplace => op_keyboard_replace(word, rng.random_range(0..n), keyboard, rng),
        TypoOp::SpaceInsert => op_space_insert(word, rng.random_range(1..n)),
    }
}

/// Like [`inject_typos`] but also reports the edit, if one was made.
pub fn inject_typos_traced(
    text: &str,
    config: &TypoConfig,
    keyboard: &KeyboardMap,
    rng: &mut Rng,
) -> (String, Option<TypoEdit>) {
    if config.operations.is_empty() || !rng.random_bool(config.injection_probability) {
        return (text.to_string(), None);
    }
    let op = config.operations[rng.random_range(0..config.operations.len())];
    let words: Vec<&str> = text.split_whitespace().collect();
    let eligible: Vec<usize> = (0..words.len())
        .filter(|&i| op.eligible(&chars(words[i])))
        .collect();
    if eligible.is_empty() {
        return (text.to_string(), None);
    }
    let target = eligible[rng.random_range(0..eligible.len())];
    if is_numeric(words[target]) {
        return (text.to_string(), None);
    }
    let edited = apply(op, words[target], keyboard, rng)
        .expect("eligibility guarantees a valid edit position");
    let mut out: Vec<&str> = words.clone();
    out[target] = &edited;
    let edit = TypoEdit {
        op,
        word_index: target,
        before: words[target].to_string(),
        after: edited.clone(),
    };
    (out.join(" "), Some(edit))
}

pub fn inject_typos(text: &str, config: &TypoConfig, keyboard: &KeyboardMap, rng: &mut Rng) -> String {
    inject_typos_traced(text, config, keyboard, rng).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn rng() -> Rng {
        substream(11, Stream::Typos)
    }

    #[test]
    fn delete_examples() {
        assert_eq!(op_delete("chair", 2).unwrap(), "chir");
        assert_eq!(op_delete("ab", 0).unwrap(), "b");
        assert!(op_delete("a", 0).is_err());
    }

    #[test]
    fn transpose_examples() {
        assert_eq!(op_transpose("sofa", 1).unwrap(), "sfoa");
        assert_eq!(op_transpose("ab", 0).unwrap(), "ba");
        let twice = op_transpose(&op_transpose("sofa", 2).unwrap(), 2).unwrap();
        assert_eq!(twice, "sofa");
        assert!(op_transpose("ab", 1).is_err());
    }

    #[test]
    fn insert_keeps_ends() {
        let mut r = rng();
        for _ in 0..50 {
            let out = op_insert("tv", 1, &mut r).unwrap();
            let c: Vec<char> = out.chars().collect();
            assert_eq!(c.len(), 3);
            assert_eq!(c[0], 't');
            assert_eq!(c[2], 'v');
        }
    }

    #[test]
    fn substitute_always_changes() {
        let mut r = rng();
        for _ in 0..200 {
            let out = op_substitute("a", 0, &mut r).unwrap();
            assert_ne!(out, "a");
            assert_eq!(out.len(), 1);
        }
    }

    #[test]
    fn keyboard_replace_uses_shipped_map() {
        let kb = KeyboardMap::qwerty();
        let allowed = ['w', 'a', 's'];
        let mut r = rng();
        for _ in 0..200 {
            let out = op_keyboard_replace("q", 0, &kb, &mut r).unwrap();
            assert!(allowed.contains(&out.chars().next().unwrap()), "{out}");
        }
        // No neighbors for digits-as-letters: falls back to a random letter.
        let out = op_keyboard_replace("7", 0, &kb, &mut r).unwrap();
        assert_ne!(out, "7");
    }

    #[test]
    fn keyboard_map_is_symmetric() {
        let kb = KeyboardMap::qwerty();
        for c in 'a'..='z' {
            assert!(!kb.neighbors(c).is_empty());
            for &n in kb.neighbors(c) {
                assert!(kb.neighbors(n).contains(&c), "{c} -> {n}");
                assert_ne!(n, c);
            }
        }
        assert_eq!(kb.neighbors('q'), &['a', 's', 'w']);
    }

    #[test]
    fn space_insert_is_interior() {
        assert_eq!(op_space_insert("airtag", 3).unwrap(), "air tag");
        assert!(op_space_insert("airtag", 0).is_err());
        assert!(op_space_insert("airtag", 6).is_err());
    }

    #[test]
    fn zero_probability_is_identity() {
        let cfg = TypoConfig { injection_probability: 0.0, ..Default::default() };
        let kb = KeyboardMap::qwerty();
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(inject_typos("red  shoes", &cfg, &kb, &mut r), "red  shoes");
        }
    }

    #[test]
    fn numeric_target_skips_injection() {
        let cfg = TypoConfig { injection_probability: 1.0, ..Default::default() };
        let kb = KeyboardMap::qwerty();
        let mut r = rng();
        let mut skipped = 0;
        for _ in 0..2000 {
            let (out, edit) = inject_typos_traced("iphone 14", &cfg, &kb, &mut r);
            match edit {
                Some(e) => {
                    assert_eq!(e.before, "iphone");
                    assert!(out.ends_with(" 14"), "{out}");
                }
                None => {
                    assert_eq!(out, "iphone 14");
                    skipped += 1;
                }
            }
        }
        assert!(skipped > 0);
    }

    #[test]
    fn seeded_determinism() {
        let cfg = TypoConfig { injection_probability: 1.0, ..Default::default() };
        let kb = KeyboardMap::qwerty();
        let run = || {
            let mut r = rng();
            (0..50)
                .map(|_| inject_typos("blue denim jacket for women", &cfg, &kb, &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn per_operation_length_contracts(word in "[a-z]{1,12}", seed in any::<u64>()) {
            let mut r = substream(seed, Stream::Typos);
            let n = word.chars().count();
            let kb = KeyboardMap::qwerty();
            let i = (seed as usize) % n;
            prop_assert_eq!(op_insert(&word, i, &mut r).unwrap().chars().count(), n + 1);
            let s = op_substitute(&word, i, &mut r).unwrap();
            prop_assert_eq!(s.chars().count(), n);
            prop_assert_ne!(s.chars().nth(i), word.chars().nth(i));
            prop_assert_eq!(op_keyboard_replace(&word, i, &kb, &mut r).unwrap().chars().count(), n);
            if n >= 2 {
                prop_assert_eq!(op_delete(&word, i).unwrap().chars().count(), n - 1);
                let j = i.min(n - 2);
                let t = op_transpose(&word, j).unwrap();
                let mut a: Vec<char> = t.chars().collect();
                let mut b: Vec<char> = word.chars().collect();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
                let sp = op_space_insert(&word, 1 + i % (n - 1)).unwrap();
                prop_assert_eq!(sp.replace(' ', ""), word.clone());
            }
        }

        #[test]
        fn at_most_one_word_changes(text in "[a-z]{1,6}( [a-z0-9]{1,6}){0,4}", seed in any::<u64>()) {
            let cfg = TypoConfig { injection_probability: 1.0, ..Default::default() };
            let kb = KeyboardMap::qwerty();
            let mut r = substream(seed, Stream::Typos);
            let (out, edit) = inject_typos_traced(&text, &cfg, &kb, &mut r);
            match edit {
                None => prop_assert_eq!(out, text),
                Some(e) => {
                    prop_assert!(!is_numeric(&e.before));
                    prop_assert_ne!(&e.before, &e.after);
                    let before: Vec<&str> = text.split_whitespace().collect();
                    let mut expect = before.clone();
                    expect[e.word_index] = &e.after;
                    prop_assert_eq!(out, expect.join(" "));
                }
            }
        }
    }
}
