use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const SEP_ID: u32 = 5;
pub const NUM_SPECIALS: u32 = 6;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS as usize] =
    ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>", "<sep>"];

/// Whitespace plus punctuation tokenizer: alphanumeric runs are words,
/// every other non-space character stands alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token table with fixed special ids at the front. Ids are dense from 0
/// and specials are never remapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from the non-special tokens in id order.
    pub fn from_tokens<I>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
    {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if t.is_empty() {
                return Err(Error::data("vocabulary: empty token"));
            }
            all.push(t);
        }
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("vocabulary: duplicate token {:?}", t)));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Frequency-cut vocabulary over token streams, ordered by count
    /// descending then token ascending so two builds over the same corpus
    /// are identical.
    pub fn build<'a, I>(token_streams: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in token_streams {
            for tok in stream {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(SPECIAL_TOKENS[UNK_ID as usize])
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Token strings for ids, skipping specials when asked.
    pub fn decode(&self, ids: &[u32], skip_specials: bool) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !(skip_specials && Self::is_special(id)))
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// One non-special token per line; line number = id - number of
    /// specials.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[NUM_SPECIALS as usize..] {
            writeln!(out, "{}", t).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().map(|l| l.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("Look out, Taro!"),
            vec!["Look", "out", ",", "Taro", "!"]
        );
        assert_eq!(tokenize("  spaced   out "), vec!["spaced", "out"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn specials_are_fixed() {
        let v = Vocabulary::from_tokens(["cat".to_string()]).unwrap();
        assert_eq!(v.id("<pad>"), PAD_ID);
        assert_eq!(v.id("<sep>"), SEP_ID);
        assert_eq!(v.id("cat"), NUM_SPECIALS);
        assert_eq!(v.id("dog"), UNK_ID);
    }

    #[test]
    fn build_is_stable_across_runs() {
        let streams: Vec<Vec<String>> =
            vec![tokenize("the cat sat on the mat"), tokenize("the dog sat")];
        let refs: Vec<&[String]> = streams.iter().map(|s| s.as_slice()).collect();
        let a = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        let b = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        assert_eq!(a, b);
        // "the" occurs 3x, "sat" 2x, rest 1x alphabetical
        assert_eq!(a.token(NUM_SPECIALS), "the");
        assert_eq!(a.token(NUM_SPECIALS + 1), "sat");
        assert_eq!(a.token(NUM_SPECIALS + 2), "cat");
    }

    #[test]
    fn min_count_cuts() {
        let streams: Vec<Vec<String>> = vec![tokenize("a a b")];
        let refs: Vec<&[String]> = streams.iter().map(|s| s.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn encode_decode_round_trip_in_vocab() {
        let streams: Vec<Vec<String>> = vec![tokenize("hello brave new world")];
        let refs: Vec<&[String]> = streams.iter().map(|s| s.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        let toks = tokenize("brave new world");
        let ids = v.encode(&toks);
        assert_eq!(v.decode(&ids, true), toks);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(["x".into(), "y".into(), "z".into()]).unwrap();
        v.write_file(&path).unwrap();
        let back = Vocabulary::read_file(&path).unwrap();
        assert_eq!(v, back);
    }
}
