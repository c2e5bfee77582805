use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CHAR_SLOT: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<char>"];

/// ASCII punctuation replaced by spaces before splitting.
const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')', '-'];

/// Lowercases, maps the punctuation set to spaces and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace(PUNCTUATION, " ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token table with the reserved ids `PAD`, `BOS`, `EOS`, `UNK`, `CHAR_SLOT`
/// in front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("reserved tokens are valid")
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens, in the order given.
    /// Duplicates are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?}")));
            }
            if t != t.to_lowercase() {
                return Err(Error::invalid(format!("token {t:?} is not lowercase")));
            }
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        Ok(v)
    }

    /// Sorted vocabulary over every word of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize_words).collect();
        let words = words.into_iter().filter(|w| !RESERVED.contains(&w.as_str()));
        Self::from_tokens(words).expect("normalized words are valid tokens")
    }

    fn push(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len() as u32);
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercase, strip punctuation, split; unknown words become `UNK`.
    /// No `BOS`/`EOS` is added.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_sidecar(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                offset: 0,
                detail: "vocabulary sidecar must start with the reserved tokens".into(),
            });
        }
        let v = Self::from_tokens(lines[RESERVED.len()..].iter().copied())?;
        if v.len() != lines.len() {
            return Err(Error::Format {
                offset: 0,
                detail: "duplicate token in vocabulary sidecar".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["Jack opens the door.", "Mary smiles"])
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::default();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<char>"), Some(CHAR_SLOT));
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let ids = v.tokenize("Jack opens the door.");
        assert_eq!(v.detokenize(&ids), "jack opens the door");
        assert!(v.tokenize("").is_empty());
        let j = v.id("jack").unwrap();
        assert_eq!(v.tokenize("Jack, JACK"), vec![j, j]);
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
        assert_eq!(normalize_words("don't (stop)-now"), vec!["don", "t", "stop", "now"]);
    }

    #[test]
    fn non_ascii_passes_through() {
        assert_eq!(normalize_words("Café—naïve"), vec!["café—naïve"]);
    }

    #[test]
    fn sidecar_round_trip() {
        let v = vocab();
        assert_eq!(Vocabulary::from_sidecar(&v.to_sidecar()).unwrap(), v);
        assert!(Vocabulary::from_sidecar("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent_on_detokenized_output(text in "[a-zA-Z .,!?;:'\"()-]{0,40}") {
            let v = Vocabulary::from_texts(["alpha beta gamma", "a b c"]);
            let ids = v.tokenize(&text);
            prop_assert_eq!(v.tokenize(&v.detokenize(&ids)), ids);
        }
    }
}
