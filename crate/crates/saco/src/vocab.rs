//! Vocabulary and whitespace tokenization shared by every other module.
//!
//! Tokens are lowercased whitespace-separated words. The four special ids are
//! pinned so fixtures stay stable: `<PAD>`=0, `<SOS>`=1, `<EOS>`=2, `<UNK>`=3.

use crate::error::{Result, SacoError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<PAD>";
pub const SOS_TOKEN: &str = "<SOS>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const UNK_TOKEN: &str = "<UNK>";

pub type TokenId = usize;

/// Bijective token ↔ id table with fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    specials: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a caption corpus. Tokens with frequency
    /// ≥ `min_freq` get ids, ordered by frequency descending then
    /// lexicographic, after the four specials.
    pub fn build(corpus: &[String], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(SacoError::InvalidInput("empty corpus".into()));
        }
        if min_freq < 1 {
            return Err(SacoError::InvalidInput("min_freq must be ≥ 1".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in line.split_whitespace() {
                *freq.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        if kept.is_empty() {
            return Err(SacoError::InvalidInput(format!(
                "no token reaches min_freq {min_freq}; vocabulary would hold only specials"
            )));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token =
            vec![PAD_TOKEN.to_string(), SOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the four specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Lowercase whitespace split; unknown tokens map to `<UNK>`. No
    /// `<SOS>`/`<EOS>` are added here.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|t| self.id(&t.to_lowercase()).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, stripping `<PAD>`/`<SOS>`/`<EOS>`.
    /// `<UNK>` renders as its literal token.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| SacoError::InvalidInput(format!("token id {id} out of range")))?;
            if id == PAD || id == SOS || id == EOS {
                continue;
            }
            parts.push(tok);
        }
        Ok(parts.join(" "))
    }

    pub fn to_json(&self) -> String {
        let specials: BTreeMap<String, usize> = [
            (PAD_TOKEN.to_string(), PAD),
            (SOS_TOKEN.to_string(), SOS),
            (EOS_TOKEN.to_string(), EOS),
            (UNK_TOKEN.to_string(), UNK),
        ]
        .into_iter()
        .collect();
        let file = VocabFile { tokens: self.id_to_token.clone(), specials };
        serde_json::to_string_pretty(&file).expect("vocab serialization")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        if file.tokens.len() < 4
            || file.tokens[PAD] != PAD_TOKEN
            || file.tokens[SOS] != SOS_TOKEN
            || file.tokens[EOS] != EOS_TOKEN
            || file.tokens[UNK] != UNK_TOKEN
        {
            return Err(SacoError::Data(format!(
                "vocab file {} lacks the fixed special tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(file.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_counts_directly() {
        let v = Vocabulary::build(&corpus(&["a dog", "a cat"]), 1).unwrap();
        assert_eq!(v.len(), 7); // 4 specials + {a, dog, cat}
        assert!(v.id("a").is_some());
        assert!(v.id("dog").is_some());
        assert!(v.id("cat").is_some());
    }

    #[test]
    fn min_freq_keeps_exactly_at_threshold() {
        let v = Vocabulary::build(&corpus(&["a a", "a"]), 3).unwrap();
        assert_eq!(v.len(), 5); // frequency("a") = 3 ≥ 3
        assert!(v.id("a").is_some());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(&[], 1).is_err());
    }

    #[test]
    fn specials_only_vocabulary_is_an_error() {
        // nothing reaches min_freq → |V| would be 4 < 5
        assert!(Vocabulary::build(&corpus(&["a b c"]), 2).is_err());
        assert!(Vocabulary::build(&corpus(&["   "]), 1).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let c = corpus(&["b a a", "c b a"]);
        let v1 = Vocabulary::build(&c, 1).unwrap();
        let v2 = Vocabulary::build(&c, 1).unwrap();
        assert_eq!(v1.to_json(), v2.to_json());
        // frequency desc then lexicographic: a(3), b(2), c(1)
        assert_eq!(v1.token(4), Some("a"));
        assert_eq!(v1.token(5), Some("b"));
        assert_eq!(v1.token(6), Some("c"));
    }

    #[test]
    fn tokenize_lowercases_and_maps_unknowns() {
        let v = Vocabulary::build(&corpus(&["a dog"]), 1).unwrap();
        assert_eq!(v.tokenize("A dog"), vec![v.id("a").unwrap(), v.id("dog").unwrap()]);
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
        assert_eq!(v.tokenize(""), Vec::<usize>::new());
    }

    #[test]
    fn detokenize_strips_specials_and_renders_unk() {
        let v = Vocabulary::build(&corpus(&["a dog"]), 1).unwrap();
        let ids = vec![SOS, v.id("a").unwrap(), v.id("dog").unwrap(), EOS];
        assert_eq!(v.detokenize(&ids).unwrap(), "a dog");
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        assert_eq!(v.detokenize(&[UNK]).unwrap(), "<UNK>");
        assert!(v.detokenize(&[99]).is_err());
    }

    #[test]
    fn round_trip_for_known_lowercase_text() {
        let v = Vocabulary::build(&corpus(&["the quick brown fox"]), 1).unwrap();
        let text = "the brown fox";
        assert_eq!(v.detokenize(&v.tokenize(text)).unwrap(), text);
    }

    #[test]
    fn save_load_round_trip() {
        let v = Vocabulary::build(&corpus(&["a dog runs"]), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
