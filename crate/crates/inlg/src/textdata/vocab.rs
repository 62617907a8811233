//! Token/id mapping with fixed reserved ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Tokenization mode: lowercased whitespace words or single characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Word,
    Char,
}

impl std::str::FromStr for VocabMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(VocabMode::Word),
            "char" => Ok(VocabMode::Char),
            other => Err(Error::Config(format!(
                "unknown vocab mode {other:?} (expected word|char)"
            ))),
        }
    }
}

impl std::fmt::Display for VocabMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VocabMode::Word => "word",
            VocabMode::Char => "char",
        })
    }
}

/// Bijective token <-> id map. Ids 0..=3 are reserved for PAD/BOS/EOS/UNK.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    mode: VocabMode,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    fn reserved() -> Vec<String> {
        vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ]
    }

    pub fn new(mode: VocabMode) -> Self {
        let tokens = Self::reserved();
        let mut v = Vocab {
            mode,
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// Split raw text into token strings according to the mode.
    pub fn tokenize(mode: VocabMode, text: &str) -> Vec<String> {
        match mode {
            VocabMode::Word => text
                .split_whitespace()
                .map(|w| w.to_lowercase())
                .collect(),
            VocabMode::Char => text.chars().map(|c| c.to_string()).collect(),
        }
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Insert a token if new; returns its id either way.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Encode one token, mapping out-of-vocabulary to UNK.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.id_of(token).unwrap_or(UNK_ID)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode_tokens(&Self::tokenize(self.mode, text))
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token_of(i).to_string()).collect()
    }

    /// Human-readable text: reserved tokens dropped, tokens joined per mode.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let parts: Vec<&str> = ids
            .iter()
            .filter(|&&i| i > UNK_ID)
            .map(|&i| self.token_of(i))
            .collect();
        match self.mode {
            VocabMode::Word => parts.join(" "),
            VocabMode::Char => parts.concat(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut v: Vocab = serde_json::from_reader(std::io::BufReader::new(file))?;
        if v.tokens.len() < 4 || v.tokens[..4] != Self::reserved()[..] {
            return Err(Error::format(
                "vocab file does not carry the reserved tokens in slots 0..4".to_string(),
            ));
        }
        v.rebuild_index();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::new(VocabMode::Word);
        assert_eq!(v.id_of(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.id_of(BOS_TOKEN), Some(BOS_ID));
        assert_eq!(v.id_of(EOS_TOKEN), Some(EOS_ID));
        assert_eq!(v.id_of(UNK_TOKEN), Some(UNK_ID));
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn oov_becomes_unk() {
        let mut v = Vocab::new(VocabMode::Word);
        v.intern("cat");
        assert_eq!(v.encode_token("cat"), 4);
        assert_eq!(v.encode_token("dog"), UNK_ID);
    }

    #[test]
    fn word_tokenize_lowercases() {
        let toks = Vocab::tokenize(VocabMode::Word, "Live Show .");
        assert_eq!(toks, vec!["live", "show", "."]);
    }

    proptest! {
        /// encode(decode(ids)) == ids for any id sequence without UNK.
        #[test]
        fn encode_decode_round_trip(ids in proptest::collection::vec(0u32..20, 0..40)) {
            let mut v = Vocab::new(VocabMode::Word);
            for i in 0..16 {
                v.intern(&format!("tok{i}"));
            }
            let ids: Vec<u32> = ids.into_iter().filter(|&i| i != UNK_ID).collect();
            let tokens = v.decode_ids(&ids);
            let back = v.encode_tokens(&tokens);
            prop_assert_eq!(back, ids);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vocab::new(VocabMode::Char);
        for c in "abc xyz".chars() {
            v.intern(&c.to_string());
        }
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.mode(), VocabMode::Char);
        assert_eq!(loaded.encode_text("abc"), v.encode_text("abc"));
    }
}
