//! Closed-vocabulary text to token mapping.
//!
//! Ids `0..4` are reserved for `PAD`, `BOS`, `EOS` and `SEP`. Character mode
//! uses a fixed printable-ASCII alphabet; word mode splits on whitespace and
//! re-joins with single spaces, so only texts already in that canonical form
//! round-trip exactly.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Char,
    Word,
}

impl Default for TokenizerMode {
    fn default() -> Self {
        TokenizerMode::Char
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    mode: TokenizerMode,
    vocab: Vec<String>,
}

impl Tokenizer {
    /// Builds a tokenizer. Character mode ignores `corpus_samples`.
    pub fn build<S: AsRef<str>>(mode: TokenizerMode, corpus_samples: &[S]) -> Result<Self> {
        let body: Vec<String> = match mode {
            TokenizerMode::Char => (0x20u8..=0x7e).map(|b| (b as char).to_string()).collect(),
            TokenizerMode::Word => {
                if corpus_samples.is_empty() {
                    return Err(Error::config("word tokenizer needs at least one corpus sample"));
                }
                let words: BTreeSet<&str> = corpus_samples
                    .iter()
                    .flat_map(|s| s.as_ref().split_whitespace())
                    .filter(|w| !SPECIAL_TOKENS.contains(w))
                    .collect();
                words.into_iter().map(str::to_owned).collect()
            }
        };
        let vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(body).collect();
        Ok(Self::from_vocab(mode, vocab))
    }

    fn from_vocab(mode: TokenizerMode, vocab: Vec<String>) -> Self {
        // specials are deliberately left out of the lookup so user text can never produce them
        let token_to_id = vocab
            .iter()
            .enumerate()
            .skip(SPECIAL_TOKENS.len())
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { mode, vocab, token_to_id }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self.mode {
            TokenizerMode::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| {
                        let s: &str = c.encode_utf8(&mut buf);
                        self.id_of(s).ok_or_else(|| Error::OutOfVocabulary { symbol: s.to_owned() })
                    })
                    .collect()
            }
            TokenizerMode::Word => text
                .split_whitespace()
                .map(|w| self.id_of(w).ok_or_else(|| Error::OutOfVocabulary { symbol: w.to_owned() }))
                .collect(),
        }
    }

    /// Decodes ids back to text, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let pieces = ids
            .iter()
            .filter(|&&id| id as usize >= SPECIAL_TOKENS.len())
            .filter_map(|&id| self.vocab.get(id as usize).map(String::as_str));
        match self.mode {
            TokenizerMode::Char => pieces.collect(),
            TokenizerMode::Word => pieces.collect::<Vec<_>>().join(" "),
        }
    }

    /// `BOS prompt SEP response EOS`, plus the index of the first response token.
    pub fn encode_pair(&self, prompt: &str, response: &str) -> Result<(Vec<u32>, usize)> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(prompt)?);
        ids.push(SEP);
        let start = ids.len();
        ids.extend(self.encode(response)?);
        ids.push(EOS);
        Ok((ids, start))
    }

    /// `BOS prompt SEP`, the decoding context for greedy generation.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(prompt)?);
        ids.push(SEP);
        Ok(ids)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile { mode: self.mode, vocab: self.vocab.clone() };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        if file.vocab.len() < SPECIAL_TOKENS.len()
            || file.vocab.iter().zip(SPECIAL_TOKENS).any(|(v, s)| v != s)
        {
            return Err(Error::Format { what: "tokenizer", detail: "special tokens must occupy ids 0..4".into() });
        }
        let unique: BTreeSet<&String> = file.vocab.iter().collect();
        if unique.len() != file.vocab.len() {
            return Err(Error::Format { what: "tokenizer", detail: "duplicate vocabulary entries".into() });
        }
        Ok(Self::from_vocab(file.mode, file.vocab))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
