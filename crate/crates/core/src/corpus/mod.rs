//! Dataset types, generators, on-disk format and the entity-overlap audit.

mod generate;
mod overlap;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{
    gen_arithmetic_nonfactoid, gen_kvr, gen_random_word_sequences, gen_templated_factoids, generic_passages,
    load_generic_corpus, nonsense_word, KVR_ALPHABET,
};
pub use overlap::{check_overlap, CollidingPair, OverlapReport};

/// Public-domain prose bundled for tests and as a default generic mixing source.
pub const BUNDLED_GENERIC_TEXT: &str = include_str!("../../data/generic.txt");

/// Bundled English word list used by random word sequence mixing data.
pub const BUNDLED_WORDS: &str = include_str!("../../data/words.txt");

pub fn bundled_wordlist() -> Vec<String> {
    BUNDLED_WORDS.lines().map(str::trim).filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Factoid,
    Nonfactoid,
    MixRandom,
    MixGeneric,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Factoid => "factoid",
            DatasetKind::Nonfactoid => "nonfactoid",
            DatasetKind::MixRandom => "mix_random",
            DatasetKind::MixGeneric => "mix_generic",
        })
    }
}

/// A (subject, relation, object) triple rendered through a prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factoid {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub prompt: String,
    pub response: String,
}

impl Factoid {
    pub fn into_example(self) -> Example {
        Example {
            prompt: self.prompt,
            response: self.response,
            subject: Some(self.subject),
            relation: Some(self.relation),
            object: Some(self.object),
        }
    }
}

/// One (prompt, response) training pair. The triple is present for factoids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

impl Example {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), response: response.into(), subject: None, relation: None, object: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub kind: DatasetKind,
    pub examples: Vec<Example>,
    pub seed: u64,
}

/// Sidecar manifest stored next to a dataset's JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub id: String,
    pub kind: DatasetKind,
    pub seed: u64,
    pub count: usize,
}

impl Dataset {
    pub fn new(id: impl Into<String>, kind: DatasetKind, examples: Vec<Example>, seed: u64) -> Self {
        Self { id: id.into(), kind, examples, seed }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn prompts(&self) -> HashSet<&str> {
        self.examples.iter().map(|e| e.prompt.as_str()).collect()
    }

    pub fn has_unique_prompts(&self) -> bool {
        self.prompts().len() == self.examples.len()
    }

    pub fn prompts_disjoint_from(&self, other: &Dataset) -> bool {
        let mine = self.prompts();
        other.examples.iter().all(|e| !mine.contains(e.prompt.as_str()))
    }

    /// Every prompt and response, e.g. for building a word-mode tokenizer.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().flat_map(|e| [e.prompt.as_str(), e.response.as_str()])
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest { id: self.id.clone(), kind: self.kind, seed: self.seed, count: self.len() }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(manifest: DatasetManifest, text: &str) -> Result<Self> {
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Example>, _>>()?;
        if examples.len() != manifest.count {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("manifest says {} examples, file has {}", manifest.count, examples.len()),
            });
        }
        Ok(Self { id: manifest.id, kind: manifest.kind, examples, seed: manifest.seed })
    }

    /// Writes `<dir>/<id>.jsonl` and `<dir>/<id>.manifest.json`; returns the data path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data = dir.join(format!("{}.jsonl", self.id));
        let file = fs::File::create(&data).map_err(|e| Error::io(&data, e))?;
        let mut w = BufWriter::new(file);
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n").map_err(|e| Error::io(&data, e))?;
        }
        w.flush().map_err(|e| Error::io(&data, e))?;
        let manifest = dir.join(format!("{}.manifest.json", self.id));
        fs::write(&manifest, serde_json::to_string_pretty(&self.manifest())?).map_err(|e| Error::io(&manifest, e))?;
        Ok(data)
    }

    /// Loads a dataset saved by [`Dataset::save`], given the `.jsonl` path.
    pub fn load(data: &Path) -> Result<Self> {
        let manifest_path = data.with_extension("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let file = fs::File::open(data).map_err(|e| Error::io(data, e))?;
        let mut examples = Vec::with_capacity(manifest.count);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(data, e))?;
            if !line.trim().is_empty() {
                examples.push(serde_json::from_str(&line)?);
            }
        }
        if examples.len() != manifest.count {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("{}: manifest says {} examples, found {}", data.display(), manifest.count, examples.len()),
            });
        }
        Ok(Self { id: manifest.id, kind: manifest.kind, examples, seed: manifest.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let d = gen_kvr(5, 8, 8, 3).unwrap();
        let mut mixed = d.clone();
        mixed.examples.push(Example::new("quote \" and \\ slash", "x"));
        let text = mixed.to_jsonl().unwrap();
        let back = Dataset::from_jsonl(mixed.manifest(), &text).unwrap();
        assert_eq!(back, mixed);
        assert_eq!(back.to_jsonl().unwrap(), text);
        assert!(text.lines().last().unwrap().starts_with("{\"prompt\":"));
        assert!(!text.lines().last().unwrap().contains("subject"));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_arithmetic_nonfactoid(7, 20, 1).unwrap().with_id("math");
        let path = d.save(dir.path()).unwrap();
        assert!(path.ends_with("math.jsonl"));
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, d);
        let bytes = fs::read(&path).unwrap();
        back.save(dir.path()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn manifest_count_mismatch_is_reported() {
        let d = gen_kvr(2, 4, 4, 1).unwrap();
        let mut m = d.manifest();
        m.count = 3;
        assert!(matches!(Dataset::from_jsonl(m, &d.to_jsonl().unwrap()), Err(Error::Format { .. })));
    }

    #[test]
    fn bundled_resources_are_printable_ascii() {
        for text in [BUNDLED_GENERIC_TEXT, BUNDLED_WORDS] {
            assert!(text.bytes().all(|b| b == b'\n' || (0x20..=0x7e).contains(&b)));
        }
        assert!(bundled_wordlist().len() > 400);
    }
}
