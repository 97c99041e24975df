use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use super::{Dataset, DatasetKind, Example, Factoid};
use crate::error::{Error, Result};
use crate::seeding::{rng, Rng};

/// Characters used for key-value recall keys and values.
pub const KVR_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn random_string(rng: &mut Rng, len: usize) -> String {
    (0..len).map(|_| KVR_ALPHABET[rng.gen_range(0..KVR_ALPHABET.len())] as char).collect()
}

/// Decodes `index` (base 36, most significant first) into a fixed-length key.
fn key_from_index(mut index: u64, len: usize) -> String {
    let mut out = vec![0u8; len];
    for slot in out.iter_mut().rev() {
        *slot = KVR_ALPHABET[(index % KVR_ALPHABET.len() as u64) as usize];
        index /= KVR_ALPHABET.len() as u64;
    }
    String::from_utf8(out).expect("ascii")
}

/// Key-value recall factoids: `"The value of key {key} is?"` -> value.
pub fn gen_kvr(n: usize, key_len: usize, val_len: usize, seed: u64) -> Result<Dataset> {
    if key_len == 0 || val_len == 0 {
        return Err(Error::config("key_len and val_len must be at least 1"));
    }
    let capacity = (KVR_ALPHABET.len() as u64).checked_pow(key_len as u32);
    if let Some(cap) = capacity {
        if n as u64 > cap {
            return Err(Error::Capacity(format!("{n} distinct keys requested but only {cap} exist for key_len {key_len}")));
        }
    }
    let mut rng = rng(seed);
    let keys: Vec<String> = match capacity {
        // small key spaces: sample indices without replacement
        Some(cap) if cap <= 4 * n as u64 + 1024 => index::sample(&mut rng, cap as usize, n)
            .into_iter()
            .map(|i| key_from_index(i as u64, key_len))
            .collect(),
        _ => {
            let mut seen = HashSet::with_capacity(n);
            let mut keys = Vec::with_capacity(n);
            while keys.len() < n {
                let k = random_string(&mut rng, key_len);
                if seen.insert(k.clone()) {
                    keys.push(k);
                }
            }
            keys
        }
    };
    let examples = keys
        .into_iter()
        .map(|key| {
            let value = random_string(&mut rng, val_len);
            Factoid {
                prompt: format!("The value of key {key} is?"),
                response: value.clone(),
                subject: key,
                relation: "value".to_owned(),
                object: value,
            }
            .into_example()
        })
        .collect();
    Ok(Dataset::new(format!("kvr-{seed}"), DatasetKind::Factoid, examples, seed))
}

/// Pronounceable nonsense word of `syllables` consonant-vowel pairs.
pub fn nonsense_word(rng: &mut Rng, syllables: usize) -> String {
    let mut w = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

fn distinct_words(rng: &mut Rng, count: usize, syllables: usize, taken: &mut HashSet<String>) -> Result<Vec<String>> {
    let space = (CONSONANTS.len() * VOWELS.len()).pow(syllables as u32);
    if taken.len() + count > space / 2 {
        return Err(Error::Capacity(format!("cannot draw {count} distinct {syllables}-syllable words")));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = nonsense_word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Templated factoids `"The {relation} of {subject} is?"` over generated nonsense entities.
pub fn gen_templated_factoids(n: usize, n_subjects: usize, n_relations: usize, seed: u64) -> Result<Dataset> {
    let grid = n_subjects
        .checked_mul(n_relations)
        .ok_or_else(|| Error::Capacity("subject x relation grid overflows".into()))?;
    if n > grid {
        return Err(Error::Capacity(format!("{n} factoids requested but only {grid} (subject, relation) pairs exist")));
    }
    let mut rng = rng(seed);
    let mut taken = HashSet::new();
    let subjects = distinct_words(&mut rng, n_subjects, 3, &mut taken)?;
    let relations = distinct_words(&mut rng, n_relations, 2, &mut taken)?;
    let cells = index::sample(&mut rng, grid, n).into_vec();
    let examples = cells
        .into_iter()
        .map(|cell| {
            let subject = subjects[cell / n_relations].clone();
            let relation = relations[cell % n_relations].clone();
            let object = nonsense_word(&mut rng, 3);
            Factoid {
                prompt: format!("The {relation} of {subject} is?"),
                response: object.clone(),
                subject,
                relation,
                object,
            }
            .into_example()
        })
        .collect();
    Ok(Dataset::new(format!("templated-{seed}"), DatasetKind::Factoid, examples, seed))
}

/// Random word sequences the model is asked to repeat verbatim. Words are drawn
/// uniformly with replacement.
pub fn gen_random_word_sequences<S: AsRef<str>>(
    n: usize,
    words_per_seq: usize,
    wordlist: &[S],
    seed: u64,
) -> Result<Dataset> {
    if wordlist.is_empty() {
        return Err(Error::config("random word sequences need a nonempty word list"));
    }
    if words_per_seq == 0 {
        return Err(Error::config("words_per_seq must be at least 1"));
    }
    let mut rng = rng(seed);
    let examples = (0..n)
        .map(|_| {
            let seq = (0..words_per_seq)
                .map(|_| wordlist[rng.gen_range(0..wordlist.len())].as_ref())
                .collect::<Vec<_>>()
                .join(" ");
            Example::new(format!("Memorize the following random-string passage: {seq}"), seq)
        })
        .collect();
    Ok(Dataset::new(format!("random-words-{seed}"), DatasetKind::MixRandom, examples, seed))
}

/// Completion passages cut from plain text, one document per line.
pub fn generic_passages(
    text: &str,
    n: usize,
    words_per_passage: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::config(format!("split_fraction must lie in (0, 1), got {split_fraction}")));
    }
    if words_per_passage < 2 {
        return Err(Error::config("words_per_passage must be at least 2"));
    }
    let docs: Vec<Vec<&str>> = text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|words| words.len() >= words_per_passage)
        .collect();
    // every start offset of every eligible document is one candidate passage
    let windows: Vec<usize> = docs.iter().map(|d| d.len() - words_per_passage + 1).collect();
    let total: usize = windows.iter().sum();
    if total < n {
        return Err(Error::Capacity(format!("{n} passages requested but the corpus yields only {total}")));
    }
    let head = ((split_fraction * words_per_passage as f64).floor() as usize).clamp(1, words_per_passage - 1);
    let mut rng = rng(seed);
    let examples = index::sample(&mut rng, total, n)
        .into_iter()
        .map(|mut flat| {
            let mut doc = 0;
            while flat >= windows[doc] {
                flat -= windows[doc];
                doc += 1;
            }
            let words = &docs[doc][flat..flat + words_per_passage];
            Example::new(
                format!("Complete the following partial passage: {}", words[..head].join(" ")),
                words[head..].join(" "),
            )
        })
        .collect();
    Ok(Dataset::new(format!("generic-{seed}"), DatasetKind::MixGeneric, examples, seed))
}

pub fn load_generic_corpus(
    path: &Path,
    n: usize,
    words_per_passage: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    generic_passages(&text, n, words_per_passage, split_fraction, seed)
}

/// `"What is {a} plus {b}?"` -> decimal sum, operands uniform in `0..=max_operand`.
pub fn gen_arithmetic_nonfactoid(n: usize, max_operand: u64, seed: u64) -> Result<Dataset> {
    if max_operand > u64::MAX / 2 {
        return Err(Error::config("max_operand too large"));
    }
    let mut rng = rng(seed);
    let examples = (0..n)
        .map(|_| {
            let a = rng.gen_range(0..=max_operand);
            let b = rng.gen_range(0..=max_operand);
            Example::new(format!("What is {a} plus {b}?"), (a + b).to_string())
        })
        .collect();
    Ok(Dataset::new(format!("arith-{seed}"), DatasetKind::Nonfactoid, examples, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{bundled_wordlist, BUNDLED_GENERIC_TEXT};
    use std::collections::BTreeSet;

    #[test]
    fn kvr_shape_and_uniqueness() {
        let d = gen_kvr(2000, 8, 8, 42).unwrap();
        assert_eq!(d.len(), 2000);
        let keys: HashSet<_> = d.examples.iter().map(|e| e.subject.clone().unwrap()).collect();
        assert_eq!(keys.len(), 2000);
        for e in &d.examples {
            let key = e.subject.as_deref().unwrap();
            assert_eq!(key.len(), 8);
            assert_eq!(e.response.len(), 8);
            assert_eq!(e.prompt, format!("The value of key {key} is?"));
            assert_eq!(e.object.as_deref(), Some(e.response.as_str()));
            assert!(e.response.bytes().all(|b| KVR_ALPHABET.contains(&b)));
        }
        assert!(d.has_unique_prompts());
    }

    #[test]
    fn kvr_edge_cases() {
        assert!(gen_kvr(0, 8, 8, 1).unwrap().is_empty());
        let a = gen_kvr(3, 1, 1, 7).unwrap();
        assert_eq!(a, gen_kvr(3, 1, 1, 7).unwrap());
        assert_ne!(a.examples, gen_kvr(3, 1, 1, 8).unwrap().examples);
        let full = gen_kvr(36, 1, 1, 7).unwrap();
        assert_eq!(full.prompts().len(), 36);
        assert!(matches!(gen_kvr(37, 1, 1, 7), Err(Error::Capacity(_))));
        assert!(gen_kvr(1, 0, 1, 7).unwrap_err().is_config());
    }

    #[test]
    fn templated_grid_is_exhaustive() {
        let d = gen_templated_factoids(4, 2, 2, 1).unwrap();
        let pairs: BTreeSet<_> = d
            .examples
            .iter()
            .map(|e| (e.subject.clone().unwrap(), e.relation.clone().unwrap()))
            .collect();
        assert_eq!(pairs.len(), 4);
        let subjects: BTreeSet<_> = pairs.iter().map(|p| &p.0).collect();
        let relations: BTreeSet<_> = pairs.iter().map(|p| &p.1).collect();
        assert_eq!((subjects.len(), relations.len()), (2, 2));
        assert!(matches!(gen_templated_factoids(5, 2, 2, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn templated_popqa_shape() {
        let d = gen_templated_factoids(2000, 500, 16, 5).unwrap();
        assert_eq!(d.len(), 2000);
        let relations: BTreeSet<_> = d.examples.iter().map(|e| e.relation.clone().unwrap()).collect();
        assert_eq!(relations.len(), 16);
        assert!(d.has_unique_prompts());
        for e in &d.examples {
            assert_eq!(e.prompt, format!("The {} of {} is?", e.relation.as_ref().unwrap(), e.subject.as_ref().unwrap()));
            assert!(!e.response.is_empty());
        }
    }

    #[test]
    fn random_word_sequences() {
        let words = bundled_wordlist();
        let d = gen_random_word_sequences(1, 50, &words, 3).unwrap();
        let e = &d.examples[0];
        assert_eq!(e.response.split(' ').count(), 50);
        assert_eq!(e.prompt, format!("Memorize the following random-string passage: {}", e.response));
        assert_eq!(d.kind, DatasetKind::MixRandom);

        let d = gen_random_word_sequences(4, 1, &["a"], 3).unwrap();
        assert!(d.examples.iter().all(|e| e.response == "a"));
        assert!(gen_random_word_sequences::<&str>(1, 3, &[], 3).unwrap_err().is_config());
    }

    #[test]
    fn generic_split() {
        let doc: Vec<String> = (1..=100).map(|i| format!("w{i}")).collect();
        let d = generic_passages(&doc.join(" "), 1, 100, 0.5, 0).unwrap();
        let e = &d.examples[0];
        assert_eq!(e.prompt, format!("Complete the following partial passage: {}", doc[..50].join(" ")));
        assert_eq!(e.response, doc[50..].join(" "));
        assert!(generic_passages("a b", 0, 5, 0.5, 0).unwrap().is_empty());
        assert!(matches!(generic_passages("a b\nc d e", 1, 5, 0.5, 0), Err(Error::Capacity(_))));
        assert!(generic_passages("a b c", 1, 2, 1.0, 0).unwrap_err().is_config());
    }

    #[test]
    fn generic_from_bundled_text() {
        let d = generic_passages(BUNDLED_GENERIC_TEXT, 2000, 50, 0.5, 9).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.kind, DatasetKind::MixGeneric);
        for e in &d.examples {
            let head = e.prompt.trim_start_matches("Complete the following partial passage: ");
            assert_eq!(head.split(' ').count() + e.response.split(' ').count(), 50);
        }
    }

    #[test]
    fn generic_missing_file() {
        let err = load_generic_corpus(Path::new("/nonexistent/corpus.txt"), 1, 5, 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn arithmetic_responses_recompute() {
        let d = gen_arithmetic_nonfactoid(500, 99, 11).unwrap();
        assert_eq!(d, gen_arithmetic_nonfactoid(500, 99, 11).unwrap());
        for e in &d.examples {
            let body = e.prompt.strip_prefix("What is ").unwrap().strip_suffix('?').unwrap();
            let (a, b) = body.split_once(" plus ").unwrap();
            let (a, b): (u64, u64) = (a.parse().unwrap(), b.parse().unwrap());
            assert!(a <= 99 && b <= 99);
            assert_eq!(e.response.parse::<u64>().unwrap(), a + b);
        }
    }
}
