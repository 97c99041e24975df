use serde::{Deserialize, Serialize};

use super::Dataset;

/// A factoid whose entity pair appears verbatim inside one mixing example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollidingPair {
    pub subject: String,
    pub object: String,
    /// Index of the first mixing example containing both entities.
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub fraction: f64,
    pub colliding_pairs: Vec<CollidingPair>,
    pub total_pairs: usize,
}

/// Fraction of factoid entity pairs `(subject, object)` whose two members both
/// occur verbatim in a single example (prompt or response) of `mix`.
///
/// Examples without a stored triple fall back to `(prompt, response)`.
pub fn check_overlap(factoids: &Dataset, mix: &Dataset) -> OverlapReport {
    let haystacks: Vec<(&str, &str)> = mix.examples.iter().map(|e| (e.prompt.as_str(), e.response.as_str())).collect();
    let contains = |(p, r): (&str, &str), needle: &str| p.contains(needle) || r.contains(needle);

    let mut colliding_pairs = Vec::new();
    for ex in &factoids.examples {
        let subject = ex.subject.as_deref().unwrap_or(&ex.prompt);
        let object = ex.object.as_deref().unwrap_or(&ex.response);
        if let Some(source_index) =
            haystacks.iter().position(|&h| contains(h, subject) && contains(h, object))
        {
            colliding_pairs.push(CollidingPair { subject: subject.to_owned(), object: object.to_owned(), source_index });
        }
    }
    let total_pairs = factoids.len();
    let fraction = if total_pairs == 0 { 0.0 } else { colliding_pairs.len() as f64 / total_pairs as f64 };
    OverlapReport { fraction, colliding_pairs, total_pairs }
}
