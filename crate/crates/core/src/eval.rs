//! Greedy decoding, exact-match accuracy and the familiarity filter.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DatasetKind, Example};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::scalar::Scalar;
use crate::tokenizer::{Tokenizer, EOS};

/// Extra tokens granted beyond the target length when decoding for evaluation.
pub const DECODE_MARGIN: usize = 8;
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub prompt: String,
    pub prediction: String,
    pub target: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_example: Vec<ExampleOutcome>,
}

pub fn answers_match(prediction: &str, target: &str) -> bool {
    prediction.trim() == target.trim()
}

/// Greedy decoding from `BOS prompt SEP`, stopping at EOS, after
/// `max_new_tokens`, or at the model's context limit. Specials are stripped.
pub fn predict<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, prompt: &str, max_new_tokens: usize) -> Result<String> {
    let ids = tokenizer.encode_prompt(prompt)?;
    let out = greedy_batch(model, &[ids], &[max_new_tokens])?;
    Ok(tokenizer.decode(&out[0]))
}

/// Batched greedy decoding; returns the generated ids (without EOS) per prompt.
pub fn greedy_batch<F: Scalar>(model: &Model<F>, prompts: &[Vec<u32>], budgets: &[usize]) -> Result<Vec<Vec<u32>>> {
    assert_eq!(prompts.len(), budgets.len());
    let max_len = model.config().max_seq_len;
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    let mut generated: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).filter(|&i| budgets[i] > 0 && seqs[i].len() <= max_len).collect();
    if let Some(i) = (0..prompts.len()).find(|&i| seqs[i].len() > max_len) {
        return Err(Error::SequenceTooLong { len: seqs[i].len(), max: max_len });
    }
    while !active.is_empty() {
        let mut still = Vec::with_capacity(active.len());
        for chunk in active.chunks(CHUNK) {
            let batch = Batch::from_sequences(&chunk.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>());
            let trace = model.forward(&batch)?;
            for (b, &i) in chunk.iter().enumerate() {
                let next = crate::model::argmax_id(trace.logits_at(b, seqs[i].len() - 1));
                if next == EOS {
                    continue;
                }
                seqs[i].push(next);
                generated[i].push(next);
                if generated[i].len() < budgets[i] && seqs[i].len() < max_len {
                    still.push(i);
                }
            }
        }
        active = still;
    }
    Ok(generated)
}

fn decode_budget(tokenizer: &Tokenizer, ex: &Example) -> Result<usize> {
    Ok(tokenizer.encode(&ex.response)?.len() + DECODE_MARGIN)
}

/// Exact match by actually decoding every prompt.
pub fn exact_match<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, d: &Dataset) -> Result<EvalReport> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.id.clone()));
    }
    let prompts = d.examples.iter().map(|e| tokenizer.encode_prompt(&e.prompt)).collect::<Result<Vec<_>>>()?;
    let budgets = d.examples.iter().map(|e| decode_budget(tokenizer, e)).collect::<Result<Vec<_>>>()?;
    let outputs = greedy_batch(model, &prompts, &budgets)?;
    let per_example: Vec<ExampleOutcome> = d
        .examples
        .iter()
        .zip(outputs)
        .map(|(e, ids)| {
            let prediction = tokenizer.decode(&ids);
            let correct = answers_match(&prediction, &e.response);
            ExampleOutcome { prompt: e.prompt.clone(), prediction, target: e.response.clone(), correct }
        })
        .collect();
    let accuracy = per_example.iter().filter(|o| o.correct).count() as f64 / per_example.len() as f64;
    Ok(EvalReport { accuracy, per_example })
}

/// Per-example exact-match verdicts from one teacher-forced pass.
///
/// Greedy decoding reproduces the target iff the argmax at every target
/// position equals the target token (EOS included). The only way a divergent
/// decode can still match after trimming is a whitespace token emitted in
/// place of the first response token or of EOS; those rare cases are decoded.
pub fn exact_match_flags<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, examples: &[Example]) -> Result<Vec<bool>> {
    let mut flags = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let pairs = chunk
            .iter()
            .map(|e| tokenizer.encode_pair(&e.prompt, &e.response))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_pairs(&pairs);
        let trace = model.forward(&batch)?;
        for (b, ((ids, start), ex)) in pairs.iter().zip(chunk).enumerate() {
            let mut mismatch = None;
            for t in start - 1..ids.len() - 1 {
                let got = crate::model::argmax_id(trace.logits_at(b, t));
                if got != ids[t + 1] {
                    mismatch = Some((t + 1 - start, got));
                    break;
                }
            }
            let verdict = match mismatch {
                None => answers_match(&tokenizer.decode(&ids[*start..ids.len() - 1]), &ex.response),
                Some((offset, EOS)) => tokenizer.decode(&ids[start + offset..ids.len() - 1]).trim().is_empty(),
                Some((offset, got)) => {
                    let response_len = ids.len() - 1 - start;
                    let whitespace = tokenizer.decode(&[got]).trim().is_empty() && got >= 4;
                    if whitespace && (offset == 0 || offset == response_len) {
                        answers_match(&predict(model, tokenizer, &ex.prompt, decode_budget(tokenizer, ex)?)?, &ex.response)
                    } else {
                        false
                    }
                }
            };
            flags.push(verdict);
        }
    }
    Ok(flags)
}

/// Exact-match accuracy via [`exact_match_flags`].
pub fn fast_accuracy<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.id.clone()));
    }
    let flags = exact_match_flags(model, tokenizer, &d.examples)?;
    Ok(flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64)
}

/// Token-weighted mean of the masked training loss over a dataset.
pub fn mean_loss<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.id.clone()));
    }
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in d.examples.chunks(CHUNK) {
        let pairs = chunk
            .iter()
            .map(|e| tokenizer.encode_pair(&e.prompt, &e.response))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_pairs(&pairs);
        let n = batch.scored_tokens();
        total += model.loss(&batch)?.as_f64() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Keeps exactly the factoids the model currently answers wrongly.
pub fn filter_unfamiliar<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, d: &Dataset) -> Result<Dataset> {
    if d.kind != DatasetKind::Factoid {
        return Err(Error::config(format!("familiarity filter expects a factoid dataset, {:?} is {}", d.id, d.kind)));
    }
    let flags = exact_match_flags(model, tokenizer, &d.examples)?;
    let examples = d.examples.iter().zip(flags).filter(|(_, ok)| !ok).map(|(e, _)| e.clone()).collect();
    Ok(Dataset::new(format!("{}@unfamiliar", d.id), d.kind, examples, d.seed))
}
