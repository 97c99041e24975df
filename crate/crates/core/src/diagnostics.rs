//! Logit-lens probes and gradient-alignment measurements.
//!
//! The gradient tools are written against the small [`Objective`] trait so the
//! same estimator runs on the transformer and on [`QuadraticObjective`], whose
//! one-step behaviour is known in closed form.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{top_k_ids, Batch, Model};
use crate::scalar::Scalar;
use crate::seeding::rng;
use crate::tokenizer::Tokenizer;

/// Default number of examples per gradient estimate.
pub const DEFAULT_GRAD_SAMPLE: usize = 64;

/// Where in depth the correct first answer token first enters the top-k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHistogram {
    /// One entry per residual state, embedding output first.
    pub per_layer_frequency: Vec<f64>,
    /// Fraction of examples whose correct token shows up at any probe point.
    pub coverage: f64,
    pub k: usize,
}

/// Probes the residual stream at the position that predicts the first
/// response token. Every state goes through the final norm and the output
/// head; the histogram counts the earliest probe index whose top-k contains
/// the correct token.
pub fn logit_lens<F: Scalar>(model: &Model<F>, tokenizer: &Tokenizer, d: &Dataset, k: usize) -> Result<ProbeHistogram> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.id.clone()));
    }
    if k == 0 {
        return Err(Error::config("logit lens k must be at least 1"));
    }
    let probes = model.config().n_layers + 1;
    let mut counts = vec![0usize; probes];
    let mut hits = 0usize;
    for chunk in d.examples.chunks(64) {
        let mut prompts = Vec::with_capacity(chunk.len());
        let mut answers = Vec::with_capacity(chunk.len());
        for e in chunk {
            let (ids, start) = tokenizer.encode_pair(&e.prompt, &e.response)?;
            answers.push(ids[start]);
            prompts.push(ids[..start].to_vec());
        }
        let batch = Batch::from_sequences(&prompts);
        let trace = model.forward(&batch)?;
        for (b, (prompt, &answer)) in prompts.iter().zip(&answers).enumerate() {
            let t = prompt.len() - 1;
            let first = (0..probes).find(|&layer| {
                let logits = model.project_hidden(trace.hidden_at(layer, b, t));
                top_k_ids(&logits, k).contains(&answer)
            });
            if let Some(layer) = first {
                counts[layer] += 1;
                hits += 1;
            }
        }
    }
    let per_layer_frequency = if hits == 0 {
        vec![0.0; probes]
    } else {
        counts.iter().map(|&c| c as f64 / hits as f64).collect()
    };
    Ok(ProbeHistogram { per_layer_frequency, coverage: hits as f64 / d.len() as f64, k })
}

/// Inner-product geometry of two gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradAlignment {
    pub dot: f64,
    pub cosine: f64,
    pub norm_a: f64,
    pub norm_b: f64,
}

impl GradAlignment {
    /// Alignment of two flat gradients; fails when either has zero norm.
    pub fn between(ga: &[f64], gb: &[f64]) -> Result<Self> {
        if ga.len() != gb.len() {
            return Err(Error::config(format!("gradient lengths differ: {} vs {}", ga.len(), gb.len())));
        }
        let dot = dot(ga, gb);
        let norm_a = dot_self(ga).sqrt();
        let norm_b = dot_self(gb).sqrt();
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(Error::DegenerateGradient);
        }
        let cosine = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
        Ok(Self { dot, cosine, norm_a, norm_b })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_self(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Inner products entering the mixing term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTerms {
    /// Gradient on the stage data joined with the mixing data, dotted with the old-task gradient.
    pub mixed: f64,
    /// Gradient on the stage data alone, dotted with the old-task gradient.
    pub plain: f64,
}

/// First-order loss change on the old task that mixing buys over plain training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub delta2: f64,
    pub eta: f64,
    pub terms: DeltaTerms,
}

/// A differentiable loss over collections of data, evaluated at a fixed point.
/// Passing several collections means the mean loss over their union.
pub trait Objective {
    type Data;

    fn gradient(&self, data: &[&Self::Data]) -> Result<Vec<f64>>;
}

/// Mixing estimate at the objective's current point. Without mixing data the
/// plain gradient stands in for the mixed one, so the result is exactly zero.
pub fn delta2_with<O: Objective>(
    objective: &O,
    d_a: &O::Data,
    d_b: &O::Data,
    d_m: Option<&O::Data>,
    eta: f64,
) -> Result<DeltaEstimate> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::config(format!("eta must be positive and finite, got {eta}")));
    }
    let g_a = objective.gradient(&[d_a])?;
    let g_b = objective.gradient(&[d_b])?;
    let plain = GradAlignment::between(&g_b, &g_a)?.dot;
    let mixed = match d_m {
        Some(m) => dot(&objective.gradient(&[d_b, m])?, &g_a),
        None => plain,
    };
    Ok(DeltaEstimate { delta2: eta * (mixed - plain), eta, terms: DeltaTerms { mixed, plain } })
}

/// Masked LM loss of a model, with every dataset cut to a seeded subsample.
pub struct ModelObjective<'a, F> {
    pub model: &'a Model<F>,
    pub tokenizer: &'a Tokenizer,
    /// `None` uses whole datasets.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl<F: Scalar> ModelObjective<'_, F> {
    fn subsample<'d>(&self, d: &'d Dataset) -> Result<Vec<&'d Example>> {
        match self.sample {
            None => Ok(d.examples.iter().collect()),
            Some(n) if n > d.len() => {
                Err(Error::config(format!("gradient sample {n} exceeds dataset {:?} of size {}", d.id, d.len())))
            }
            Some(n) => {
                let mut idx = sample_indices(&mut rng(self.seed), d.len(), n).into_vec();
                idx.sort_unstable();
                Ok(idx.into_iter().map(|i| &d.examples[i]).collect())
            }
        }
    }
}

impl<F: Scalar> Objective for ModelObjective<'_, F> {
    type Data = Dataset;

    /// Token-weighted mean gradient, accumulated over chunks of 32 examples.
    fn gradient(&self, data: &[&Dataset]) -> Result<Vec<f64>> {
        let mut examples = Vec::new();
        for d in data {
            examples.extend(self.subsample(d)?);
        }
        if examples.is_empty() {
            return Err(Error::EmptyDataset(data.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join("+")));
        }
        let pairs = examples
            .iter()
            .map(|e| self.tokenizer.encode_pair(&e.prompt, &e.response))
            .collect::<Result<Vec<_>>>()?;
        let mut total = vec![0.0; self.model.num_params()];
        let mut tokens = 0usize;
        for chunk in pairs.chunks(32) {
            let batch = Batch::from_pairs(chunk);
            let n = batch.scored_tokens();
            let g = self.model.gradient(&batch)?;
            for (t, x) in total.iter_mut().zip(&g) {
                *t += x.as_f64() * n as f64;
            }
            tokens += n;
        }
        total.iter_mut().for_each(|t| *t /= tokens as f64);
        Ok(total)
    }
}

/// Alignment between the gradients of two datasets at the model's parameters.
/// Both subsamples are drawn with the same seed.
pub fn grad_alignment<F: Scalar>(
    model: &Model<F>,
    tokenizer: &Tokenizer,
    d_a: &Dataset,
    d_b: &Dataset,
    sample: Option<usize>,
    seed: u64,
) -> Result<GradAlignment> {
    let objective = ModelObjective { model, tokenizer, sample, seed };
    GradAlignment::between(&objective.gradient(&[d_a])?, &objective.gradient(&[d_b])?)
}

/// Mixing estimate for the transformer at a checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn delta2_estimate<F: Scalar>(
    theta_before: &Model<F>,
    tokenizer: &Tokenizer,
    d_a: &Dataset,
    d_b: &Dataset,
    d_m: Option<&Dataset>,
    eta: f64,
    sample: Option<usize>,
    seed: u64,
) -> Result<DeltaEstimate> {
    let objective = ModelObjective { model: theta_before, tokenizer, sample, seed };
    delta2_with(&objective, d_a, d_b, d_m, eta)
}

/// `L_D(θ) = mean over c in D of ½ (θ − c)ᵀ H (θ − c)` with a shared symmetric `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub hessian: Vec<f64>,
    pub theta: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(hessian: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let n = theta.len();
        if hessian.len() != n * n {
            return Err(Error::config(format!("hessian must be {n}x{n}")));
        }
        if (0..n).any(|i| (0..n).any(|j| hessian[i * n + j] != hessian[j * n + i])) {
            return Err(Error::config("hessian must be symmetric"));
        }
        Ok(Self { hessian, theta })
    }

    fn centers<'c>(data: &[&'c Vec<Vec<f64>>]) -> Result<Vec<&'c [f64]>> {
        let all: Vec<&[f64]> = data.iter().flat_map(|d| d.iter().map(Vec::as_slice)).collect();
        if all.is_empty() {
            return Err(Error::EmptyDataset("quadratic".into()));
        }
        Ok(all)
    }

    fn h_times(&self, v: &[f64]) -> Vec<f64> {
        self.hessian.chunks(v.len()).map(|row| dot(row, v)).collect()
    }

    pub fn loss_at(&self, theta: &[f64], data: &[&Vec<Vec<f64>>]) -> Result<f64> {
        let centers = Self::centers(data)?;
        let sum: f64 = centers
            .iter()
            .map(|c| {
                let r: Vec<f64> = theta.iter().zip(*c).map(|(t, c)| t - c).collect();
                0.5 * dot(&r, &self.h_times(&r))
            })
            .sum();
        Ok(sum / centers.len() as f64)
    }

    pub fn gradient_at(&self, theta: &[f64], data: &[&Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        let centers = Self::centers(data)?;
        let m = centers.len() as f64;
        let r: Vec<f64> = (0..theta.len()).map(|i| theta[i] - centers.iter().map(|c| c[i]).sum::<f64>() / m).collect();
        Ok(self.h_times(&r))
    }

    /// One plain gradient step on the union of `data`.
    pub fn step(&self, eta: f64, data: &[&Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        let g = self.gradient_at(&self.theta, data)?;
        Ok(self.theta.iter().zip(&g).map(|(t, g)| t - eta * g).collect())
    }
}

impl Objective for QuadraticObjective {
    type Data = Vec<Vec<f64>>;

    fn gradient(&self, data: &[&Self::Data]) -> Result<Vec<f64>> {
        self.gradient_at(&self.theta, data)
    }
}
