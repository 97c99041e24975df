//! Decoder-only pre-norm transformer over a flat parameter vector.
//!
//! Parameters live in one contiguous buffer indexed by named segments, which
//! keeps optimizer updates, gradient inner products and checkpointing trivial.

mod checkpoint;
mod layers;
mod transformer;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::rng;
use crate::tokenizer::PAD;

pub use transformer::ForwardTrace;

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 128, 4 heads, MLP 512.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self { n_layers: 2, d_model: 128, n_heads: 4, d_ff: 512, max_seq_len: 160, vocab_size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model {name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of the architecture.
    pub fn param_count(&self) -> usize {
        let (v, d, f, t) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + t * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_attn_out: usize,
    pub b_attn_out: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_mlp_in: usize,
    pub b_mlp_in: usize,
    pub w_mlp_out: usize,
    pub b_mlp_out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub lm_head: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum InitKind {
    Normal(f64),
    Zeros,
    Ones,
}

impl Layout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<InitKind>) {
        let (v, d, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let resid_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
        let mut segments = Vec::new();
        let mut inits = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
            let offset = total;
            total += shape.iter().product::<usize>();
            segments.push(Segment { name, offset, shape });
            inits.push(init);
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d], InitKind::Normal(INIT_STD));
        let pos_emb = push("pos_emb".into(), vec![t, d], InitKind::Normal(INIT_STD));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerOffsets {
                    ln1_gain: push(p("ln1.gain"), vec![d], InitKind::Ones),
                    ln1_bias: push(p("ln1.bias"), vec![d], InitKind::Zeros),
                    w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d], InitKind::Normal(INIT_STD)),
                    b_qkv: push(p("attn.b_qkv"), vec![3 * d], InitKind::Zeros),
                    w_attn_out: push(p("attn.w_out"), vec![d, d], InitKind::Normal(resid_std)),
                    b_attn_out: push(p("attn.b_out"), vec![d], InitKind::Zeros),
                    ln2_gain: push(p("ln2.gain"), vec![d], InitKind::Ones),
                    ln2_bias: push(p("ln2.bias"), vec![d], InitKind::Zeros),
                    w_mlp_in: push(p("mlp.w_in"), vec![d, f], InitKind::Normal(INIT_STD)),
                    b_mlp_in: push(p("mlp.b_in"), vec![f], InitKind::Zeros),
                    w_mlp_out: push(p("mlp.w_out"), vec![f, d], InitKind::Normal(resid_std)),
                    b_mlp_out: push(p("mlp.b_out"), vec![d], InitKind::Zeros),
                }
            })
            .collect();
        let final_gain = push("final_ln.gain".into(), vec![d], InitKind::Zeros);
        let final_bias = push("final_ln.bias".into(), vec![d], InitKind::Zeros);
        let lm_head = push("lm_head".into(), vec![d, v], InitKind::Normal(INIT_STD));
        (Self { segments, total, tok_emb, pos_emb, layers, final_gain, final_bias, lm_head }, inits)
    }
}

/// The transformer language model. Generic over the float width.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Scalar> Model<F> {
    /// Seeded initialization: scaled normals for matrices, zero biases and unit
    /// block norm gains. The final norm gain starts at zero, so an untrained
    /// model predicts uniformly while the random head still sends varied
    /// gradients into the network from the first step.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = Layout::build(&config);
        let mut rng = rng(config.seed);
        let mut params = Vec::with_capacity(layout.total);
        for (seg, init) in layout.segments.iter().zip(&inits) {
            match *init {
                InitKind::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    params.extend((0..seg.len()).map(|_| F::from_f64_lossy(dist.sample(&mut rng))));
                }
                InitKind::Zeros => params.extend(std::iter::repeat(F::zero()).take(seg.len())),
                InitKind::Ones => params.extend(std::iter::repeat(F::one()).take(seg.len())),
            }
        }
        Ok(Self { config, layout, params })
    }

    /// Wraps an existing parameter vector; its length must match the config.
    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let (layout, _) = Layout::build(&config);
        if params.len() != layout.total {
            return Err(Error::Format {
                what: "parameters",
                detail: format!("expected {} values, got {}", layout.total, params.len()),
            });
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.segments.iter().find(|s| s.name == name)
    }
}

/// Right-padded token batch with per-position next-token targets.
///
/// `targets[b * seq_len + t]` is the id expected at position `t + 1`, or
/// [`Batch::IGNORE`] where the loss is masked (prompt, separator, padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub const IGNORE: u32 = u32::MAX;

    /// Builds a training batch from `(ids, response_start)` pairs: only tokens at
    /// or after `response_start` are scored.
    pub fn from_pairs(seqs: &[(Vec<u32>, usize)]) -> Self {
        let seq_len = seqs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let mut tokens = vec![PAD; seqs.len() * seq_len];
        let mut targets = vec![Self::IGNORE; seqs.len() * seq_len];
        for (b, (ids, start)) in seqs.iter().enumerate() {
            let row = b * seq_len;
            tokens[row..row + ids.len()].copy_from_slice(ids);
            for t in 0..ids.len().saturating_sub(1) {
                if t + 1 >= *start {
                    targets[row + t] = ids[t + 1];
                }
            }
        }
        Self { tokens, targets, batch: seqs.len(), seq_len, lengths: seqs.iter().map(|(s, _)| s.len()).collect() }
    }

    /// Inference batch without targets.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let pairs: Vec<(Vec<u32>, usize)> = seqs.iter().map(|s| (s.clone(), usize::MAX)).collect();
        Self::from_pairs(&pairs)
    }

    pub fn scored_tokens(&self) -> usize {
        self.targets.iter().filter(|&&t| t != Self::IGNORE).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 16, vocab_size: 99, seed: 3 }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_config();
        let m = Model::<f64>::init(cfg.clone()).unwrap();
        // hand audit for V=99, D=8, F=16, T=16, one layer:
        // embeddings 99*8 + 16*8 = 920; block 16 + 216 + 72 + 16 + 144 + 136 = 600;
        // final norm 16; head 8*99 = 792
        assert_eq!(cfg.param_count(), 920 + 600 + 16 + 792);
        assert_eq!(m.num_params(), cfg.param_count());
        let last = m.segments().last().unwrap();
        assert_eq!(last.offset + last.len(), m.num_params());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny_config();
        let a = Model::<f64>::init(cfg.clone()).unwrap();
        let b = Model::<f64>::init(cfg.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::<f64>::init(ModelConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.params(), c.params());
        let gain = a.segment("layers.0.ln1.gain").unwrap();
        assert!(a.params()[gain.range()].iter().all(|&g| g == 1.0));
        let final_gain = a.segment("final_ln.gain").unwrap();
        assert!(a.params()[final_gain.range()].iter().all(|&g| g == 0.0));
        let bias = a.segment("layers.0.mlp.b_in").unwrap();
        assert!(a.params()[bias.range()].iter().all(|&g| g == 0.0));
        let head = a.segment("lm_head").unwrap();
        assert!(a.params()[head.range()].iter().all(|&g| g != 0.0));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let cfg = ModelConfig { n_heads: 3, ..tiny_config() };
        assert!(Model::<f64>::init(cfg).unwrap_err().is_config());
        let cfg = ModelConfig { n_layers: 0, ..tiny_config() };
        assert!(Model::<f32>::init(cfg).unwrap_err().is_config());
    }

    #[test]
    fn batch_masks_prompt_positions() {
        // BOS p SEP r1 r2 EOS, response starts at index 3
        let b = Batch::from_pairs(&[(vec![1, 10, 3, 20, 21, 2], 3), (vec![1, 3, 22, 2], 2)]);
        assert_eq!(b.seq_len, 6);
        assert_eq!(&b.targets[..6], &[Batch::IGNORE, Batch::IGNORE, 20, 21, 2, Batch::IGNORE]);
        assert_eq!(&b.targets[6..], &[Batch::IGNORE, 22, 2, Batch::IGNORE, Batch::IGNORE, Batch::IGNORE]);
        assert_eq!(&b.tokens[6..], &[1, 3, 22, 2, PAD, PAD]);
        assert_eq!(b.scored_tokens(), 5);
    }
}

/// Argmax over a logit row as a token id; ties go to the lowest id.
pub fn argmax_id<F: Scalar>(row: &[F]) -> u32 {
    layers::argmax(row) as u32
}

/// Top-`k` token ids of a logit row in descending order; ties go to the lowest id.
pub fn top_k_ids<F: Scalar>(row: &[F], k: usize) -> Vec<u32> {
    layers::top_k(row, k).into_iter().map(|i| i as u32).collect()
}
