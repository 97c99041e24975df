//! Forward pass with activation caching, and the exact reverse-mode backward pass.

use super::layers::{
    add_bias, add_column_sums, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_in_place,
};
use super::{Batch, Model, LN_EPS};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

/// Logits and every residual-stream state of one forward pass.
///
/// `hidden[0]` is the embedding output and `hidden[n_layers]` is the input of
/// the final norm. All tensors are flattened row-major over `(batch, position)`.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub logits: Vec<F>,
    pub hidden: Vec<Vec<F>>,
    pub batch: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn logits_at(&self, b: usize, t: usize) -> &[F] {
        let row = (b * self.seq_len + t) * self.vocab_size;
        &self.logits[row..row + self.vocab_size]
    }

    pub fn hidden_at(&self, layer: usize, b: usize, t: usize) -> &[F] {
        let row = (b * self.seq_len + t) * self.d_model;
        &self.hidden[layer][row..row + self.d_model]
    }
}

struct BlockCache<F> {
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    a1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    a2: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

struct Cache<F> {
    hidden: Vec<Vec<F>>,
    blocks: Vec<BlockCache<F>>,
    xhat_f: Vec<F>,
    rstd_f: Vec<F>,
    a_f: Vec<F>,
    logits: Vec<F>,
    batch: usize,
    seq_len: usize,
}

fn dense<F: Scalar>(data: &[F], offset: usize, rows: usize, cols: usize) -> MatRef<'_, F> {
    MatRef::dense(data, offset, rows, cols)
}

fn dense_mut<F: Scalar>(data: &mut [F], offset: usize, rows: usize, cols: usize) -> MatMut<'_, F> {
    MatMut::dense(data, offset, rows, cols)
}

impl<F: Scalar> Model<F> {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: batch.seq_len, max: self.config.max_seq_len });
        }
        if let Some(&id) = batch.tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Causal forward pass returning logits and all residual states.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardTrace<F>> {
        let cache = self.run(batch)?;
        Ok(ForwardTrace {
            logits: cache.logits,
            hidden: cache.hidden,
            batch: cache.batch,
            seq_len: cache.seq_len,
            vocab_size: self.config.vocab_size,
            d_model: self.config.d_model,
        })
    }

    /// Mean cross-entropy over scored (response) positions.
    pub fn loss(&self, batch: &Batch) -> Result<F> {
        let cache = self.run(batch)?;
        let (loss, _) = self.loss_from_logits(&cache.logits, &batch.targets, false)?;
        Ok(loss)
    }

    /// Loss and its exact gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(F, Vec<F>)> {
        let cache = self.run(batch)?;
        let (loss, dlogits) = self.loss_from_logits(&cache.logits, &batch.targets, true)?;
        let grad = self.backward(&cache, batch, &dlogits.expect("requested"));
        Ok((loss, grad))
    }

    pub fn gradient(&self, batch: &Batch) -> Result<Vec<F>> {
        self.loss_and_gradient(batch).map(|(_, g)| g)
    }

    /// Final norm followed by the output embedding, applied to one residual row.
    pub fn project_hidden(&self, row: &[F]) -> Vec<F> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let l = &self.layout;
        let p = &self.params;
        let (a, _, _) = layer_norm(
            row,
            &p[l.final_gain..l.final_gain + d],
            &p[l.final_bias..l.final_bias + d],
            d,
            F::from_f64_lossy(LN_EPS),
        );
        let mut out = vec![F::zero(); v];
        gemm(dense(&a, 0, 1, d), dense(p, l.lm_head, d, v), dense_mut(&mut out, 0, 1, v), false);
        out
    }

    fn loss_from_logits(&self, logits: &[F], targets: &[u32], want_grad: bool) -> Result<(F, Option<Vec<F>>)> {
        let v = self.config.vocab_size;
        let count = targets.iter().filter(|&&t| t != Batch::IGNORE).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let inv = F::one() / F::from_usize_lossy(count);
        let mut total = F::zero();
        let mut dlogits = want_grad.then(|| vec![F::zero(); logits.len()]);
        for (row, &target) in targets.iter().enumerate() {
            if target == Batch::IGNORE {
                continue;
            }
            let z = &logits[row * v..(row + 1) * v];
            let target = target as usize;
            match dlogits.as_mut() {
                Some(dl) => {
                    let out = &mut dl[row * v..(row + 1) * v];
                    out.copy_from_slice(z);
                    let lse = softmax_in_place(out);
                    total += lse - z[target];
                    out[target] -= F::one();
                    for g in out.iter_mut() {
                        *g *= inv;
                    }
                }
                None => {
                    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
                    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
                    total += lse - z[target];
                }
            }
        }
        Ok((total * inv, dlogits))
    }

    fn run(&self, batch: &Batch) -> Result<Cache<F>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let (b, t) = (batch.batch, batch.seq_len);
        let n = b * t;
        let l = &self.layout;
        let p = &self.params;

        let mut x = vec![F::zero(); n * d];
        for (row, &tok) in batch.tokens.iter().enumerate() {
            let pos = row % t.max(1);
            let te = &p[l.tok_emb + tok as usize * d..][..d];
            let pe = &p[l.pos_emb + pos * d..][..d];
            for ((o, &a), &c) in x[row * d..(row + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + c;
            }
        }
        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        hidden.push(x);
        for layer in 0..cfg.n_layers {
            let (out, cache) = self.block_forward(layer, hidden.last().expect("nonempty"), b, t);
            blocks.push(cache);
            hidden.push(out);
        }
        let (a_f, xhat_f, rstd_f) = layer_norm(
            hidden.last().expect("nonempty"),
            &p[l.final_gain..l.final_gain + d],
            &p[l.final_bias..l.final_bias + d],
            d,
            F::from_f64_lossy(LN_EPS),
        );
        let mut logits = vec![F::zero(); n * v];
        gemm(dense(&a_f, 0, n, d), dense(p, l.lm_head, d, v), dense_mut(&mut logits, 0, n, v), false);
        Ok(Cache { hidden, blocks, xhat_f, rstd_f, a_f, logits, batch: b, seq_len: t })
    }

    fn block_forward(&self, layer: usize, x: &[F], b: usize, t: usize) -> (Vec<F>, BlockCache<F>) {
        let cfg = &self.config;
        let (d, f, heads, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let n = b * t;
        let o = self.layout.layers[layer];
        let p = &self.params;
        let eps = F::from_f64_lossy(LN_EPS);
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();

        let (a1, xhat1, rstd1) = layer_norm(x, &p[o.ln1_gain..o.ln1_gain + d], &p[o.ln1_bias..o.ln1_bias + d], d, eps);
        let mut qkv = vec![F::zero(); n * 3 * d];
        gemm(dense(&a1, 0, n, d), dense(p, o.w_qkv, d, 3 * d), dense_mut(&mut qkv, 0, n, 3 * d), false);
        add_bias(&mut qkv, &p[o.b_qkv..o.b_qkv + 3 * d]);

        let mut probs = vec![F::zero(); b * heads * t * t];
        let mut attn = vec![F::zero(); n * d];
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * t * 3 * d + h * dh;
                let q = MatRef { data: &qkv[..], offset: base, rows: t, cols: dh, rs: 3 * d, cs: 1 };
                let k = MatRef { offset: base + d, ..q };
                let vv = MatRef { offset: base + 2 * d, ..q };
                let poff = (bi * heads + h) * t * t;
                gemm(q, k.t(), dense_mut(&mut probs, poff, t, t), false);
                for i in 0..t {
                    let row = &mut probs[poff + i * t..poff + (i + 1) * t];
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    for s in row[i + 1..].iter_mut() {
                        *s = F::zero();
                    }
                }
                let out = MatMut { data: &mut attn[..], offset: bi * t * d + h * dh, rows: t, cols: dh, rs: d, cs: 1 };
                gemm(dense(&probs, poff, t, t), vv, out, false);
            }
        }

        let mut x2 = x.to_vec();
        gemm(dense(&attn, 0, n, d), dense(p, o.w_attn_out, d, d), dense_mut(&mut x2, 0, n, d), true);
        add_bias(&mut x2, &p[o.b_attn_out..o.b_attn_out + d]);

        let (a2, xhat2, rstd2) = layer_norm(&x2, &p[o.ln2_gain..o.ln2_gain + d], &p[o.ln2_bias..o.ln2_bias + d], d, eps);
        let mut pre = vec![F::zero(); n * f];
        gemm(dense(&a2, 0, n, d), dense(p, o.w_mlp_in, d, f), dense_mut(&mut pre, 0, n, f), false);
        add_bias(&mut pre, &p[o.b_mlp_in..o.b_mlp_in + f]);
        let act: Vec<F> = pre.iter().map(|&z| gelu(z)).collect();
        let mut x3 = x2;
        gemm(dense(&act, 0, n, f), dense(p, o.w_mlp_out, f, d), dense_mut(&mut x3, 0, n, d), true);
        add_bias(&mut x3, &p[o.b_mlp_out..o.b_mlp_out + d]);

        (x3, BlockCache { xhat1, rstd1, a1, qkv, probs, attn, xhat2, rstd2, a2, pre, act })
    }

    fn backward(&self, cache: &Cache<F>, batch: &Batch, dlogits: &[F]) -> Vec<F> {
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let (b, t) = (cache.batch, cache.seq_len);
        let n = b * t;
        let l = &self.layout;
        let p = &self.params;
        let mut g = vec![F::zero(); l.total];

        gemm(dense(&cache.a_f, 0, n, d).t(), dense(dlogits, 0, n, v), dense_mut(&mut g, l.lm_head, d, v), true);
        let mut da = vec![F::zero(); n * d];
        gemm(dense(dlogits, 0, n, v), dense(p, l.lm_head, d, v).t(), dense_mut(&mut da, 0, n, d), false);
        let mut dx = vec![F::zero(); n * d];
        {
            let (dgain, dbias) = g[l.final_gain..l.final_gain + 2 * d].split_at_mut(d);
            layer_norm_backward(&da, &cache.xhat_f, &cache.rstd_f, &p[l.final_gain..l.final_gain + d], d, &mut dx, dgain, dbias);
        }
        for layer in (0..cfg.n_layers).rev() {
            dx = self.block_backward(layer, &cache.blocks[layer], dx, b, t, &mut g);
        }
        for (row, &tok) in batch.tokens.iter().enumerate() {
            let pos = row % t;
            let src = &dx[row * d..(row + 1) * d];
            for (o, &s) in g[l.tok_emb + tok as usize * d..][..d].iter_mut().zip(src) {
                *o += s;
            }
            for (o, &s) in g[l.pos_emb + pos * d..][..d].iter_mut().zip(src) {
                *o += s;
            }
        }
        g
    }

    /// Propagates `dx` (gradient at the block output) to the block input,
    /// accumulating parameter gradients into `g`.
    fn block_backward(&self, layer: usize, c: &BlockCache<F>, dx: Vec<F>, b: usize, t: usize, g: &mut [F]) -> Vec<F> {
        let cfg = &self.config;
        let (d, f, heads, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let n = b * t;
        let o = self.layout.layers[layer];
        let p = &self.params;
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();

        // MLP branch
        add_column_sums(&dx, &mut g[o.b_mlp_out..o.b_mlp_out + d]);
        gemm(dense(&c.act, 0, n, f).t(), dense(&dx, 0, n, d), dense_mut(g, o.w_mlp_out, f, d), true);
        let mut dpre = vec![F::zero(); n * f];
        gemm(dense(&dx, 0, n, d), dense(p, o.w_mlp_out, f, d).t(), dense_mut(&mut dpre, 0, n, f), false);
        for (dz, &z) in dpre.iter_mut().zip(&c.pre) {
            *dz *= gelu_grad(z);
        }
        add_column_sums(&dpre, &mut g[o.b_mlp_in..o.b_mlp_in + f]);
        gemm(dense(&c.a2, 0, n, d).t(), dense(&dpre, 0, n, f), dense_mut(g, o.w_mlp_in, d, f), true);
        let mut da2 = vec![F::zero(); n * d];
        gemm(dense(&dpre, 0, n, f), dense(p, o.w_mlp_in, d, f).t(), dense_mut(&mut da2, 0, n, d), false);
        let mut dx2 = dx;
        {
            let (dgain, dbias) = g[o.ln2_gain..o.ln2_gain + 2 * d].split_at_mut(d);
            layer_norm_backward(&da2, &c.xhat2, &c.rstd2, &p[o.ln2_gain..o.ln2_gain + d], d, &mut dx2, dgain, dbias);
        }

        // attention branch
        add_column_sums(&dx2, &mut g[o.b_attn_out..o.b_attn_out + d]);
        gemm(dense(&c.attn, 0, n, d).t(), dense(&dx2, 0, n, d), dense_mut(g, o.w_attn_out, d, d), true);
        let mut dattn = vec![F::zero(); n * d];
        gemm(dense(&dx2, 0, n, d), dense(p, o.w_attn_out, d, d).t(), dense_mut(&mut dattn, 0, n, d), false);

        let mut dqkv = vec![F::zero(); n * 3 * d];
        let mut dp = vec![F::zero(); t * t];
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * t * 3 * d + h * dh;
                let q = MatRef { data: &c.qkv[..], offset: base, rows: t, cols: dh, rs: 3 * d, cs: 1 };
                let k = MatRef { offset: base + d, ..q };
                let vv = MatRef { offset: base + 2 * d, ..q };
                let d_out = MatRef { data: &dattn[..], offset: bi * t * d + h * dh, rows: t, cols: dh, rs: d, cs: 1 };
                let poff = (bi * heads + h) * t * t;
                let probs = dense(&c.probs, poff, t, t);

                gemm(d_out, vv.t(), dense_mut(&mut dp, 0, t, t), false);
                let dv = MatMut { data: &mut dqkv[..], offset: base + 2 * d, rows: t, cols: dh, rs: 3 * d, cs: 1 };
                gemm(probs.t(), d_out, dv, false);

                for i in 0..t {
                    let prow = &c.probs[poff + i * t..poff + (i + 1) * t];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let s = (0..=i).fold(F::zero(), |acc, j| acc + drow[j] * prow[j]);
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - s) * scale;
                    }
                    for x in drow[i + 1..].iter_mut() {
                        *x = F::zero();
                    }
                }
                let dq = MatMut { data: &mut dqkv[..], offset: base, rows: t, cols: dh, rs: 3 * d, cs: 1 };
                gemm(dense(&dp, 0, t, t), k, dq, false);
                let dk = MatMut { data: &mut dqkv[..], offset: base + d, rows: t, cols: dh, rs: 3 * d, cs: 1 };
                gemm(dense(&dp, 0, t, t).t(), q, dk, false);
            }
        }
        add_column_sums(&dqkv, &mut g[o.b_qkv..o.b_qkv + 3 * d]);
        gemm(dense(&c.a1, 0, n, d).t(), dense(&dqkv, 0, n, 3 * d), dense_mut(g, o.w_qkv, d, 3 * d), true);
        let mut da1 = vec![F::zero(); n * d];
        gemm(dense(&dqkv, 0, n, 3 * d), dense(p, o.w_qkv, d, 3 * d).t(), dense_mut(&mut da1, 0, n, d), false);
        {
            let (dgain, dbias) = g[o.ln1_gain..o.ln1_gain + 2 * d].split_at_mut(d);
            layer_norm_backward(&da1, &c.xhat1, &c.rstd1, &p[o.ln1_gain..o.ln1_gain + d], d, &mut dx2, dgain, dbias);
        }
        dx2
    }
}
