//! Tiny decoder-only causal language model (pre-LN transformer blocks),
//! small enough that finite-difference checks over the whole pipeline run in
//! seconds. Visual tokens enter as a prefix of raw embeddings ahead of the
//! text tokens.

use crate::error::{MervError, Result};
use crate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, matmul,
    matmul_backward, LayerNormCache, Scalar, Tensor,
};
use crate::param::{Param, ParamGroup, Parameters};
use crate::rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLlmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub context: usize,
}

impl Default for ToyLlmConfig {
    fn default() -> Self {
        ToyLlmConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            vocab: 16,
            context: 96,
        }
    }
}

impl ToyLlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.vocab == 0 || self.context == 0
        {
            return Err(MervError::config("llm extents must be >= 1".to_string()));
        }
        if self.dim % self.heads != 0 {
            return Err(MervError::config(format!(
                "llm dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Rough dense parameter count (used only for reporting).
    pub fn param_count(&self) -> u64 {
        let d = self.dim as u64;
        let block = 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 2 * 2 * d;
        (self.vocab as u64 * d) + (self.context as u64 * d) + self.layers as u64 * block
            + 2 * d
            + d * self.vocab as u64
    }
}

#[derive(Clone, Debug)]
struct Block<S> {
    ln1: (Param<S>, Param<S>),
    wq: Param<S>,
    bq: Param<S>,
    wk: Param<S>,
    bk: Param<S>,
    wv: Param<S>,
    bv: Param<S>,
    wo: Param<S>,
    bo: Param<S>,
    ln2: (Param<S>, Param<S>),
    w1: Param<S>,
    b1: Param<S>,
    w2: Param<S>,
    b2: Param<S>,
}

#[derive(Clone, Debug)]
pub struct ToyLlm<S = f32> {
    cfg: ToyLlmConfig,
    tok_emb: Param<S>,
    pos_emb: Param<S>,
    blocks: Vec<Block<S>>,
    ln_f: (Param<S>, Param<S>),
    head: Param<S>,
}

#[derive(Clone, Debug)]
struct BlockCache<S> {
    x_in: Tensor<S>,
    a: Tensor<S>,
    ln1_cache: LayerNormCache<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    probs: Vec<Tensor<S>>,
    ctx: Tensor<S>,
    x_mid: Tensor<S>,
    m: Tensor<S>,
    ln2_cache: LayerNormCache<S>,
    pre1: Tensor<S>,
    hidden: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LmCache<S> {
    prefix_len: usize,
    text_tokens: Vec<u16>,
    blocks: Vec<BlockCache<S>>,
    x_final: Tensor<S>,
    xf: Tensor<S>,
    lnf_cache: LayerNormCache<S>,
}

impl<S: Scalar> ToyLlm<S> {
    pub fn new(cfg: ToyLlmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut r = rng::seeded_rng(seed, "llm");
        let mut mat = |rows: usize, cols: usize, s: f64| {
            Param::new(rng::randn_tensor::<S>(vec![rows, cols], s, &mut r))
        };
        let tok_emb = mat(cfg.vocab, d, 0.02);
        let pos_emb = mat(cfg.context, d, 0.02);
        let head = mat(d, cfg.vocab, std);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let wq = mat(d, d, std);
            let wk = mat(d, d, std);
            let wv = mat(d, d, std);
            let wo = mat(d, d, std);
            let w1 = mat(d, 4 * d, std);
            let w2 = mat(4 * d, d, 1.0 / (4.0 * d as f64).sqrt());
            let ones = || Param::new(Tensor::<S>::full(vec![d], S::one()));
            let zeros = |n: usize| Param::new(Tensor::<S>::zeros(vec![n]));
            blocks.push(Block {
                ln1: (ones(), zeros(d)),
                wq,
                bq: zeros(d),
                wk,
                bk: zeros(d),
                wv,
                bv: zeros(d),
                wo,
                bo: zeros(d),
                ln2: (ones(), zeros(d)),
                w1,
                b1: zeros(4 * d),
                w2,
                b2: zeros(d),
            });
        }
        Ok(ToyLlm {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: (
                Param::new(Tensor::<S>::full(vec![d], S::one())),
                Param::new(Tensor::<S>::zeros(vec![d])),
            ),
            head,
        })
    }

    pub fn cfg(&self) -> &ToyLlmConfig {
        &self.cfg
    }

    /// Causal forward over `[visual prefix; text embeddings]`. Returns
    /// `(seq, vocab)` logits.
    pub fn forward(
        &self,
        visual_prefix: &Tensor<S>,
        text_tokens: &[u16],
    ) -> Result<(Tensor<S>, LmCache<S>)> {
        let d = self.cfg.dim;
        if visual_prefix.rank() != 2 || visual_prefix.shape()[1] != d {
            return Err(MervError::dimension(format!(
                "visual prefix must be (l, {d}), got {:?}",
                visual_prefix.shape()
            )));
        }
        let prefix_len = visual_prefix.shape()[0];
        let seq = prefix_len + text_tokens.len();
        if seq > self.cfg.context {
            return Err(MervError::dimension(format!(
                "sequence {seq} exceeds context {}",
                self.cfg.context
            )));
        }
        for &t in text_tokens {
            if t as usize >= self.cfg.vocab {
                return Err(MervError::dimension(format!(
                    "token id {t} outside vocab {}",
                    self.cfg.vocab
                )));
            }
        }

        let mut x = Tensor::<S>::zeros(vec![seq, d]);
        x.data_mut()[..prefix_len * d].copy_from_slice(visual_prefix.data());
        for (i, &tok) in text_tokens.iter().enumerate() {
            let row = &self.tok_emb.value.data()[tok as usize * d..(tok as usize + 1) * d];
            x.data_mut()[(prefix_len + i) * d..(prefix_len + i + 1) * d].copy_from_slice(row);
        }
        let pos = self.pos_emb.value.data();
        for i in 0..seq * d {
            x.data_mut()[i] += pos[i];
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block_forward(block, &x, self.cfg.heads)?;
            caches.push(cache);
            x = y;
        }
        let (xf, lnf_cache) = layer_norm(&x, &self.ln_f.0.value, &self.ln_f.1.value, LN_EPS)?;
        let logits = matmul(&xf, &self.head.value)?;
        Ok((
            logits,
            LmCache {
                prefix_len,
                text_tokens: text_tokens.to_vec(),
                blocks: caches,
                x_final: x,
                xf,
                lnf_cache,
            },
        ))
    }

    /// Accumulates LM gradients and returns the gradient of the visual prefix.
    pub fn backward(&mut self, d_logits: &Tensor<S>, cache: &LmCache<S>) -> Result<Tensor<S>> {
        let d = self.cfg.dim;
        let (d_xf, d_head) = matmul_backward(d_logits, &cache.xf, &self.head.value)?;
        self.head.accumulate(&d_head);
        let (mut dx, dg, db) =
            layer_norm_backward(&d_xf, &cache.x_final, &self.ln_f.0.value, &cache.lnf_cache)?;
        self.ln_f.0.accumulate(&dg);
        self.ln_f.1.accumulate(&db);

        for li in (0..self.blocks.len()).rev() {
            dx = block_backward(&mut self.blocks[li], &cache.blocks[li], &dx, self.cfg.heads)?;
        }

        // input embedding: every row feeds position embeddings, text rows
        // scatter into the token table, prefix rows flow back to fusion
        let seq = dx.shape()[0];
        let prefix_len = cache.prefix_len;
        {
            let mut dpos = Tensor::<S>::zeros(self.pos_emb.value.shape().to_vec());
            dpos.data_mut()[..seq * d].copy_from_slice(&dx.data()[..seq * d]);
            self.pos_emb.accumulate(&dpos);
        }
        {
            let mut dtok = Tensor::<S>::zeros(self.tok_emb.value.shape().to_vec());
            for (i, &tok) in cache.text_tokens.iter().enumerate() {
                let src = &dx.data()[(prefix_len + i) * d..(prefix_len + i + 1) * d];
                let dst = &mut dtok.data_mut()[tok as usize * d..(tok as usize + 1) * d];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            self.tok_emb.accumulate(&dtok);
        }
        Tensor::new(vec![prefix_len, d], dx.data()[..prefix_len * d].to_vec())
    }
}

fn block_forward<S: Scalar>(
    b: &Block<S>,
    x: &Tensor<S>,
    heads: usize,
) -> Result<(Tensor<S>, BlockCache<S>)> {
    let seq = x.shape()[0];
    let d = x.shape()[1];
    let hd = d / heads;
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());

    let (a, ln1_cache) = layer_norm(x, &b.ln1.0.value, &b.ln1.1.value, LN_EPS)?;
    let q = linear(&a, &b.wq.value, Some(&b.bq.value))?;
    let k = linear(&a, &b.wk.value, Some(&b.bk.value))?;
    let v = linear(&a, &b.wv.value, Some(&b.bv.value))?;

    let mut ctx = Tensor::<S>::zeros(vec![seq, d]);
    let mut probs_all = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * hd;
        let mut probs = Tensor::<S>::zeros(vec![seq, seq]);
        for i in 0..seq {
            // causal row: keys 0..=i, max-subtracted softmax
            let mut max = S::neg_infinity();
            for j in 0..=i {
                let mut dot = S::zero();
                for c in 0..hd {
                    dot += q.data()[i * d + off + c] * k.data()[j * d + off + c];
                }
                let s = dot * scale;
                probs.data_mut()[i * seq + j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = S::zero();
            for j in 0..=i {
                let e = (probs.data()[i * seq + j] - max).exp();
                probs.data_mut()[i * seq + j] = e;
                sum += e;
            }
            for j in 0..=i {
                probs.data_mut()[i * seq + j] = probs.data()[i * seq + j] / sum;
            }
        }
        for i in 0..seq {
            for j in 0..=i {
                let p = probs.data()[i * seq + j];
                for c in 0..hd {
                    ctx.data_mut()[i * d + off + c] += p * v.data()[j * d + off + c];
                }
            }
        }
        probs_all.push(probs);
    }
    let attn = linear(&ctx, &b.wo.value, Some(&b.bo.value))?;
    let x_mid = x.add(&attn)?;

    let (m, ln2_cache) = layer_norm(&x_mid, &b.ln2.0.value, &b.ln2.1.value, LN_EPS)?;
    let pre1 = linear(&m, &b.w1.value, Some(&b.b1.value))?;
    let hidden = gelu(&pre1);
    let mlp_out = linear(&hidden, &b.w2.value, Some(&b.b2.value))?;
    let y = x_mid.add(&mlp_out)?;

    Ok((
        y,
        BlockCache {
            x_in: x.clone(),
            a,
            ln1_cache,
            q,
            k,
            v,
            probs: probs_all,
            ctx,
            x_mid,
            m,
            ln2_cache,
            pre1,
            hidden,
        },
    ))
}

fn block_backward<S: Scalar>(
    b: &mut Block<S>,
    cache: &BlockCache<S>,
    dy: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let seq = dy.shape()[0];
    let d = dy.shape()[1];
    let hd = d / heads;
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());

    // y = x_mid + mlp(ln2(x_mid))
    let (d_hidden, dw2, db2) = linear_backward(dy, &cache.hidden, &b.w2.value, true)?;
    b.w2.accumulate(&dw2);
    b.b2.accumulate(&db2.unwrap());
    let d_pre1 = gelu_backward(&d_hidden, &cache.pre1)?;
    let (d_m, dw1, db1) = linear_backward(&d_pre1, &cache.m, &b.w1.value, true)?;
    b.w1.accumulate(&dw1);
    b.b1.accumulate(&db1.unwrap());
    let (d_x_mid_ln, dg2, dbeta2) =
        layer_norm_backward(&d_m, &cache.x_mid, &b.ln2.0.value, &cache.ln2_cache)?;
    b.ln2.0.accumulate(&dg2);
    b.ln2.1.accumulate(&dbeta2);
    let d_x_mid = dy.add(&d_x_mid_ln)?;

    // x_mid = x_in + wo(ctx)
    let (d_ctx, dwo, dbo) = linear_backward(&d_x_mid, &cache.ctx, &b.wo.value, true)?;
    b.wo.accumulate(&dwo);
    b.bo.accumulate(&dbo.unwrap());

    let mut dq = Tensor::<S>::zeros(vec![seq, d]);
    let mut dk = Tensor::<S>::zeros(vec![seq, d]);
    let mut dv = Tensor::<S>::zeros(vec![seq, d]);
    for h in 0..heads {
        let off = h * hd;
        let probs = &cache.probs[h];
        // d_probs over the causal triangle, then softmax rows, then scores
        let mut d_scores = Tensor::<S>::zeros(vec![seq, seq]);
        for i in 0..seq {
            let mut dot = S::zero();
            let mut d_probs_row = vec![S::zero(); i + 1];
            for j in 0..=i {
                let mut g = S::zero();
                for c in 0..hd {
                    g += d_ctx.data()[i * d + off + c] * cache.v.data()[j * d + off + c];
                }
                d_probs_row[j] = g;
                dot += g * probs.data()[i * seq + j];
            }
            for j in 0..=i {
                let p = probs.data()[i * seq + j];
                d_scores.data_mut()[i * seq + j] = p * (d_probs_row[j] - dot) * scale;
            }
        }
        for i in 0..seq {
            for j in 0..=i {
                let ds = d_scores.data()[i * seq + j];
                let p = cache.probs[h].data()[i * seq + j];
                for c in 0..hd {
                    dq.data_mut()[i * d + off + c] += ds * cache.k.data()[j * d + off + c];
                    dk.data_mut()[j * d + off + c] += ds * cache.q.data()[i * d + off + c];
                    dv.data_mut()[j * d + off + c] += p * d_ctx.data()[i * d + off + c];
                }
            }
        }
    }

    let (d_a_q, dwq, dbq) = linear_backward(&dq, &cache.a, &b.wq.value, true)?;
    b.wq.accumulate(&dwq);
    b.bq.accumulate(&dbq.unwrap());
    let (d_a_k, dwk, dbk) = linear_backward(&dk, &cache.a, &b.wk.value, true)?;
    b.wk.accumulate(&dwk);
    b.bk.accumulate(&dbk.unwrap());
    let (d_a_v, dwv, dbv) = linear_backward(&dv, &cache.a, &b.wv.value, true)?;
    b.wv.accumulate(&dwv);
    b.bv.accumulate(&dbv.unwrap());
    let d_a = d_a_q.add(&d_a_k)?.add(&d_a_v)?;

    let (d_x_ln, dg1, dbeta1) =
        layer_norm_backward(&d_a, &cache.x_in, &b.ln1.0.value, &cache.ln1_cache)?;
    b.ln1.0.accumulate(&dg1);
    b.ln1.1.accumulate(&dbeta1);
    d_x_mid.add(&d_x_ln)
}

impl<S: Scalar> Parameters<S> for ToyLlm<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Param<S>)) {
        let g = ParamGroup::Llm;
        f(g, "llm.tok_emb", &mut self.tok_emb);
        f(g, "llm.pos_emb", &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(g, &format!("llm.block{i}.ln1.gamma"), &mut b.ln1.0);
            f(g, &format!("llm.block{i}.ln1.beta"), &mut b.ln1.1);
            f(g, &format!("llm.block{i}.wq"), &mut b.wq);
            f(g, &format!("llm.block{i}.bq"), &mut b.bq);
            f(g, &format!("llm.block{i}.wk"), &mut b.wk);
            f(g, &format!("llm.block{i}.bk"), &mut b.bk);
            f(g, &format!("llm.block{i}.wv"), &mut b.wv);
            f(g, &format!("llm.block{i}.bv"), &mut b.bv);
            f(g, &format!("llm.block{i}.wo"), &mut b.wo);
            f(g, &format!("llm.block{i}.bo"), &mut b.bo);
            f(g, &format!("llm.block{i}.ln2.gamma"), &mut b.ln2.0);
            f(g, &format!("llm.block{i}.ln2.beta"), &mut b.ln2.1);
            f(g, &format!("llm.block{i}.w1"), &mut b.w1);
            f(g, &format!("llm.block{i}.b1"), &mut b.b1);
            f(g, &format!("llm.block{i}.w2"), &mut b.w2);
            f(g, &format!("llm.block{i}.b2"), &mut b.b2);
        }
        f(g, "llm.ln_f.gamma", &mut self.ln_f.0);
        f(g, "llm.ln_f.beta", &mut self.ln_f.1);
        f(g, "llm.head", &mut self.head);
    }
}
