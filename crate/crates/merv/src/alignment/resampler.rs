//! Shallow attention resampler: one cross-attention block in which `h*w`
//! learned latent queries attend over a frame's tokens at the encoder width,
//! followed by an MLP. Applied per frame.

use crate::error::Result;
use crate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, matmul,
    matmul_backward, softmax, softmax_backward, transpose2, LayerNormCache, Scalar, Tensor,
};
use crate::param::{Param, ParamGroup, Parameters};
use crate::rng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Resampler<S = f32> {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub latents: Param<S>,
    pub ln_q: (Param<S>, Param<S>),
    pub ln_kv: (Param<S>, Param<S>),
    pub ln_mlp: (Param<S>, Param<S>),
    pub wq: Param<S>,
    pub bq: Param<S>,
    pub wk: Param<S>,
    pub bk: Param<S>,
    pub wv: Param<S>,
    pub bv: Param<S>,
    pub wo: Param<S>,
    pub bo: Param<S>,
    pub w1: Param<S>,
    pub b1: Param<S>,
    pub w2: Param<S>,
    pub b2: Param<S>,
}

/// Parameter count for one resampler at `width` with `n_latents` queries.
pub fn resampler_param_count(width: u64, n_latents: u64, mlp_ratio: u64) -> u64 {
    let hidden = width * mlp_ratio;
    n_latents * width                  // latent queries
        + 4 * (width * width + width)  // q/k/v/o projections with bias
        + (width * hidden + hidden)    // MLP up
        + (hidden * width + width)     // MLP down
        + 3 * 2 * width                // three layer norms
}

/// Forward FLOPs for one frame with `n_in` input tokens.
pub fn resampler_flops(width: f64, n_latents: f64, n_in: f64, mlp_ratio: f64) -> f64 {
    let proj = 2.0 * (n_latents + 2.0 * n_in) * width * width // q, k, v
        + 2.0 * n_latents * width * width; // output projection
    let attn = 2.0 * n_latents * n_in * width // scores
        + 2.0 * n_latents * n_in * width; // context
    let mlp = 2.0 * n_latents * width * (mlp_ratio * width) * 2.0;
    proj + attn + mlp
}

fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rng::randn_tensor(shape, std, rng)
}

impl<S: Scalar> Resampler<S> {
    pub fn new(width: usize, n_latents: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width % heads != 0 {
            return Err(crate::error::MervError::config(format!(
                "resampler width {width} not divisible by {heads} heads"
            )));
        }
        let hidden = width * mlp_ratio;
        let std = 1.0 / (width as f64).sqrt();
        let p = |t: Tensor<f64>| Param::new(t.cast::<S>());
        let ones = |n: usize| Param::new(Tensor::<S>::full(vec![n], S::one()));
        let zeros = |n: usize| Param::new(Tensor::<S>::zeros(vec![n]));
        Ok(Resampler {
            width,
            heads,
            mlp_ratio,
            latents: p(randn(vec![n_latents, width], 1.0, rng)),
            ln_q: (ones(width), zeros(width)),
            ln_kv: (ones(width), zeros(width)),
            ln_mlp: (ones(width), zeros(width)),
            wq: p(randn(vec![width, width], std, rng)),
            bq: zeros(width),
            wk: p(randn(vec![width, width], std, rng)),
            bk: zeros(width),
            wv: p(randn(vec![width, width], std, rng)),
            bv: zeros(width),
            wo: p(randn(vec![width, width], std, rng)),
            bo: zeros(width),
            w1: p(randn(vec![width, hidden], std, rng)),
            b1: zeros(hidden),
            w2: p(randn(vec![hidden, width], 1.0 / (hidden as f64).sqrt(), rng)),
            b2: zeros(width),
        })
    }

    pub fn n_latents(&self) -> usize {
        self.latents.value.shape()[0]
    }

    /// Resamples one frame's `(n_in, width)` tokens to `(n_latents, width)`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ResamplerCache<S>)> {
        let n_lat = self.n_latents();
        let d = self.width;
        let hd = d / self.heads;
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());

        let (lq, ln_q_cache) = layer_norm(&self.latents.value, &self.ln_q.0.value, &self.ln_q.1.value, LN_EPS)?;
        let (kvn, ln_kv_cache) = layer_norm(x, &self.ln_kv.0.value, &self.ln_kv.1.value, LN_EPS)?;
        let q = linear(&lq, &self.wq.value, Some(&self.bq.value))?;
        let k = linear(&kvn, &self.wk.value, Some(&self.bk.value))?;
        let v = linear(&kvn, &self.wv.value, Some(&self.bv.value))?;

        let mut ctx = Tensor::<S>::zeros(vec![n_lat, d]);
        let mut probs_per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = slice_cols(&q, h * hd, (h + 1) * hd)?;
            let kh = slice_cols(&k, h * hd, (h + 1) * hd)?;
            let vh = slice_cols(&v, h * hd, (h + 1) * hd)?;
            let scores = matmul(&qh, &transpose2(&kh)?)?.scale(scale);
            let probs = softmax(&scores, 1)?;
            let ctx_h = matmul(&probs, &vh)?;
            write_cols(&mut ctx, &ctx_h, h * hd);
            probs_per_head.push(probs);
        }
        let attn_out = linear(&ctx, &self.wo.value, Some(&self.bo.value))?;
        let res1 = self.latents.value.add(&attn_out)?;

        let (mln, ln_mlp_cache) = layer_norm(&res1, &self.ln_mlp.0.value, &self.ln_mlp.1.value, LN_EPS)?;
        let pre1 = linear(&mln, &self.w1.value, Some(&self.b1.value))?;
        let hidden = gelu(&pre1);
        let mlp_out = linear(&hidden, &self.w2.value, Some(&self.b2.value))?;
        let out = res1.add(&mlp_out)?;

        Ok((
            out,
            ResamplerCache {
                x: x.clone(),
                lq,
                kvn,
                ln_q_cache,
                ln_kv_cache,
                q,
                k,
                v,
                probs_per_head,
                ctx,
                res1,
                mln,
                ln_mlp_cache,
                pre1,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad: &Tensor<S>, cache: &ResamplerCache<S>) -> Result<Tensor<S>> {
        let d = self.width;
        let hd = d / self.heads;
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());

        // out = res1 + mlp_out
        let d_res1_direct = grad.clone();
        let (d_hidden, dw2, db2) = linear_backward(grad, &cache.hidden, &self.w2.value, true)?;
        self.w2.accumulate(&dw2);
        self.b2.accumulate(&db2.unwrap());
        let d_pre1 = gelu_backward(&d_hidden, &cache.pre1)?;
        let (d_mln, dw1, db1) = linear_backward(&d_pre1, &cache.mln, &self.w1.value, true)?;
        self.w1.accumulate(&dw1);
        self.b1.accumulate(&db1.unwrap());
        let (d_res1_ln, dg_mlp, db_mlp) =
            layer_norm_backward(&d_mln, &cache.res1, &self.ln_mlp.0.value, &cache.ln_mlp_cache)?;
        self.ln_mlp.0.accumulate(&dg_mlp);
        self.ln_mlp.1.accumulate(&db_mlp);
        let d_res1 = d_res1_direct.add(&d_res1_ln)?;

        // res1 = latents + attn_out
        self.latents.accumulate(&d_res1);
        let (d_ctx, dwo, dbo) = linear_backward(&d_res1, &cache.ctx, &self.wo.value, true)?;
        self.wo.accumulate(&dwo);
        self.bo.accumulate(&dbo.unwrap());

        let n_lat = self.n_latents();
        let n_in = cache.x.shape()[0];
        let mut dq = Tensor::<S>::zeros(vec![n_lat, d]);
        let mut dk = Tensor::<S>::zeros(vec![n_in, d]);
        let mut dv = Tensor::<S>::zeros(vec![n_in, d]);
        for h in 0..self.heads {
            let d_ctx_h = slice_cols(&d_ctx, h * hd, (h + 1) * hd)?;
            let probs = &cache.probs_per_head[h];
            let vh = slice_cols(&cache.v, h * hd, (h + 1) * hd)?;
            let (d_probs, d_vh) = matmul_backward(&d_ctx_h, probs, &vh)?;
            let d_scores = softmax_backward(&d_probs, probs, 1)?.scale(scale);
            let qh = slice_cols(&cache.q, h * hd, (h + 1) * hd)?;
            let kh = slice_cols(&cache.k, h * hd, (h + 1) * hd)?;
            let (d_qh, d_kh_t) = matmul_backward(&d_scores, &qh, &transpose2(&kh)?)?;
            let d_kh = transpose2(&d_kh_t)?;
            write_cols(&mut dq, &d_qh, h * hd);
            write_cols(&mut dk, &d_kh, h * hd);
            write_cols(&mut dv, &d_vh, h * hd);
        }

        let (d_lq, dwq, dbq) = linear_backward(&dq, &cache.lq, &self.wq.value, true)?;
        self.wq.accumulate(&dwq);
        self.bq.accumulate(&dbq.unwrap());
        let (d_kvn_k, dwk, dbk) = linear_backward(&dk, &cache.kvn, &self.wk.value, true)?;
        self.wk.accumulate(&dwk);
        self.bk.accumulate(&dbk.unwrap());
        let (d_kvn_v, dwv, dbv) = linear_backward(&dv, &cache.kvn, &self.wv.value, true)?;
        self.wv.accumulate(&dwv);
        self.bv.accumulate(&dbv.unwrap());

        let (d_latents_ln, dg_q, db_q) =
            layer_norm_backward(&d_lq, &self.latents.value, &self.ln_q.0.value, &cache.ln_q_cache)?;
        self.ln_q.0.accumulate(&dg_q);
        self.ln_q.1.accumulate(&db_q);
        self.latents.accumulate(&d_latents_ln);

        let d_kvn = d_kvn_k.add(&d_kvn_v)?;
        let (dx, dg_kv, db_kv) =
            layer_norm_backward(&d_kvn, &cache.x, &self.ln_kv.0.value, &cache.ln_kv_cache)?;
        self.ln_kv.0.accumulate(&dg_kv);
        self.ln_kv.1.accumulate(&db_kv);
        Ok(dx)
    }
}

impl<S: Scalar> Parameters<S> for Resampler<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Param<S>)) {
        let g = ParamGroup::Projector;
        f(g, "latents", &mut self.latents);
        f(g, "ln_q.gamma", &mut self.ln_q.0);
        f(g, "ln_q.beta", &mut self.ln_q.1);
        f(g, "ln_kv.gamma", &mut self.ln_kv.0);
        f(g, "ln_kv.beta", &mut self.ln_kv.1);
        f(g, "ln_mlp.gamma", &mut self.ln_mlp.0);
        f(g, "ln_mlp.beta", &mut self.ln_mlp.1);
        f(g, "wq", &mut self.wq);
        f(g, "bq", &mut self.bq);
        f(g, "wk", &mut self.wk);
        f(g, "bk", &mut self.bk);
        f(g, "wv", &mut self.wv);
        f(g, "bv", &mut self.bv);
        f(g, "wo", &mut self.wo);
        f(g, "bo", &mut self.bo);
        f(g, "w1", &mut self.w1);
        f(g, "b1", &mut self.b1);
        f(g, "w2", &mut self.w2);
        f(g, "b2", &mut self.b2);
    }
}

#[derive(Clone, Debug)]
pub struct ResamplerCache<S> {
    x: Tensor<S>,
    lq: Tensor<S>,
    kvn: Tensor<S>,
    ln_q_cache: LayerNormCache<S>,
    ln_kv_cache: LayerNormCache<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    probs_per_head: Vec<Tensor<S>>,
    ctx: Tensor<S>,
    res1: Tensor<S>,
    mln: Tensor<S>,
    ln_mlp_cache: LayerNormCache<S>,
    pre1: Tensor<S>,
    hidden: Tensor<S>,
}

/// Column slice `[c0, c1)` of a rank-2 tensor.
pub fn slice_cols<S: Scalar>(t: &Tensor<S>, c0: usize, c1: usize) -> Result<Tensor<S>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    debug_assert!(c0 < c1 && c1 <= cols);
    let mut out = Vec::with_capacity(rows * (c1 - c0));
    let d = t.data();
    for r in 0..rows {
        out.extend_from_slice(&d[r * cols + c0..r * cols + c1]);
    }
    Tensor::new(vec![rows, c1 - c0], out)
}

/// Writes `src` into columns starting at `c0` of `dst`.
pub fn write_cols<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, c0: usize) {
    let (rows, cols) = (dst.shape()[0], dst.shape()[1]);
    let w = src.shape()[1];
    debug_assert_eq!(rows, src.shape()[0]);
    let s = src.data().to_vec();
    let d = dst.data_mut();
    for r in 0..rows {
        d[r * cols + c0..r * cols + c0 + w].copy_from_slice(&s[r * w..(r + 1) * w]);
    }
}
