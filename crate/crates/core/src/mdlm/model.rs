//! Pre-norm RoPE transformer with a hand-written backward pass.
//!
//! One sequence at a time; batching happens one level up so that every
//! sequence can have its own length. Activations are row-major `[T x D]`.

use std::ops::Range;

use super::config::{ModelConfig, ModelMode};
use super::linalg::{
    gelu, gelu_grad, gemm, matmul, matmul_nt, matmul_tn_acc, rmsnorm, rmsnorm_backward,
    softmax_in_place,
};
use super::params::Layout;
use crate::error::{Error, Result};
use crate::rope::{build_freq_table, RopeConfig};

/// `f32` cos/sin tables for positions `0..len`, built from the `f64`
/// frequency table.
#[derive(Debug, Clone)]
pub struct Rotary {
    cos: Vec<f32>,
    sin: Vec<f32>,
    planes: usize,
    len: usize,
}

impl Rotary {
    pub fn new(rope: &RopeConfig, len: usize) -> Result<Self> {
        let table = build_freq_table(rope)?;
        let planes = table.angles.len();
        let mut cos = Vec::with_capacity(len * planes);
        let mut sin = Vec::with_capacity(len * planes);
        for pos in 0..len {
            for &theta in &table.angles {
                let (s, c) = (theta * pos as f64).sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
        }
        Ok(Rotary {
            cos,
            sin,
            planes,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Rotates every head of `x` (`[T x n_heads*head_dim]`). `inverse`
    /// applies the transpose rotation, which is what the backward pass needs.
    fn apply(&self, x: &mut [f32], width: usize, inverse: bool) {
        let head_dim = 2 * self.planes;
        for (pos, row) in x.chunks_exact_mut(width).enumerate() {
            let cos = &self.cos[pos * self.planes..(pos + 1) * self.planes];
            let sin = &self.sin[pos * self.planes..(pos + 1) * self.planes];
            for head in row.chunks_exact_mut(head_dim) {
                for n in 0..self.planes {
                    let (c, s) = (cos[n], if inverse { -sin[n] } else { sin[n] });
                    let (a, b) = (head[2 * n], head[2 * n + 1]);
                    head[2 * n] = a * c - b * s;
                    head[2 * n + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Default)]
struct LayerCache {
    x_in: Vec<f32>,
    inv1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    pre: Vec<f32>,
    act: Vec<f32>,
}

/// Everything `backward` needs from one training forward pass.
#[derive(Debug)]
pub struct Tape {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    inv_final: Vec<f32>,
    h_final: Vec<f32>,
}

/// Q/K rows of one head captured during inference, before and after the
/// rotation.
#[derive(Debug, Clone, Default)]
pub struct QkCapture {
    pub pre_q: Vec<f32>,
    pub pre_k: Vec<f32>,
    pub post_q: Vec<f32>,
    pub post_k: Vec<f32>,
}

/// Borrowed view of a parameter buffer as a runnable model.
pub struct Transformer<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub params: &'a [f32],
}

impl<'a> Transformer<'a> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a Layout, params: &'a [f32]) -> Self {
        debug_assert_eq!(params.len(), layout.total);
        Transformer {
            cfg,
            layout,
            params,
        }
    }

    fn p(&self, r: &Range<usize>) -> &'a [f32] {
        &self.params[r.clone()]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {t} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f32> {
        let d = self.cfg.d_model;
        let emb = self.p(&self.layout.tok_emb);
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            x.extend_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }
        x
    }

    fn causal(&self) -> bool {
        self.cfg.mode == ModelMode::Causal
    }

    /// Scaled, masked softmax of `q_h k_h^T` for one head into `probs`.
    fn head_probs(&self, q: &[f32], k: &[f32], head: usize, t: usize, probs: &mut [f32]) {
        let (d, hd) = (self.cfg.d_model, self.cfg.head_dim);
        let off = head * hd;
        gemm(t, hd, t, &q[off..], d, 1, &k[off..], 1, d, probs, t, false);
        let scale = 1.0 / (hd as f32).sqrt();
        let causal = self.causal();
        for (i, row) in probs.chunks_exact_mut(t).enumerate() {
            row.iter_mut().for_each(|s| *s *= scale);
            if causal {
                row[i + 1..].fill(f32::NEG_INFINITY);
            }
            softmax_in_place(row);
        }
    }

    /// Full forward pass keeping activations for `backward`. Returns logits
    /// `[T x vocab]`.
    pub fn forward_train(&self, tokens: &[u32], rotary: &Rotary) -> Result<(Vec<f32>, Tape)> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        if rotary.len() < t {
            return Err(Error::Parameter("rotary table shorter than input".into()));
        }
        let (d, f, h) = (self.cfg.d_model, self.cfg.ffn_dim, self.cfg.n_heads);
        let hd = self.cfg.head_dim;
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for slots in &self.layout.layers {
            let mut c = LayerCache {
                inv1: vec![0.0; t],
                h1: vec![0.0; t * d],
                q: vec![0.0; t * d],
                k: vec![0.0; t * d],
                v: vec![0.0; t * d],
                probs: vec![0.0; h * t * t],
                att: vec![0.0; t * d],
                inv2: vec![0.0; t],
                h2: vec![0.0; t * d],
                pre: vec![0.0; t * f],
                ..Default::default()
            };
            rmsnorm(&x, self.p(&slots.attn_norm), &mut c.h1, &mut c.inv1, d);
            matmul(&c.h1, self.p(&slots.wq), &mut c.q, t, d, d);
            matmul(&c.h1, self.p(&slots.wk), &mut c.k, t, d, d);
            matmul(&c.h1, self.p(&slots.wv), &mut c.v, t, d, d);
            rotary.apply(&mut c.q, d, false);
            rotary.apply(&mut c.k, d, false);
            for (head, probs) in c.probs.chunks_exact_mut(t * t).enumerate() {
                self.head_probs(&c.q, &c.k, head, t, probs);
                let off = head * hd;
                gemm(t, t, hd, probs, t, 1, &c.v[off..], d, 1, &mut c.att[off..], d, false);
            }
            let mut proj = vec![0.0; t * d];
            matmul(&c.att, self.p(&slots.wo), &mut proj, t, d, d);
            c.x_in = x;
            c.x_mid = c.x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();

            rmsnorm(&c.x_mid, self.p(&slots.mlp_norm), &mut c.h2, &mut c.inv2, d);
            matmul(&c.h2, self.p(&slots.w1), &mut c.pre, t, d, f);
            c.act = c.pre.iter().map(|&u| gelu(u)).collect();
            let mut out = vec![0.0; t * d];
            matmul(&c.act, self.p(&slots.w2), &mut out, t, f, d);
            x = c.x_mid.iter().zip(&out).map(|(a, b)| a + b).collect();
            layers.push(c);
        }
        let mut inv_final = vec![0.0; t];
        let mut h_final = vec![0.0; t * d];
        rmsnorm(&x, self.p(&self.layout.final_norm), &mut h_final, &mut inv_final, d);
        let v = self.cfg.vocab_size;
        let mut logits = vec![0.0; t * v];
        matmul(&h_final, self.p(&self.layout.lm_head), &mut logits, t, d, v);
        Ok((
            logits,
            Tape {
                tokens: tokens.to_vec(),
                layers,
                x_final: x,
                inv_final,
                h_final,
            },
        ))
    }

    /// Accumulates parameter gradients for `d loss / d logits` into `grads`.
    pub fn backward(&self, tape: &Tape, dlogits: &[f32], rotary: &Rotary, grads: &mut [f32]) {
        let t = tape.tokens.len();
        let (d, f, v) = (self.cfg.d_model, self.cfg.ffn_dim, self.cfg.vocab_size);
        let hd = self.cfg.head_dim;
        let lay = self.layout;

        matmul_tn_acc(&tape.h_final, dlogits, &mut grads[lay.lm_head.clone()], d, t, v);
        let mut dh = vec![0.0; t * d];
        matmul_nt(dlogits, self.p(&lay.lm_head), &mut dh, t, v, d, false);
        let mut dx = vec![0.0; t * d];
        rmsnorm_backward(
            &tape.x_final,
            self.p(&lay.final_norm),
            &tape.inv_final,
            &dh,
            &mut dx,
            &mut grads[lay.final_norm.clone()],
            d,
        );

        let mut dtmp = vec![0.0; t * d];
        let mut dact = vec![0.0; t * f];
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut datt = vec![0.0; t * d];
        let mut dp = vec![0.0; t * t];
        for (slots, c) in lay.layers.iter().zip(&tape.layers).rev() {
            // MLP: x = x_mid + gelu(h2 W1) W2
            matmul_tn_acc(&c.act, &dx, &mut grads[slots.w2.clone()], f, t, d);
            matmul_nt(&dx, self.p(&slots.w2), &mut dact, t, d, f, false);
            for (g, &u) in dact.iter_mut().zip(&c.pre) {
                *g *= gelu_grad(u);
            }
            matmul_tn_acc(&c.h2, &dact, &mut grads[slots.w1.clone()], d, t, f);
            matmul_nt(&dact, self.p(&slots.w1), &mut dtmp, t, f, d, false);
            // dx now holds d/dx_mid (residual) plus the norm branch.
            rmsnorm_backward(
                &c.x_mid,
                self.p(&slots.mlp_norm),
                &c.inv2,
                &dtmp,
                &mut dx,
                &mut grads[slots.mlp_norm.clone()],
                d,
            );

            // attention output projection
            matmul_tn_acc(&c.att, &dx, &mut grads[slots.wo.clone()], d, t, d);
            matmul_nt(&dx, self.p(&slots.wo), &mut datt, t, d, d, false);

            let scale = 1.0 / (hd as f32).sqrt();
            for (head, probs) in c.probs.chunks_exact(t * t).enumerate() {
                let off = head * hd;
                gemm(t, hd, t, &datt[off..], d, 1, &c.v[off..], 1, d, &mut dp, t, false);
                gemm(t, t, hd, probs, 1, t, &datt[off..], d, 1, &mut dv[off..], d, false);
                for (prow, grow) in probs.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                    let dot: f32 = prow.iter().zip(grow.iter()).map(|(p, g)| p * g).sum();
                    for (g, &p) in grow.iter_mut().zip(prow) {
                        *g = p * (*g - dot) * scale;
                    }
                }
                gemm(t, t, hd, &dp, t, 1, &c.k[off..], d, 1, &mut dq[off..], d, false);
                gemm(t, t, hd, &dp, 1, t, &c.q[off..], d, 1, &mut dk[off..], d, false);
            }
            rotary.apply(&mut dq, d, true);
            rotary.apply(&mut dk, d, true);

            matmul_tn_acc(&c.h1, &dq, &mut grads[slots.wq.clone()], d, t, d);
            matmul_tn_acc(&c.h1, &dk, &mut grads[slots.wk.clone()], d, t, d);
            matmul_tn_acc(&c.h1, &dv, &mut grads[slots.wv.clone()], d, t, d);
            matmul_nt(&dq, self.p(&slots.wq), &mut dtmp, t, d, d, false);
            matmul_nt(&dk, self.p(&slots.wk), &mut dtmp, t, d, d, true);
            matmul_nt(&dv, self.p(&slots.wv), &mut dtmp, t, d, d, true);
            rmsnorm_backward(
                &c.x_in,
                self.p(&slots.attn_norm),
                &c.inv1,
                &dtmp,
                &mut dx,
                &mut grads[slots.attn_norm.clone()],
                d,
            );
        }
        let emb = &mut grads[lay.tok_emb.clone()];
        for (&tok, row) in tape.tokens.iter().zip(dx.chunks_exact(d)) {
            let dst = &mut emb[tok as usize * d..(tok as usize + 1) * d];
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }

    /// Inference forward pass. Logits are produced only for `rows`; when
    /// `capture` names a `(layer, head)` the Q/K rows of that head are
    /// recorded before and after the rotation.
    pub fn forward(
        &self,
        tokens: &[u32],
        rotary: &Rotary,
        rows: Range<usize>,
        capture: Option<(usize, usize)>,
    ) -> Result<(Vec<f32>, Option<QkCapture>)> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        if rotary.len() < t {
            return Err(Error::Parameter("rotary table shorter than input".into()));
        }
        if rows.start > rows.end || rows.end > t {
            return Err(Error::Index {
                index: rows.end,
                len: t,
            });
        }
        let (d, f, hd) = (self.cfg.d_model, self.cfg.ffn_dim, self.cfg.head_dim);
        let mut x = self.embed(tokens);
        let mut h = vec![0.0; t * d];
        let mut inv = vec![0.0; t];
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        let mut att = vec![0.0; t * d];
        let mut proj = vec![0.0; t * d];
        let mut probs = vec![0.0; t * t];
        let mut hidden = vec![0.0; t * f];
        let mut captured = None;
        let take_head = |m: &[f32], head: usize| -> Vec<f32> {
            m.chunks_exact(d)
                .flat_map(|row| row[head * hd..(head + 1) * hd].iter().copied())
                .collect()
        };
        for (l, slots) in self.layout.layers.iter().enumerate() {
            rmsnorm(&x, self.p(&slots.attn_norm), &mut h, &mut inv, d);
            matmul(&h, self.p(&slots.wq), &mut q, t, d, d);
            matmul(&h, self.p(&slots.wk), &mut k, t, d, d);
            matmul(&h, self.p(&slots.wv), &mut v, t, d, d);
            let cap = capture.filter(|&(cl, _)| cl == l);
            let mut pre = None;
            if let Some((_, head)) = cap {
                pre = Some((take_head(&q, head), take_head(&k, head)));
            }
            rotary.apply(&mut q, d, false);
            rotary.apply(&mut k, d, false);
            if let (Some((_, head)), Some((pre_q, pre_k))) = (cap, pre) {
                captured = Some(QkCapture {
                    pre_q,
                    pre_k,
                    post_q: take_head(&q, head),
                    post_k: take_head(&k, head),
                });
            }
            for head in 0..self.cfg.n_heads {
                self.head_probs(&q, &k, head, t, &mut probs);
                let off = head * hd;
                gemm(t, t, hd, &probs, t, 1, &v[off..], d, 1, &mut att[off..], d, false);
            }
            matmul(&att, self.p(&slots.wo), &mut proj, t, d, d);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            rmsnorm(&x, self.p(&slots.mlp_norm), &mut h, &mut inv, d);
            matmul(&h, self.p(&slots.w1), &mut hidden, t, d, f);
            hidden.iter_mut().for_each(|u| *u = gelu(*u));
            matmul(&hidden, self.p(&slots.w2), &mut proj, t, f, d);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        let n = rows.len();
        let xs = &x[rows.start * d..rows.end * d];
        let mut hf = vec![0.0; n * d];
        let mut invf = vec![0.0; n];
        rmsnorm(xs, self.p(&self.layout.final_norm), &mut hf, &mut invf, d);
        let vsz = self.cfg.vocab_size;
        let mut logits = vec![0.0; n * vsz];
        matmul(&hf, self.p(&self.layout.lm_head), &mut logits, n, d, vsz);
        Ok((logits, captured))
    }
}
