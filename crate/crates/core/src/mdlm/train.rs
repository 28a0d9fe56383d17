//! Training loop for both model modes.
//!
//! Per-example gradients are computed independently (in parallel when the
//! `parallel` feature is on) and summed in batch order, so results do not
//! depend on the worker count.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::checkpoint::{ModelCheckpoint, TrainMeta};
use super::config::{ModelMode, TrainHyper, Vocab};
use super::linalg::log_sum_exp;
use super::model::{Rotary, Transformer};
use super::params::decays;
use crate::error::{Error, Result};
use crate::par;
use crate::seeding::rng_for;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

/// Start of the answer span: the position after `[QUERY, key]`.
pub fn answer_start(seq: &[u32]) -> Option<usize> {
    let q = seq.iter().rposition(|&t| t == Vocab::QUERY)?;
    (q + 2 < seq.len()).then_some(q + 2)
}

/// Cross-entropy of `target` against `row` restricted to the first
/// `classes` logits. Writes the softmax gradient scaled by `weight` into
/// `grad` (same width as `row`).
fn ce_with_grad(row: &[f32], classes: usize, target: u32, weight: f32, grad: &mut [f32]) -> f64 {
    let lse = log_sum_exp(&row[..classes]);
    for (g, &z) in grad[..classes].iter_mut().zip(&row[..classes]) {
        *g = weight * (z - lse).exp();
    }
    grad[target as usize] -= weight;
    (lse - row[target as usize]) as f64
}

/// Loss and gradient of one training example.
pub(crate) fn example_grad(
    model: &Transformer<'_>,
    rotary: &Rotary,
    seq: &[u32],
    answer_only: bool,
    rng: &mut ChaCha8Rng,
    grads: &mut [f32],
    scale: f32,
) -> Result<f64> {
    let cfg = model.cfg;
    let v = cfg.vocab_size;
    let classes = cfg.vocab().predictable();
    let region_start = if answer_only {
        answer_start(seq).unwrap_or(0)
    } else {
        0
    };
    match cfg.mode {
        ModelMode::BidirectionalMdlm => {
            let region = seq.len() - region_start;
            let m = rng.random_range(1..=region);
            let mut input = seq.to_vec();
            let picked: Vec<usize> = sample_indices(rng, region, m)
                .into_iter()
                .map(|i| i + region_start)
                .collect();
            for &i in &picked {
                input[i] = cfg.mask_id();
            }
            let (logits, tape) = model.forward_train(&input, rotary)?;
            let mut dlogits = vec![0.0f32; logits.len()];
            let w = scale / m as f32;
            let mut loss = 0.0;
            for &i in &picked {
                loss += ce_with_grad(
                    &logits[i * v..(i + 1) * v],
                    classes,
                    seq[i],
                    w,
                    &mut dlogits[i * v..(i + 1) * v],
                );
            }
            model.backward(&tape, &dlogits, rotary, grads);
            Ok(loss / m as f64)
        }
        ModelMode::Causal => {
            if seq.len() < 2 {
                return Err(Error::Data("causal training needs sequences of length >= 2".into()));
            }
            // position i predicts seq[i + 1]
            let first = region_start.max(1) - 1;
            let n = seq.len() - 1 - first;
            let (logits, tape) = model.forward_train(seq, rotary)?;
            let mut dlogits = vec![0.0f32; logits.len()];
            let w = scale / n as f32;
            let mut loss = 0.0;
            for i in first..seq.len() - 1 {
                loss += ce_with_grad(
                    &logits[i * v..(i + 1) * v],
                    classes,
                    seq[i + 1],
                    w,
                    &mut dlogits[i * v..(i + 1) * v],
                );
            }
            model.backward(&tape, &dlogits, rotary, grads);
            Ok(loss / n as f64)
        }
    }
}

fn learning_rate(h: &TrainHyper, step: usize) -> f32 {
    if step < h.warmup {
        return h.lr * (step + 1) as f32 / h.warmup as f32;
    }
    let span = (h.steps - h.warmup).max(1) as f32;
    let progress = ((step - h.warmup) as f32 / span).min(1.0);
    let floor = 0.1;
    h.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()))
}

fn check_corpus(ckpt: &ModelCheckpoint, corpus: &[Vec<u32>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let (vocab, max_len) = (ckpt.config.vocab_size, ckpt.config.train_len);
    for (i, seq) in corpus.iter().enumerate() {
        if seq.is_empty() || seq.len() > max_len {
            return Err(Error::Data(format!(
                "sequence {i} has length {}, expected 1..={max_len}",
                seq.len()
            )));
        }
        if let Some(t) = seq.iter().find(|&&t| t as usize >= vocab - 1) {
            return Err(Error::Data(format!("sequence {i} contains token {t} (MASK or out of range)")));
        }
    }
    Ok(())
}

/// Trains `ckpt` on `corpus`. See [`train_with`].
pub fn train(ckpt: &ModelCheckpoint, corpus: &[Vec<u32>], hyper: &TrainHyper) -> Result<TrainOutcome> {
    train_with(ckpt, corpus, hyper, |_, _| {})
}

/// AdamW with linear warmup and cosine decay to 10% of `lr`, global-norm
/// clipping and decoupled weight decay on matrices. `on_step` sees every
/// `(step, loss)`.
pub fn train_with(
    ckpt: &ModelCheckpoint,
    corpus: &[Vec<u32>],
    hyper: &TrainHyper,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    check_corpus(ckpt, corpus)?;
    // written negated so that a NaN lr is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let bad_lr = !(hyper.lr > 0.0);
    if hyper.batch == 0 || bad_lr {
        return Err(Error::Config("batch must be >= 1 and lr > 0".into()));
    }
    if !(0.0..=1.0).contains(&hyper.answer_only_frac) {
        return Err(Error::Config("answer_only_frac must lie in [0, 1]".into()));
    }
    let plain: Vec<usize> = (0..corpus.len())
        .filter(|&i| answer_start(&corpus[i]).is_none())
        .collect();
    if hyper.plain_warmup_steps > 0 && plain.is_empty() {
        return Err(Error::Config("plain_warmup_steps set but the corpus has no plain sequences".into()));
    }
    let cfg = ckpt.config.clone();
    let layout = ckpt.layout().clone();
    let mut params = ckpt.params.clone();
    let rotary = Rotary::new(&cfg.rope, cfg.train_len)?;
    let decay_mask: Vec<bool> = {
        let mut m = vec![false; layout.total];
        for t in &layout.tensors {
            if decays(&t.name) {
                m[t.range()].fill(true);
            }
        }
        m
    };
    let (b1, b2, eps) = (0.9f32, 0.95f32, 1e-8f32);
    let mut m1 = vec![0.0f32; layout.total];
    let mut m2 = vec![0.0f32; layout.total];
    let mut sampler = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut losses = Vec::with_capacity(hyper.steps);
    let scale = 1.0 / hyper.batch as f32;

    for step in 0..hyper.steps {
        let warm = step < hyper.plain_warmup_steps;
        let picks: Vec<(usize, bool)> = (0..hyper.batch)
            .map(|_| {
                let idx = if warm {
                    plain[sampler.random_range(0..plain.len())]
                } else {
                    sampler.random_range(0..corpus.len())
                };
                (idx, sampler.random::<f32>() < hyper.answer_only_frac)
            })
            .collect();
        let model = Transformer::new(&cfg, &layout, &params);
        let results = par::map_indexed(hyper.batch, |b| {
            let (idx, answer_only) = picks[b];
            let mut rng = rng_for(hyper.seed, &[step as u64, b as u64]);
            let mut g = vec![0.0f32; layout.total];
            let loss = example_grad(&model, &rotary, &corpus[idx], answer_only, &mut rng, &mut g, scale);
            loss.map(|l| (l, g))
        });
        let mut grad = vec![0.0f32; layout.total];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        loss /= hyper.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Parameter(format!("non-finite loss at step {step}")));
        }

        let norm = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt() as f32;
        let clip = if hyper.grad_clip > 0.0 && norm > hyper.grad_clip {
            hyper.grad_clip / norm
        } else {
            1.0
        };
        let lr = learning_rate(hyper, step);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..params.len() {
            let g = grad[i] * clip;
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let update = (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            if decay_mask[i] {
                params[i] -= lr * hyper.weight_decay * params[i];
            }
            params[i] -= lr * update;
        }
        losses.push(loss);
        on_step(step, loss);
    }
    let train_meta = TrainMeta {
        steps: ckpt.train_meta.steps + hyper.steps,
        final_loss: losses.last().copied().unwrap_or(ckpt.train_meta.final_loss),
        seed: hyper.seed,
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::from_parts(cfg, params, train_meta)?,
        losses,
    })
}
