//! Per-token negative log-likelihood.
//!
//! Causal models get the exact teacher-forced NLL. Masked-diffusion models
//! get a Monte-Carlo estimate of the masked-reconstruction bound, so the
//! resulting perplexity is a bound-based proxy, not a true likelihood.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::checkpoint::ModelCheckpoint;
use super::config::{ModelMode, DEFAULT_SEED};
use super::linalg::log_sum_exp;
use super::model::Rotary;
use crate::error::{Error, Result};
use crate::par;
use crate::rope::RopeConfig;
use crate::seeding::rng_for;

/// Mean per-token NLL in nats with the checkpoint's rotary table and the
/// default seed.
pub fn eval_nll(ckpt: &ModelCheckpoint, tokens: &[u32], mc_samples: usize) -> Result<f64> {
    eval_nll_with(ckpt, tokens, mc_samples, DEFAULT_SEED, &ckpt.config.rope)
}

pub fn eval_nll_with(
    ckpt: &ModelCheckpoint,
    tokens: &[u32],
    mc_samples: usize,
    seed: u64,
    rope: &RopeConfig,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    if mc_samples == 0 {
        return Err(Error::Parameter("mc_samples must be >= 1".into()));
    }
    let mask = ckpt.config.mask_id();
    if tokens.contains(&mask) {
        return Err(Error::Data("sequence contains the MASK id".into()));
    }
    let model = ckpt.model();
    let v = ckpt.config.vocab_size;
    let classes = ckpt.config.vocab().predictable();
    let rotary = Rotary::new(rope, tokens.len())?;
    let nll = |row: &[f32], target: u32| -> f64 {
        (log_sum_exp(&row[..classes]) - row[target as usize]) as f64
    };
    let n = tokens.len();
    match ckpt.config.mode {
        ModelMode::Causal => {
            if n < 2 {
                return Err(Error::Data("causal NLL needs at least two tokens".into()));
            }
            let (logits, _) = model.forward(tokens, &rotary, 0..n - 1, None)?;
            let total: f64 = (0..n - 1)
                .map(|i| nll(&logits[i * v..(i + 1) * v], tokens[i + 1]))
                .sum();
            Ok(total / (n - 1) as f64)
        }
        ModelMode::BidirectionalMdlm => {
            let draws = par::map_indexed(mc_samples, |s| -> Result<f64> {
                let mut rng = rng_for(seed, &[n as u64, s as u64]);
                let m = rng.random_range(1..=n);
                let picked = sample_indices(&mut rng, n, m).into_vec();
                let mut input = tokens.to_vec();
                for &i in &picked {
                    input[i] = mask;
                }
                let (logits, _) = model.forward(&input, &rotary, 0..n, None)?;
                let total: f64 = picked
                    .iter()
                    .map(|&i| nll(&logits[i * v..(i + 1) * v], tokens[i]))
                    .sum();
                // (1/r) * sum / n with r = m/n
                Ok(total / m as f64)
            });
            let mut acc = 0.0;
            for d in draws {
                acc += d?;
            }
            Ok(acc / mc_samples as f64)
        }
    }
}
