//! Block-wise masked-diffusion decoding and the greedy causal path.

use rand::Rng;

use super::checkpoint::ModelCheckpoint;
use super::config::{ModelMode, Remasking, SamplerConfig, Vocab};
use super::model::Rotary;
use crate::error::{Error, Result};
use crate::rope::RopeConfig;
use crate::seeding::rng_for;

/// Finalize counts per step, one vector per block. Empty for causal models.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleTrace {
    pub finalized: Vec<Vec<usize>>,
}

/// Generates `sc.gen_len` tokens after `prompt` with the checkpoint's own
/// rotary table.
pub fn sample(ckpt: &ModelCheckpoint, prompt: &[u32], sc: &SamplerConfig) -> Result<Vec<u32>> {
    sample_with_rope(ckpt, prompt, sc, &ckpt.config.rope)
}

/// [`sample`] with an injected rotary config, e.g. from `scale_base`.
pub fn sample_with_rope(
    ckpt: &ModelCheckpoint,
    prompt: &[u32],
    sc: &SamplerConfig,
    rope: &RopeConfig,
) -> Result<Vec<u32>> {
    sample_traced(ckpt, prompt, sc, rope).map(|(out, _)| out)
}

pub fn sample_traced(
    ckpt: &ModelCheckpoint,
    prompt: &[u32],
    sc: &SamplerConfig,
    rope: &RopeConfig,
) -> Result<(Vec<u32>, SampleTrace)> {
    sc.validate()?;
    let mask = ckpt.config.mask_id();
    if prompt.contains(&mask) {
        return Err(Error::Data("prompt contains the MASK id".into()));
    }
    match ckpt.config.mode {
        ModelMode::Causal => greedy(ckpt, prompt, sc, rope).map(|o| (o, SampleTrace::default())),
        ModelMode::BidirectionalMdlm => diffuse(ckpt, prompt, sc, rope),
    }
}

/// Argmax over the predictable classes with its softmax probability.
fn best(row: &[f32]) -> (u32, f32) {
    let (mut arg, mut top) = (0, f32::NEG_INFINITY);
    for (i, &z) in row.iter().enumerate() {
        if z > top {
            (arg, top) = (i, z);
        }
    }
    let denom: f32 = row.iter().map(|&z| (z - top).exp()).sum();
    (arg as u32, 1.0 / denom)
}

/// Greedy left-to-right decoding. After EOS the remainder is EOS.
fn greedy(
    ckpt: &ModelCheckpoint,
    prompt: &[u32],
    sc: &SamplerConfig,
    rope: &RopeConfig,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Data("causal decoding needs a nonempty prompt".into()));
    }
    let model = ckpt.model();
    let classes = ckpt.config.vocab().predictable();
    let v = ckpt.config.vocab_size;
    let rotary = Rotary::new(rope, prompt.len() + sc.gen_len)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(sc.gen_len);
    while out.len() < sc.gen_len {
        let last = seq.len() - 1;
        let (logits, _) = model.forward(&seq, &rotary, last..last + 1, None)?;
        let (tok, _) = best(&logits[..classes.min(v)]);
        out.push(tok);
        seq.push(tok);
        if tok == Vocab::EOS {
            out.resize(sc.gen_len, Vocab::EOS);
        }
    }
    Ok(out)
}

fn diffuse(
    ckpt: &ModelCheckpoint,
    prompt: &[u32],
    sc: &SamplerConfig,
    rope: &RopeConfig,
) -> Result<(Vec<u32>, SampleTrace)> {
    let model = ckpt.model();
    let mask = ckpt.config.mask_id();
    let classes = ckpt.config.vocab().predictable();
    let v = ckpt.config.vocab_size;
    let padded = sc.padded_len();
    let start = prompt.len();
    let mut seq = prompt.to_vec();
    seq.resize(start + padded, mask);
    let rotary = Rotary::new(rope, seq.len())?;
    let schedule = sc.schedule();
    let mut rng = rng_for(sc.seed, &[start as u64]);
    let mut trace = SampleTrace::default();

    for block in 0..padded / sc.block_len {
        let lo = start + block * sc.block_len;
        let hi = lo + sc.block_len;
        let mut counts = Vec::with_capacity(schedule.len());
        for &k in &schedule {
            let (logits, _) = model.forward(&seq, &rotary, lo..hi, None)?;
            let mut cands: Vec<(usize, u32, f32)> = (lo..hi)
                .filter(|&p| seq[p] == mask)
                .map(|p| {
                    let row = &logits[(p - lo) * v..(p - lo) * v + classes];
                    let (tok, prob) = best(row);
                    let conf = match sc.remasking {
                        Remasking::LowConfidence => prob,
                        Remasking::Random => rng.random::<f32>(),
                    };
                    (p, tok, conf)
                })
                .collect();
            // stable: ties keep position order
            cands.sort_by(|a, b| b.2.total_cmp(&a.2));
            let take = k.min(cands.len());
            for &(p, tok, _) in &cands[..take] {
                seq[p] = tok;
            }
            counts.push(take);
        }
        trace.finalized.push(counts);
    }
    debug_assert!(!seq.contains(&mask));
    seq.truncate(start + sc.gen_len);
    Ok((seq.split_off(start), trace))
}
