//! Synthetic training and evaluation text.
//!
//! Two kinds of sequence are produced:
//!
//! * key-value retrieval: a haystack prompt in the exact NIAH format followed
//!   by the answer block (payload, then EOS padding up to `gen_len`);
//! * repetition: a random period of content tokens repeated to length.
//!
//! Corpus files hold one sequence per line as whitespace-separated ids.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdlm::config::{Vocab, DEFAULT_SEED, SCHEMA_VERSION};
use crate::niah::{build_haystack, NeedleTemplate};
use crate::seeding::rng_for;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub vocab_size: usize,
    pub kv_sequences: usize,
    pub repetition_sequences: usize,
    /// Bounds on the full sequence length, answer block included.
    pub min_len: usize,
    pub max_len: usize,
    pub gen_len: usize,
    #[serde(default)]
    pub needle_template: NeedleTemplate,
    pub min_period: usize,
    pub max_period: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            schema_version: SCHEMA_VERSION,
            vocab_size: 65,
            kv_sequences: 16_000,
            repetition_sequences: 4_000,
            min_len: 48,
            max_len: 256,
            gen_len: 32,
            needle_template: NeedleTemplate::default(),
            min_period: 2,
            max_period: 16,
            seed: DEFAULT_SEED,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        let t = self.needle_template;
        let min_kv = t.needle_len() + t.query_len() + self.gen_len;
        if self.kv_sequences > 0 && self.min_len < min_kv {
            return Err(Error::Config(format!("min_len must be >= {min_kv}")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if self.gen_len < t.payload_len {
            return Err(Error::Config("gen_len must hold the payload".into()));
        }
        if self.min_period == 0 || self.min_period > self.max_period {
            return Err(Error::Config("need 1 <= min_period <= max_period".into()));
        }
        Ok(())
    }
}

/// Haystack prompt of `prompt_len` tokens plus the answer block.
pub fn kv_example<R: Rng>(
    vocab: Vocab,
    template: NeedleTemplate,
    prompt_len: usize,
    gen_len: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let depth = rng.random::<f64>();
    let h = build_haystack(vocab, template, prompt_len, depth, rng)?;
    let mut seq = h.tokens;
    seq.extend_from_slice(&h.needle_payload);
    seq.resize(prompt_len + gen_len, Vocab::EOS);
    Ok(seq)
}

/// `len` tokens of a random content pattern of length `period`.
pub fn repetition_example<R: Rng>(vocab: Vocab, len: usize, period: usize, rng: &mut R) -> Vec<u32> {
    let content = vocab.content();
    let unit: Vec<u32> = (0..period.max(1))
        .map(|_| rng.random_range(content.clone()))
        .collect();
    unit.iter().copied().cycle().take(len).collect()
}

/// Key-value sequences first, then repetition sequences. Each sequence has
/// its own RNG stream.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let vocab = Vocab::new(spec.vocab_size)?;
    let mut out = Vec::with_capacity(spec.kv_sequences + spec.repetition_sequences);
    for i in 0..spec.kv_sequences {
        let mut rng = rng_for(spec.seed, &[0, i as u64]);
        let total = rng.random_range(spec.min_len..=spec.max_len);
        out.push(kv_example(
            vocab,
            spec.needle_template,
            total - spec.gen_len,
            spec.gen_len,
            &mut rng,
        )?);
    }
    for i in 0..spec.repetition_sequences {
        let mut rng = rng_for(spec.seed, &[1, i as u64]);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let period = rng.random_range(spec.min_period..=spec.max_period);
        out.push(repetition_example(vocab, len, period, &mut rng));
    }
    Ok(out)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| {
                        Error::Data(format!("line {}: `{tok}` is not a token id", i + 1))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn write_corpus(path: impl AsRef<Path>, seqs: &[Vec<u32>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Held-out text for NLL sweeps and probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Repetition,
    Kv,
}

impl std::str::FromStr for TextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repetition" => Ok(TextKind::Repetition),
            "kv" => Ok(TextKind::Kv),
            other => Err(Error::Parameter(format!(
                "unknown text kind `{other}` (expected repetition|kv)"
            ))),
        }
    }
}

/// Sequence `index` of length `len`, drawn from its own stream so that it
/// does not depend on which other lengths are evaluated. Kv text uses the
/// default template with a 32-token answer block.
pub fn heldout_sequence(
    kind: TextKind,
    vocab: Vocab,
    len: usize,
    seed: u64,
    index: usize,
) -> Result<Vec<u32>> {
    let mut rng = rng_for(seed, &[len as u64, index as u64]);
    match kind {
        TextKind::Repetition => {
            let period = rng.random_range(2..=16);
            Ok(repetition_example(vocab, len, period, &mut rng))
        }
        TextKind::Kv => {
            let gen = 32;
            let t = NeedleTemplate::default();
            if len < t.needle_len() + t.query_len() + gen {
                return Err(Error::Parameter(format!("length {len} too short for kv text")));
            }
            kv_example(vocab, t, len - gen, gen, &mut rng)
        }
    }
}
