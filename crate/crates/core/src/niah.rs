//! Synthetic needle-in-a-haystack evaluation.
//!
//! A haystack of length `L` is uniform random content tokens with one needle
//! `[NEEDLE, key, payload...]` placed at a controlled depth and the query
//! suffix `[QUERY, key]` at the very end. A model succeeds on a trial when
//! its generated continuation contains the payload contiguously.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdlm::config::{SamplerConfig, Vocab, DEFAULT_SEED, SCHEMA_VERSION};
use crate::mdlm::sample::sample_with_rope;
use crate::mdlm::ModelCheckpoint;
use crate::par;
use crate::rope::RopeConfig;
use crate::seeding::rng_for;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Shape of the needle: one key token and a payload of random content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleTemplate {
    pub payload_len: usize,
}

impl Default for NeedleTemplate {
    fn default() -> Self {
        NeedleTemplate { payload_len: 4 }
    }
}

impl NeedleTemplate {
    pub const KEY_LEN: usize = 1;

    /// `[NEEDLE, key, payload...]`
    pub fn needle_len(&self) -> usize {
        1 + Self::KEY_LEN + self.payload_len
    }

    /// `[QUERY, key]`
    pub fn query_len(&self) -> usize {
        1 + Self::KEY_LEN
    }
}

/// Filler generators. Only uniform content noise exists today.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaystackSource {
    #[default]
    UniformContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub context_lengths: Vec<usize>,
    pub depths: Vec<f64>,
    #[serde(default)]
    pub needle_template: NeedleTemplate,
    #[serde(default)]
    pub haystack_source: HaystackSource,
    pub trials_per_cell: usize,
    pub gen_len: usize,
    pub seed: u64,
    pub vocab_size: usize,
}

impl Default for NiahSpec {
    /// Toy grid: lengths up to 6x a 256-token training window, depths in
    /// tenths, 8 trials per cell.
    fn default() -> Self {
        NiahSpec {
            schema_version: SCHEMA_VERSION,
            context_lengths: vec![64, 128, 192, 256, 384, 512, 768, 1024, 1536],
            depths: (0..=10).map(|i| i as f64 / 10.0).collect(),
            needle_template: NeedleTemplate::default(),
            haystack_source: HaystackSource::UniformContent,
            trials_per_cell: 8,
            gen_len: 32,
            seed: DEFAULT_SEED,
            vocab_size: 65,
        }
    }
}

impl NiahSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.context_lengths.is_empty() || self.depths.is_empty() {
            return bad("context_lengths and depths must be nonempty");
        }
        if self.context_lengths.windows(2).any(|w| w[0] >= w[1]) || self.context_lengths[0] == 0 {
            return bad("context_lengths must be positive and strictly ascending");
        }
        if self.depths.iter().any(|d| !(0.0..=1.0).contains(d))
            || self.depths.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("depths must be strictly ascending within [0, 1]");
        }
        if self.trials_per_cell == 0 {
            return bad("trials_per_cell must be >= 1");
        }
        if self.gen_len < self.needle_template.payload_len || self.needle_template.payload_len == 0 {
            return bad("gen_len must hold the payload and payload_len must be >= 1");
        }
        Vocab::new(self.vocab_size)?;
        let min = self.needle_template.needle_len() + self.needle_template.query_len();
        if self.context_lengths[0] < min {
            return Err(Error::Parameter(format!(
                "context length {} shorter than needle + query ({min})",
                self.context_lengths[0]
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: NiahSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Haystack {
    /// Filler, needle and query suffix; exactly `L` tokens.
    pub tokens: Vec<u32>,
    pub needle_payload: Vec<u32>,
    pub query_suffix: Vec<u32>,
    pub needle_pos: usize,
}

/// Builds a haystack from an explicit RNG. Shared with the training corpus.
pub fn build_haystack<R: Rng>(
    vocab: Vocab,
    template: NeedleTemplate,
    len: usize,
    depth: f64,
    rng: &mut R,
) -> Result<Haystack> {
    let (nl, ql) = (template.needle_len(), template.query_len());
    if len < nl + ql {
        return Err(Error::Parameter(format!(
            "context length {len} shorter than needle + query ({})",
            nl + ql
        )));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Parameter(format!("depth {depth} outside [0, 1]")));
    }
    // key and payload are distinct and never occur in the filler
    let content = vocab.content();
    let picked = template.payload_len + 1;
    if picked >= vocab.content_len() {
        return Err(Error::Parameter(format!(
            "payload of {} tokens leaves no filler in a {}-token content alphabet",
            template.payload_len,
            vocab.content_len()
        )));
    }
    let ids: Vec<u32> = rand::seq::index::sample(rng, vocab.content_len(), picked)
        .into_iter()
        .map(|i| content.start + i as u32)
        .collect();
    let (key, payload) = (ids[0], ids[1..].to_vec());
    let filler: Vec<u32> = content.filter(|t| !ids.contains(t)).collect();
    let pos = (depth * (len - nl - ql) as f64).floor() as usize;

    let mut tokens: Vec<u32> = (0..len)
        .map(|_| filler[rng.random_range(0..filler.len())])
        .collect();
    tokens[pos] = Vocab::NEEDLE;
    tokens[pos + 1] = key;
    tokens[pos + 2..pos + nl].copy_from_slice(&payload);
    tokens[len - ql] = Vocab::QUERY;
    tokens[len - 1] = key;
    Ok(Haystack {
        tokens,
        needle_payload: payload,
        query_suffix: vec![Vocab::QUERY, key],
        needle_pos: pos,
    })
}

/// Deterministic haystack for one grid cell trial.
pub fn gen_haystack(spec: &NiahSpec, len: usize, depth: f64, trial: usize) -> Result<Haystack> {
    let vocab = Vocab::new(spec.vocab_size)?;
    let mut rng = rng_for(spec.seed, &[len as u64, depth.to_bits(), trial as u64]);
    build_haystack(vocab, spec.needle_template, len, depth, &mut rng)
}

/// 1 when `payload` occurs contiguously in `output`.
pub fn score(output: &[u32], payload: &[u32]) -> u8 {
    if payload.is_empty() {
        return 1;
    }
    u8::from(output.windows(payload.len()).any(|w| w == payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed_context: [u64; 3],
    pub payload: Vec<u32>,
    pub output: Vec<u32>,
    pub score: u8,
    /// Set when the model errored on this trial; it then counts as a miss.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub context_length: usize,
    pub depth: f64,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// `accuracy[i][j]` for `context_lengths[i]`, `depths[j]`.
    pub accuracy: Vec<Vec<f64>>,
    pub per_cell_meta: Vec<CellMeta>,
    pub spec: NiahSpec,
    pub sampler: SamplerConfig,
    pub rope: RopeConfig,
}

impl GridResult {
    pub fn shape(&self) -> (usize, usize) {
        (self.accuracy.len(), self.accuracy.first().map_or(0, Vec::len))
    }

    pub fn row(&self, len: usize) -> Option<&[f64]> {
        let i = self.spec.context_lengths.iter().position(|&l| l == len)?;
        Some(&self.accuracy[i])
    }

    /// Mean accuracy over all cells with `context_length >= min_len`.
    pub fn mean_beyond(&self, min_len: usize) -> Option<f64> {
        let rows: Vec<&Vec<f64>> = self
            .spec
            .context_lengths
            .iter()
            .zip(&self.accuracy)
            .filter(|(l, _)| **l >= min_len)
            .map(|(_, r)| r)
            .collect();
        let n: usize = rows.iter().map(|r| r.len()).sum();
        (n > 0).then(|| rows.iter().flat_map(|r| r.iter()).sum::<f64>() / n as f64)
    }
}

/// Evaluation strategy for grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    Parallel,
}

fn run_trial(
    ckpt: &ModelCheckpoint,
    spec: &NiahSpec,
    sampler: &SamplerConfig,
    rope: &RopeConfig,
    len: usize,
    depth: f64,
    trial: usize,
) -> TrialRecord {
    let seed_context = [len as u64, depth.to_bits(), trial as u64];
    let outcome = gen_haystack(spec, len, depth, trial).and_then(|h| {
        let sc = SamplerConfig {
            gen_len: spec.gen_len,
            seed: crate::seeding::derive_seed(sampler.seed, &seed_context),
            ..sampler.clone()
        };
        let out = sample_with_rope(ckpt, &h.tokens, &sc, rope)?;
        Ok((h.needle_payload, out))
    });
    match outcome {
        Ok((payload, output)) => TrialRecord {
            seed_context,
            score: score(&output, &payload),
            payload,
            output,
            error: None,
        },
        Err(e) => TrialRecord {
            seed_context,
            payload: Vec::new(),
            output: Vec::new(),
            score: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Evaluates every `(length, depth)` cell. `rope_override` replaces the
/// checkpoint's rotary config (NTK injection). Cells and trials are
/// independent; each trial owns an RNG stream keyed by
/// `(seed, L, depth, trial)`.
pub fn run_grid(
    ckpt: &ModelCheckpoint,
    spec: &NiahSpec,
    sampler: &SamplerConfig,
    rope_override: Option<&RopeConfig>,
) -> Result<GridResult> {
    run_grid_with(ckpt, spec, sampler, rope_override, Execution::Parallel)
}

pub fn run_grid_with(
    ckpt: &ModelCheckpoint,
    spec: &NiahSpec,
    sampler: &SamplerConfig,
    rope_override: Option<&RopeConfig>,
    exec: Execution,
) -> Result<GridResult> {
    spec.validate()?;
    sampler.validate()?;
    if spec.vocab_size != ckpt.config.vocab_size {
        return Err(Error::Parameter(format!(
            "spec vocab_size {} != model vocab_size {}",
            spec.vocab_size, ckpt.config.vocab_size
        )));
    }
    let rope = *rope_override.unwrap_or(&ckpt.config.rope);
    rope.validate()?;
    if rope.head_dim != ckpt.config.head_dim {
        return Err(Error::Parameter("rope override head_dim differs from model".into()));
    }
    let (nl, nd, nt) = (
        spec.context_lengths.len(),
        spec.depths.len(),
        spec.trials_per_cell,
    );
    // Longest contexts first so the parallel pool is not left waiting on a
    // straggler; results are re-indexed below.
    let job = |idx: usize| {
        let rev = nl * nd * nt - 1 - idx;
        let (i, rest) = (rev / (nd * nt), rev % (nd * nt));
        let (j, trial) = (rest / nt, rest % nt);
        run_trial(
            ckpt,
            spec,
            sampler,
            &rope,
            spec.context_lengths[i],
            spec.depths[j],
            trial,
        )
    };
    let mut records = match exec {
        Execution::Serial => par::map_indexed_serial(nl * nd * nt, job),
        Execution::Parallel => par::map_indexed(nl * nd * nt, job),
    };
    records.reverse();

    let mut accuracy = vec![vec![0.0; nd]; nl];
    let mut per_cell_meta = Vec::with_capacity(nl * nd);
    let mut it = records.into_iter();
    for (i, &len) in spec.context_lengths.iter().enumerate() {
        for (j, &depth) in spec.depths.iter().enumerate() {
            let trials: Vec<TrialRecord> = it.by_ref().take(nt).collect();
            accuracy[i][j] = trials.iter().map(|t| t.score as f64).sum::<f64>() / nt as f64;
            per_cell_meta.push(CellMeta {
                context_length: len,
                depth,
                trials,
            });
        }
    }
    Ok(GridResult {
        accuracy,
        per_cell_meta,
        spec: spec.clone(),
        sampler: sampler.clone(),
        rope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBoundary {
    pub context_length: usize,
    /// Smallest depth whose accuracy meets the threshold, if any.
    pub deepest_success_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimate {
    pub per_length: Vec<LengthBoundary>,
    pub window_tokens: f64,
    pub fit_residual: f64,
    /// True when no cell reached the threshold.
    pub no_success: bool,
}

/// Fits a trailing retrieval window `W` so that the success boundary follows
/// `depth* = max(0, 1 - W / L)`.
pub fn effective_window(grid: &GridResult, threshold: f64) -> Result<WindowEstimate> {
    if grid.accuracy.is_empty() || grid.spec.depths.is_empty() {
        return Err(Error::Parameter("empty grid".into()));
    }
    let per_length: Vec<LengthBoundary> = grid
        .spec
        .context_lengths
        .iter()
        .zip(&grid.accuracy)
        .map(|(&len, row)| LengthBoundary {
            context_length: len,
            deepest_success_depth: grid
                .spec
                .depths
                .iter()
                .zip(row)
                .find(|(_, &a)| a >= threshold)
                .map(|(&d, _)| d),
        })
        .collect();
    let points: Vec<(f64, f64)> = per_length
        .iter()
        .filter_map(|b| b.deepest_success_depth.map(|d| (b.context_length as f64, d)))
        .collect();
    if points.is_empty() {
        return Ok(WindowEstimate {
            per_length,
            window_tokens: 0.0,
            fit_residual: 0.0,
            no_success: true,
        });
    }
    let sse = |w: f64| -> f64 {
        points
            .iter()
            .map(|&(l, d)| {
                let pred = (1.0 - w / l).max(0.0);
                (pred - d).powi(2)
            })
            .sum()
    };
    // The objective is piecewise smooth in W; scan candidates at every
    // breakpoint and its neighbourhood, then refine by golden section.
    let max_len = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let mut cands: Vec<f64> = vec![0.0, max_len];
    for &(l, d) in &points {
        cands.push(l * (1.0 - d));
        cands.push(l);
    }
    let steps = 2000;
    cands.extend((0..=steps).map(|i| max_len * i as f64 / steps as f64));
    let mut best = (f64::INFINITY, 0.0);
    for &w in &cands {
        let e = sse(w);
        // prefer the smallest W among ties
        if e < best.0 - 1e-12 || ((e - best.0).abs() <= 1e-12 && w < best.1) {
            best = (e, w);
        }
    }
    let (mut lo, mut hi) = (
        (best.1 - max_len / steps as f64).max(0.0),
        best.1 + max_len / steps as f64,
    );
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if sse(a) <= sse(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let refined = (lo + hi) / 2.0;
    let w = if sse(refined) < best.0 { refined } else { best.1 };
    // a boundary of depth 0 everywhere only bounds W from below
    let all_full = points.iter().all(|&(_, d)| d == 0.0);
    let w = if all_full { w.max(max_len) } else { w };
    Ok(WindowEstimate {
        per_length,
        window_tokens: w,
        fit_residual: (sse(w) / points.len() as f64).sqrt(),
        no_success: false,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a NiahSpec,
    sampler: &'a SamplerConfig,
    rope: &'a RopeConfig,
    cells: &'a [CellMeta],
}

/// Writes `context_length,depth,accuracy` rows to `path` and the spec plus
/// per-trial metadata to `<path>.json`.
pub fn emit_heatmap(grid: &GridResult, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut csv = String::from("context_length,depth,accuracy\n");
    for (&len, row) in grid.spec.context_lengths.iter().zip(&grid.accuracy) {
        for (&depth, &acc) in grid.spec.depths.iter().zip(row) {
            csv.push_str(&format!("{len},{depth:.4},{acc:.4}\n"));
        }
    }
    fs::File::create(path)?.write_all(csv.as_bytes())?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let side = PathBuf::from(side);
    let json = serde_json::to_vec_pretty(&Sidecar {
        spec: &grid.spec,
        sampler: &grid.sampler,
        rope: &grid.rope,
        cells: &grid.per_cell_meta,
    })?;
    fs::write(&side, json)?;
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NiahSpec {
        NiahSpec::default()
    }

    #[test]
    fn haystack_layout() {
        let s = spec();
        let nl = s.needle_template.needle_len();
        for len in [8, 64, 300] {
            let h = gen_haystack(&s, len, 0.0, 0).unwrap();
            assert_eq!(h.tokens.len(), len);
            assert_eq!(h.needle_pos, 0);
            assert_eq!(h.tokens[0], Vocab::NEEDLE);
            assert_eq!(&h.tokens[len - 2..], h.query_suffix.as_slice());
            assert_eq!(&h.tokens[2..2 + 4], h.needle_payload.as_slice());

            let h = gen_haystack(&s, len, 1.0, 0).unwrap();
            assert_eq!(h.needle_pos + nl, len - 2);
            assert_eq!(h.tokens[h.needle_pos], Vocab::NEEDLE);
        }
    }

    #[test]
    fn haystack_deterministic_and_needle_tokens_unique() {
        let s = spec();
        for trial in 0..20 {
            let a = gen_haystack(&s, 512, 0.3, trial).unwrap();
            let b = gen_haystack(&s, 512, 0.3, trial).unwrap();
            assert_eq!(a, b);
            let hits = a
                .tokens
                .windows(4)
                .filter(|w| *w == a.needle_payload.as_slice())
                .count();
            assert_eq!(hits, 1);
            let key = a.query_suffix[1];
            assert_eq!(a.tokens.iter().filter(|&&t| t == key).count(), 2);
            for p in &a.needle_payload {
                assert_eq!(a.tokens.iter().filter(|&t| t == p).count(), 1);
                assert_ne!(*p, key);
            }
            let markers = a.tokens.iter().filter(|&&t| t < Vocab::FIRST_CONTENT).count();
            assert_eq!(markers, 2);
            assert!(a.tokens.iter().all(|&t| t < 64));
        }
        assert_ne!(
            gen_haystack(&s, 512, 0.3, 0).unwrap(),
            gen_haystack(&s, 512, 0.3, 1).unwrap()
        );
    }

    #[test]
    fn needle_moves_with_depth() {
        let s = spec();
        let mut last = None;
        for &d in &s.depths {
            let p = gen_haystack(&s, 256, d, 0).unwrap().needle_pos;
            if let Some(prev) = last {
                assert!(p > prev);
            }
            last = Some(p);
        }
    }

    #[test]
    fn too_short_context_rejected() {
        assert!(matches!(
            gen_haystack(&spec(), 7, 0.5, 0),
            Err(Error::Parameter(_))
        ));
        assert!(gen_haystack(&spec(), 64, 1.5, 0).is_err());
    }

    #[test]
    fn scoring() {
        assert_eq!(score(&[9, 1, 2, 3, 4, 9], &[1, 2, 3, 4]), 1);
        assert_eq!(score(&[], &[1, 2, 3, 4]), 0);
        assert_eq!(score(&[1, 2, 7, 3, 4], &[1, 2, 3, 4]), 0);
        assert_eq!(score(&[1, 2, 3], &[1, 2, 3, 4]), 0);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec();
        s.validate().unwrap();
        s.depths = vec![0.5, 0.2];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.context_lengths = vec![128, 64];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.trials_per_cell = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.depths = vec![0.0, 1.1];
        assert!(s.validate().is_err());
    }

    pub(crate) fn synthetic_grid(lens: &[usize], depths: &[f64], ok: impl Fn(usize, f64) -> bool) -> GridResult {
        let spec = NiahSpec {
            context_lengths: lens.to_vec(),
            depths: depths.to_vec(),
            ..NiahSpec::default()
        };
        let accuracy = lens
            .iter()
            .map(|&l| depths.iter().map(|&d| if ok(l, d) { 1.0 } else { 0.0 }).collect())
            .collect();
        GridResult {
            accuracy,
            per_cell_meta: Vec::new(),
            spec,
            sampler: SamplerConfig::default(),
            rope: RopeConfig::new(32, 10_000.0, 256).unwrap(),
        }
    }

    #[test]
    fn window_recovers_constructed_boundary() {
        let lens = [256, 384, 512, 768, 1024, 1536];
        let depths: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        for w in [128.0, 256.0, 400.0] {
            let g = synthetic_grid(&lens, &depths, |l, d| d >= 1.0 - w / l as f64);
            let est = effective_window(&g, 0.5).unwrap();
            // one depth bin at the longest length
            let bin = 0.1 * 1536.0;
            assert!(
                (est.window_tokens - w).abs() <= bin,
                "w={w} est={}",
                est.window_tokens
            );
            assert!(!est.no_success);
        }
    }

    #[test]
    fn window_edge_cases() {
        let lens = [64, 128, 256];
        let depths = [0.0, 0.5, 1.0];
        let all = synthetic_grid(&lens, &depths, |_, _| true);
        let est = effective_window(&all, 0.5).unwrap();
        assert!(est.window_tokens >= 256.0);
        assert!(est.per_length.iter().all(|b| b.deepest_success_depth == Some(0.0)));

        let none = synthetic_grid(&lens, &depths, |_, _| false);
        let est = effective_window(&none, 0.5).unwrap();
        assert_eq!(est.window_tokens, 0.0);
        assert!(est.no_success);
        assert!(est.per_length.iter().all(|b| b.deepest_success_depth.is_none()));
    }

    #[test]
    fn heatmap_format_and_determinism() {
        let g = synthetic_grid(&[64, 128], &[0.0, 0.25], |l, _| l == 64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        let side = emit_heatmap(&g, &p).unwrap();
        let first = fs::read(&p).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "context_length,depth,accuracy");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "64,0.2500,1.0000");
        assert_eq!(lines[3], "128,0.0000,0.0000");
        let side_first = fs::read(&side).unwrap();
        emit_heatmap(&g, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert_eq!(fs::read(&side).unwrap(), side_first);
    }
}
