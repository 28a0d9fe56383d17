//! Rotary position embedding algebra.
//!
//! Everything here is computed in `f64`: the frequency table, the plane
//! rotations and the analytic phase-coverage report. The model code builds
//! its `f32` cos/sin caches from [`FreqTable`] so that the angles it uses are
//! exactly the ones analysed here.
//!
//! Rotary planes are interleaved: dimension pair `(2n, 2n + 1)` rotates by
//! `theta_n * pos`.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling;

/// Default rotary base.
pub const DEFAULT_ROTARY_BASE: f64 = 10_000.0;

/// The `(head_dim, rotary_base, train_len)` triple every formula consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub rotary_base: f64,
    pub train_len: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize, rotary_base: f64, train_len: usize) -> Result<Self> {
        let cfg = RopeConfig {
            head_dim,
            rotary_base,
            train_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// LLaDA-8B: head dim 128 (inferred), base 5e5, 4k pretraining.
    pub fn llada() -> Self {
        RopeConfig {
            head_dim: 128,
            rotary_base: 500_000.0,
            train_len: 4096,
        }
    }

    /// Dream-v0-7B: base 1e6, 2k pretraining.
    pub fn dream() -> Self {
        RopeConfig {
            head_dim: 128,
            rotary_base: 1_000_000.0,
            train_len: 2048,
        }
    }

    /// LLaMA3-8B: base 5e5, 8k pretraining.
    pub fn llama3() -> Self {
        RopeConfig {
            head_dim: 128,
            rotary_base: 500_000.0,
            train_len: 8192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim < 2 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be even and >= 2, got {}",
                self.head_dim
            )));
        }
        if !(self.rotary_base.is_finite() && self.rotary_base > 1.0) {
            return Err(Error::Config(format!(
                "rotary_base must be > 1, got {}",
                self.rotary_base
            )));
        }
        if self.train_len == 0 {
            return Err(Error::Config("train_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of rotary planes, `d / 2`.
    pub fn planes(&self) -> usize {
        self.head_dim / 2
    }
}

/// Per-plane rotation angles and their periods in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqTable {
    pub angles: Vec<f64>,
    pub periods: Vec<f64>,
}

impl FreqTable {
    pub fn head_dim(&self) -> usize {
        self.angles.len() * 2
    }
}

/// `angles[n] = base^(-2n/d)`, `periods[n] = 2*pi*base^(2n/d)`.
pub fn build_freq_table(cfg: &RopeConfig) -> Result<FreqTable> {
    cfg.validate()?;
    let d = cfg.head_dim as f64;
    let ln_base = cfg.rotary_base.ln();
    let (angles, periods) = (0..cfg.planes())
        .map(|n| {
            let e = 2.0 * n as f64 / d;
            ((-e * ln_base).exp(), TAU * (e * ln_base).exp())
        })
        .unzip();
    Ok(FreqTable { angles, periods })
}

/// Period `2*pi*base^(2n/d)` of plane `n`.
pub fn period(n: usize, cfg: &RopeConfig) -> Result<f64> {
    cfg.validate()?;
    if n >= cfg.planes() {
        return Err(Error::Index {
            index: n,
            len: cfg.planes(),
        });
    }
    let e = 2.0 * n as f64 / cfg.head_dim as f64;
    Ok(TAU * (e * cfg.rotary_base.ln()).exp())
}

/// Rotates every interleaved plane of `v` by `theta_n * pos`.
pub fn apply_rotary(v: &[f64], pos: i64, table: &FreqTable) -> Result<Vec<f64>> {
    check_len(v, table)?;
    let mut out = v.to_vec();
    for (n, &theta) in table.angles.iter().enumerate() {
        let (sin, cos) = (theta * pos as f64).sin_cos();
        let (a, b) = (v[2 * n], v[2 * n + 1]);
        out[2 * n] = a * cos - b * sin;
        out[2 * n + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Attention logit between a query at position `t` and a key at `s`:
/// the dot product of the two rotated vectors.
pub fn attention_score(q: &[f64], k: &[f64], t: i64, s: i64, table: &FreqTable) -> Result<f64> {
    let qr = apply_rotary(q, t, table)?;
    let kr = apply_rotary(k, s, table)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}

/// The same logit written as a sum over planes of cos/sin terms in the
/// relative offset `t - s`; no rotated vectors are formed.
pub fn attention_score_relative(
    q: &[f64],
    k: &[f64],
    t: i64,
    s: i64,
    table: &FreqTable,
) -> Result<f64> {
    check_len(q, table)?;
    check_len(k, table)?;
    let rel = (t - s) as f64;
    Ok(table
        .angles
        .iter()
        .enumerate()
        .map(|(n, &theta)| {
            let (q0, q1) = (q[2 * n], q[2 * n + 1]);
            let (k0, k1) = (k[2 * n], k[2 * n + 1]);
            let (sin, cos) = (theta * rel).sin_cos();
            (q0 * k0 + q1 * k1) * cos + (q0 * k1 - q1 * k0) * sin
        })
        .sum())
}

fn check_len(v: &[f64], table: &FreqTable) -> Result<()> {
    if v.len() != table.head_dim() {
        return Err(Error::Dimension {
            expected: table.head_dim(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Multiplies the rotary base by `lambda` (NTK scaling).
pub fn scale_base(cfg: &RopeConfig, lambda: f64) -> Result<RopeConfig> {
    if !(lambda.is_finite() && lambda >= 1.0) {
        return Err(Error::Parameter(format!(
            "scaling factor must be >= 1, got {lambda}"
        )));
    }
    Ok(RopeConfig {
        rotary_base: cfg.rotary_base * lambda,
        ..*cfg
    })
}

/// Which relative offsets training exposes: causal attention only sees keys
/// at or before the query, bidirectional attention sees both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttentionMode::Causal),
            "bidirectional" => Ok(AttentionMode::Bidirectional),
            other => Err(Error::Parameter(format!(
                "unknown attention mode `{other}` (expected causal|bidirectional)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelRange {
    pub lo: i64,
    pub hi: i64,
}

impl RelRange {
    pub fn width(&self) -> i64 {
        self.hi - self.lo
    }

    pub fn contains(&self, r: i64) -> bool {
        (self.lo..=self.hi).contains(&r)
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<i64> {
        self.lo..=self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneCoverage {
    pub dim: usize,
    pub period: f64,
    /// Phase interval swept by `theta_n * r` over the observed offsets.
    pub covered_phase_width: f64,
    pub full_period_covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub mode: AttentionMode,
    pub rel_range: RelRange,
    pub per_dim: Vec<PlaneCoverage>,
    pub critical_dim: usize,
}

/// Analytic phase coverage of each rotary plane over the relative offsets a
/// model trained at `cfg.train_len` has seen.
pub fn coverage_report(cfg: &RopeConfig, mode: AttentionMode) -> Result<CoverageReport> {
    let table = build_freq_table(cfg)?;
    let last = cfg.train_len as i64 - 1;
    let rel_range = match mode {
        AttentionMode::Causal => RelRange { lo: 0, hi: last },
        AttentionMode::Bidirectional => RelRange { lo: -last, hi: last },
    };
    let width = rel_range.width() as f64;
    let per_dim = table
        .angles
        .iter()
        .zip(&table.periods)
        .enumerate()
        .map(|(dim, (&theta, &period))| {
            let covered = theta * width;
            PlaneCoverage {
                dim,
                period,
                covered_phase_width: covered,
                full_period_covered: covered >= TAU,
            }
        })
        .collect();
    Ok(CoverageReport {
        mode,
        rel_range,
        per_dim,
        critical_dim: scaling::critical_dimension(cfg)?,
    })
}
