//! NTK scaling law: critical dimension, required base scaling factor and
//! the extrapolation bound it buys.

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::RopeConfig;

/// Number of leading dimensions whose sinusoids complete a full period
/// inside the pretraining window: `2 * ceil(d/2 * log_base(T_train / 2pi))`,
/// clamped to `[0, d]`.
pub fn critical_dimension(cfg: &RopeConfig) -> Result<usize> {
    cfg.validate()?;
    let log = (cfg.train_len as f64 / TAU).ln() / cfg.rotary_base.ln();
    let half = (cfg.planes() as f64 * log).ceil();
    Ok((2.0 * half).clamp(0.0, cfg.head_dim as f64) as usize)
}

fn nonzero_critical_dim(cfg: &RopeConfig) -> Result<f64> {
    match critical_dimension(cfg)? {
        0 => Err(Error::UndefinedScaling {
            train_len: cfg.train_len,
        }),
        d => Ok(d as f64),
    }
}

/// Raw base scaling factor needed to keep a `target_len` context free of
/// out-of-distribution phases: `base^-1 * (t / 2pi)^(d / d_extra)`.
///
/// Values below 1 mean the target already fits.
pub fn scaling_factor(cfg: &RopeConfig, target_len: usize) -> Result<f64> {
    if target_len == 0 {
        return Err(Error::Parameter("target length must be >= 1".into()));
    }
    let d_extra = nonzero_critical_dim(cfg)?;
    let exponent = cfg.head_dim as f64 / d_extra;
    Ok((exponent * (target_len as f64 / TAU).ln() - cfg.rotary_base.ln()).exp())
}

/// Longest context free of out-of-distribution phases at the critical
/// dimension once the base is scaled by `lambda`.
pub fn extrapolation_bound(cfg: &RopeConfig, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 1.0) {
        return Err(Error::Parameter(format!(
            "scaling factor must be >= 1, got {lambda}"
        )));
    }
    let d_extra = nonzero_critical_dim(cfg)?;
    let exponent = d_extra / cfg.head_dim as f64;
    Ok(TAU * (exponent * (lambda.ln() + cfg.rotary_base.ln())).exp())
}

/// Integer factor used for inference: ceiling of the raw value, at least 1.
pub fn integer_factor(lambda_raw: f64) -> u64 {
    lambda_raw.ceil().max(1.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEntry {
    pub target_len: usize,
    pub lambda_raw: f64,
    pub lambda_int: u64,
    pub bound_at_lambda_int: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: RopeConfig,
    pub critical_dim: usize,
    pub entries: Vec<ScalingEntry>,
}

impl ScalingReport {
    pub fn lambdas(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.lambda_int).collect()
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "target_len,lambda_raw,lambda_int,bound")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{}",
                e.target_len, e.lambda_raw, e.lambda_int, e.bound_at_lambda_int
            )?;
        }
        Ok(())
    }
}

/// Builds an extension plan for each target length.
pub fn plan(cfg: &RopeConfig, targets: &[usize]) -> Result<ScalingReport> {
    if targets.is_empty() {
        return Err(Error::Parameter("at least one target length required".into()));
    }
    let critical_dim = critical_dimension(cfg)?;
    let entries = targets
        .iter()
        .map(|&t| {
            let lambda_raw = scaling_factor(cfg, t)?;
            let lambda_int = integer_factor(lambda_raw);
            Ok(ScalingEntry {
                target_len: t,
                lambda_raw,
                lambda_int,
                bound_at_lambda_int: extrapolation_bound(cfg, lambda_int as f64)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScalingReport {
        config: *cfg,
        critical_dim,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Direct evaluation of the scaling law with powf, independent of the
    // log-space path above.
    fn oracle_lambda(d: f64, base: f64, train: f64, t: f64) -> f64 {
        let d_extra = 2.0 * ((d / 2.0) * (train / TAU).log(base)).ceil();
        (t / TAU).powf(d / d_extra) / base
    }

    #[test]
    fn critical_dimension_examples() {
        assert_eq!(critical_dimension(&RopeConfig::llada()).unwrap(), 64);
        let tiny = RopeConfig::new(128, 10_000.0, 6).unwrap();
        assert_eq!(critical_dimension(&tiny).unwrap(), 0);
        let dream = RopeConfig::dream();
        let oracle = 2.0 * (64.0 * (2048.0f64 / TAU).ln() / 1e6f64.ln()).ceil();
        assert_eq!(oracle, 54.0);
        assert_eq!(critical_dimension(&dream).unwrap(), 54);
        // the toy default
        let toy = RopeConfig::new(32, 10_000.0, 256).unwrap();
        assert_eq!(critical_dimension(&toy).unwrap(), 14);
    }

    #[test]
    fn critical_dimension_clamps_to_head_dim() {
        let c = RopeConfig::new(8, 2.0, 1 << 20).unwrap();
        assert_eq!(critical_dimension(&c).unwrap(), 8);
    }

    #[test]
    fn scaling_factor_examples() {
        let c = RopeConfig::llada();
        let l8 = scaling_factor(&c, 8192).unwrap();
        let l16 = scaling_factor(&c, 16384).unwrap();
        let l4 = scaling_factor(&c, 4096).unwrap();
        assert_relative_eq!(l8, 3.40, epsilon = 0.005);
        assert_relative_eq!(l16, 13.60, epsilon = 0.01);
        assert_relative_eq!(l4, 0.85, epsilon = 0.005);
        assert_eq!(integer_factor(l8), 4);
        assert_eq!(integer_factor(l16), 14);
        assert_eq!(integer_factor(l4), 1);
        for t in [4096, 8192, 16384] {
            assert_relative_eq!(
                scaling_factor(&c, t).unwrap(),
                oracle_lambda(128.0, 5e5, 4096.0, t as f64),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn degenerate_configs_fail_loudly() {
        let tiny = RopeConfig::new(128, 10_000.0, 6).unwrap();
        assert!(matches!(
            scaling_factor(&tiny, 100),
            Err(Error::UndefinedScaling { train_len: 6 })
        ));
        assert!(matches!(
            extrapolation_bound(&tiny, 2.0),
            Err(Error::UndefinedScaling { .. })
        ));
        assert!(plan(&tiny, &[100]).is_err());
        assert!(scaling_factor(&RopeConfig::llada(), 0).is_err());
        assert!(extrapolation_bound(&RopeConfig::llada(), 0.9).is_err());
        assert!(plan(&RopeConfig::llada(), &[]).is_err());
    }

    #[test]
    fn extrapolation_bound_examples() {
        let c = RopeConfig::llada();
        let b1 = extrapolation_bound(&c, 1.0).unwrap();
        assert_relative_eq!(b1, TAU * 500_000f64.sqrt(), max_relative = 1e-12);
        assert!(b1 >= 4096.0);
        assert_relative_eq!(
            extrapolation_bound(&c, 4.0).unwrap(),
            TAU * 2e6f64.sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(extrapolation_bound(&c, 4.0).unwrap(), 8886.0, epsilon = 1.0);
        let lam = scaling_factor(&c, 16384).unwrap();
        assert_relative_eq!(
            extrapolation_bound(&c, lam).unwrap(),
            16384.0,
            max_relative = 1e-9
        );
    }

    #[test]
    fn plan_examples() {
        let r = plan(&RopeConfig::llada(), &[8192, 16384, 24576, 32768]).unwrap();
        assert_eq!(r.critical_dim, 64);
        assert_eq!(r.lambdas(), vec![4, 14, 31, 55]);
        for e in &r.entries {
            assert!(e.bound_at_lambda_int >= e.target_len as f64);
        }

        let r = plan(&RopeConfig::dream(), &[4096, 8192, 16384]).unwrap();
        assert_eq!(r.lambdas(), vec![5, 25, 126]);
        for e in &r.entries {
            let o = oracle_lambda(128.0, 1e6, 2048.0, e.target_len as f64);
            assert_relative_eq!(e.lambda_raw, o, max_relative = 1e-12);
        }

        let r = plan(&RopeConfig::llada(), &[4096]).unwrap();
        assert_eq!(r.lambdas(), vec![1]);
    }

    #[test]
    fn report_csv_layout() {
        let r = plan(&RopeConfig::llada(), &[8192, 16384]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "target_len,lambda_raw,lambda_int,bound");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("8192,3.39"));
        assert!(lines[2].contains(",14,"));

        let mut json = Vec::new();
        r.write_json(&mut json).unwrap();
        let back: ScalingReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn critical_dimension_monotone_over_grid() {
        let bases = [100.0, 1e3, 1e4, 1e5, 5e5, 1e6, 1e7];
        let lens = [8, 64, 256, 1024, 4096, 32768];
        for d in [16, 32, 64, 128] {
            for w in lens.windows(2) {
                for &b in &bases {
                    let a = critical_dimension(&RopeConfig::new(d, b, w[0]).unwrap()).unwrap();
                    let c = critical_dimension(&RopeConfig::new(d, b, w[1]).unwrap()).unwrap();
                    assert!(a <= c);
                }
            }
            for w in bases.windows(2) {
                for &t in &lens {
                    let a = critical_dimension(&RopeConfig::new(d, w[0], t).unwrap()).unwrap();
                    let c = critical_dimension(&RopeConfig::new(d, w[1], t).unwrap()).unwrap();
                    assert!(a >= c);
                }
            }
        }
    }

    fn valid_cfg() -> impl Strategy<Value = RopeConfig> {
        (1usize..=128, 1.5f64..1e7, 7usize..100_000)
            .prop_map(|(h, b, t)| RopeConfig::new(2 * h, b, t).unwrap())
    }

    proptest! {
        #[test]
        fn power_law_doubling(cfg in valid_cfg(), t in 1usize..1_000_000) {
            let d_extra = critical_dimension(&cfg).unwrap() as f64;
            let (a, b) = (scaling_factor(&cfg, t).unwrap(), scaling_factor(&cfg, 2 * t).unwrap());
            prop_assume!(a.is_normal() && b.is_finite());
            let ratio = b / a;
            let expect = 2f64.powf(cfg.head_dim as f64 / d_extra);
            prop_assert!((ratio - expect).abs() <= 1e-12 * expect);
        }

        #[test]
        fn monotone_in_length_and_lambda(cfg in valid_cfg(), t in 1usize..1_000_000, l in 1.0f64..1e4) {
            let (a, b) = (scaling_factor(&cfg, t).unwrap(), scaling_factor(&cfg, t + 1).unwrap());
            prop_assume!(a.is_normal() && b.is_finite());
            prop_assert!(b > a);
            prop_assert!(
                extrapolation_bound(&cfg, l * 1.001).unwrap() > extrapolation_bound(&cfg, l).unwrap()
            );
        }
    }
}
