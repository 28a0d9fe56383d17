//! Q/K state capture around the rotary transform, a PCA projection, and a
//! centroid-shift statistic comparing positions inside and beyond a boundary.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdlm::{ModelCheckpoint, Rotary};
use crate::rope::RopeConfig;

/// Q/K rows of one head in one layer; every matrix is `len x head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCapture {
    pub layer: usize,
    pub head: usize,
    pub pre_rope_q: Vec<Vec<f64>>,
    pub pre_rope_k: Vec<Vec<f64>>,
    pub post_rope_q: Vec<Vec<f64>>,
    pub post_rope_k: Vec<Vec<f64>>,
    pub positions: Vec<usize>,
}

impl StateCapture {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn capture(ckpt: &ModelCheckpoint, tokens: &[u32], layer: usize, head: usize) -> Result<StateCapture> {
    capture_with_rope(ckpt, tokens, layer, head, &ckpt.config.rope)
}

pub fn capture_with_rope(
    ckpt: &ModelCheckpoint,
    tokens: &[u32],
    layer: usize,
    head: usize,
    rope: &RopeConfig,
) -> Result<StateCapture> {
    let cfg = &ckpt.config;
    if layer >= cfg.n_layers {
        return Err(Error::Index {
            index: layer,
            len: cfg.n_layers,
        });
    }
    if head >= cfg.n_heads {
        return Err(Error::Index {
            index: head,
            len: cfg.n_heads,
        });
    }
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    let rotary = Rotary::new(rope, tokens.len())?;
    let t = tokens.len();
    let (_, cap) = ckpt
        .model()
        .forward(tokens, &rotary, t - 1..t, Some((layer, head)))?;
    let cap = cap.ok_or_else(|| Error::Parameter("capture missing".into()))?;
    let rows = |m: Vec<f32>| -> Vec<Vec<f64>> {
        m.chunks_exact(cfg.head_dim)
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect()
    };
    Ok(StateCapture {
        layer,
        head,
        pre_rope_q: rows(cap.pre_q),
        pre_rope_k: rows(cap.pre_k),
        post_rope_q: rows(cap.post_q),
        post_rope_k: rows(cap.post_k),
        positions: (0..t).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each axis.
    pub explained_variance: [f64; 2],
    pub method: String,
    /// True when the centred data has rank below 2; missing axes are zero.
    pub degenerate: bool,
}

/// Mean-centred projection onto the top two principal axes. Each axis is
/// signed so that its first nonzero loading is positive.
pub fn project2d(states: &[Vec<f64>]) -> Result<ProjectionResult> {
    let n = states.len();
    if n < 3 {
        return Err(Error::Parameter(format!("projection needs >= 3 rows, got {n}")));
    }
    let dim = states[0].len();
    if dim == 0 || states.iter().any(|r| r.len() != dim) {
        return Err(Error::Parameter("rows must share a nonzero width".into()));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| states[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let total: f64 = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = states
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let tol = 1e-12 * scale * scale * dim as f64;
    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    let mut rank = 0;
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= tol {
            break;
        }
        rank += 1;
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().find(|c| c.abs() > 1e-12).copied().unwrap_or(1.0);
        if lead < 0.0 {
            v.neg_mut();
        }
        let proj = &centred * v;
        for (c, p) in coords.iter_mut().zip(proj.iter()) {
            c[axis] = *p;
        }
        explained[axis] = lambda / total;
    }
    Ok(ProjectionResult {
        coords,
        explained_variance: explained,
        method: "pca".into(),
        degenerate: rank < 2,
    })
}

fn centroid(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; rows[0].len()];
    for r in rows {
        c.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= rows.len() as f64);
    c
}

/// Cosine distance between the centroids of post-rotary K rows before and
/// from `boundary`. Ranges over `[0, 2]`.
pub fn shift_statistic(cap: &StateCapture, boundary: usize) -> Result<f64> {
    shift_between(&cap.post_rope_k, boundary)
}

/// [`shift_statistic`] on an arbitrary row set.
pub fn shift_between(rows: &[Vec<f64>], boundary: usize) -> Result<f64> {
    if boundary == 0 || boundary >= rows.len() {
        return Err(Error::Parameter(format!(
            "boundary {boundary} leaves an empty side of {} rows",
            rows.len()
        )));
    }
    let (a, b) = (centroid(&rows[..boundary]), centroid(&rows[boundary..]));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Parameter("zero centroid; cosine undefined".into()));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub layer: usize,
    pub head: usize,
    pub len: usize,
    pub boundary: usize,
    pub shift_statistic: f64,
    pub explained_variance: [f64; 2],
    pub method: String,
    pub degenerate: bool,
}

/// Writes `position,x,y` rows to `csv_path` and the summary as JSON.
pub fn write_probe(
    positions: &[usize],
    proj: &ProjectionResult,
    summary: &ProbeSummary,
    csv_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(csv_path)?);
    writeln!(w, "position,x,y")?;
    for (p, c) in positions.iter().zip(&proj.coords) {
        writeln!(w, "{p},{:.6},{:.6}", c[0], c[1])?;
    }
    w.flush()?;
    fs::write(json_path, serde_json::to_vec_pretty(summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdlm::{init_model, ModelConfig, ModelMode};
    use crate::seeding::rng_for;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, &[]);
        (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn planar_data_keeps_distances() {
        let mut rng = rng_for(3, &[]);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)])
            .collect();
        let p = project2d(&pts).unwrap();
        assert!(!p.degenerate);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                assert!((dist(p.coords[i], p.coords[j]) - d0).abs() < 1e-9);
            }
        }
        assert!((p.explained_variance[0] + p.explained_variance[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 5];
        let p = project2d(&rows).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| c == &[0.0, 0.0]));
        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let p = project2d(&line).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
        assert!(project2d(&rows[..2]).is_err());
    }

    #[test]
    fn gaussian_variance_profile_and_centering() {
        let rows = gaussian(500, 10, 8);
        let p = project2d(&rows).unwrap();
        let [a, b] = p.explained_variance;
        assert!(a + b < 1.0 && a >= b && b > 0.0);
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|x| x + 7.5).collect())
            .collect();
        let q = project2d(&shifted).unwrap();
        for (u, v) in p.coords.iter().zip(&q.coords) {
            assert!(dist(*u, *v) < 1e-9);
        }
    }

    #[test]
    fn shift_examples() {
        let mut rows = gaussian(1000, 8, 11);
        rows.iter_mut().for_each(|r| r[0] += 3.0);
        assert!(shift_between(&rows, 500).unwrap() < 0.05);

        let mut anti = vec![vec![1.0, 2.0, -1.0]; 4];
        anti.extend(vec![vec![-1.0, -2.0, 1.0]; 6]);
        assert!((shift_between(&anti, 4).unwrap() - 2.0).abs() < 1e-9);

        assert!(shift_between(&anti, 0).is_err());
        assert!(shift_between(&anti, 10).is_err());
    }

    #[test]
    fn shift_is_symmetric() {
        let rows = gaussian(30, 4, 2);
        let mut rev = rows.clone();
        rev.reverse();
        let a = shift_between(&rows, 12).unwrap();
        let b = shift_between(&rev, 18).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn capture_properties() {
        let ck = init_model(ModelConfig::toy(ModelMode::BidirectionalMdlm), 1).unwrap();
        let tokens: Vec<u32> = (0..20).map(|i| 3 + i).collect();
        let c = capture(&ck, &tokens, 1, 1).unwrap();
        assert_eq!(c.len(), 20);
        assert_eq!(c.post_rope_k[0], c.pre_rope_k[0]);
        for (a, b) in c.pre_rope_q.iter().zip(&c.post_rope_q) {
            let na: f64 = a.iter().map(|x| x * x).sum();
            let nb: f64 = b.iter().map(|x| x * x).sum();
            assert!((na - nb).abs() <= 1e-5 * na.max(1.0));
        }
        assert_eq!(capture(&ck, &tokens, 1, 1).unwrap(), c);
        let one = capture(&ck, &tokens[..1], 0, 0).unwrap();
        assert_eq!(one.pre_rope_q.len(), 1);
        assert!(matches!(capture(&ck, &tokens, 2, 0), Err(Error::Index { .. })));
        assert!(matches!(capture(&ck, &tokens, 0, 2), Err(Error::Index { .. })));
    }
}
