//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over rayon; without
//! it every helper runs in order on the calling thread. Results are always
//! returned in index order, so callers see identical output either way.

use crate::error::{Error, Result};

/// Maps `f` over `0..n`, keeping index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Sequential reference for [`map_indexed`], always available.
pub fn map_indexed_serial<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `op` on a pool of `jobs` workers (`None` = all cores).
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: Option<usize>, op: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(op()),
        Some(0) => Err(Error::Parameter("--jobs must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Parameter(e.to_string()))?;
            Ok(pool.install(op))
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(jobs: Option<usize>, op: impl FnOnce() -> R + Send) -> Result<R> {
    if jobs == Some(0) {
        return Err(Error::Parameter("--jobs must be >= 1".into()));
    }
    Ok(op())
}

/// Worker count the parallel helpers will use.
pub fn available_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_indexed(1000, f);
        let b = map_indexed_serial(1000, f);
        assert_eq!(a, b);
        let c = with_jobs(Some(2), || map_indexed(1000, f)).unwrap();
        assert_eq!(a, c);
        assert!(with_jobs(Some(0), || ()).is_err());
    }
}
