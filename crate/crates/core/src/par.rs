//! Data-parallel map helpers. With the `parallel` feature (the default)
//! the maps run on rayon and preserve input order, so results are
//! identical to the sequential fallback compiled without the feature.
//! The explicitly sequential variant stays available in both builds as a
//! benchmark baseline.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Bounded-width parallel map for rate-limited work such as remote
/// inference calls. At most `width` items are in flight at once.
pub fn map_indexed_bounded<T, U, F>(items: &[T], width: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(width.max(1))
            .build()
            .expect("thread pool construction");
        pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = width;
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Always-sequential map, the baseline the bench suite compares against.
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
