//! Data-parallel map over independent jobs.
//!
//! With the `parallel` feature (on by default) jobs run on the rayon pool;
//! without it they run in order on the calling thread. Output order always
//! matches input order, so results do not depend on the backend.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether jobs run on a thread pool in this build.
pub const PARALLEL: bool = cfg!(feature = "parallel");

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Sequential map with the same signature, for comparisons.
pub fn map_sequential<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Like [`map`] for fallible jobs; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: Vec<T>, f: F) -> Result<Vec<R>, E>
where
    T: Send,
    R: Send,
    E: Send,
    F: Fn(T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}
