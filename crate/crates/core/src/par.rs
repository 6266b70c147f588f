//! Data-parallel map over independent items, with a sequential fallback.
//!
//! Compiled with the `parallel` feature (default), [`par_map`] fans out over
//! the rayon thread pool; without it, both functions reduce to plain
//! iteration. Output order always matches input order, so results are
//! identical either way — per-item work must be pure with respect to shared
//! state, which every call site in this crate guarantees.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Indexed variant of [`par_map`]; `f` receives `(index, item)`.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Always-sequential map, kept for benchmarking against [`par_map`].
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<u64> = (0..257).collect();
        let doubled = par_map(&xs, |x| x * 2);
        let expected = seq_map(&xs, |x| x * 2);
        assert_eq!(doubled, expected);
    }

    #[test]
    fn indexed_map_matches_enumerate() {
        let xs = vec![5u64, 7, 9];
        let out = par_map_indexed(&xs, |i, x| i as u64 + x);
        assert_eq!(out, vec![5, 8, 11]);
    }
}
