//! Execution mode for batch operations.
//!
//! With the `parallel` feature (on by default) [`Mode::Parallel`] fans out over
//! the rayon global pool; without it every batch runs sequentially and
//! `Parallel` is accepted but ignored. Results always come back in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Sequential,
    #[default]
    Parallel,
}

impl Mode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Mode::Parallel
    }
}

pub fn map<T, R, F>(mode: Mode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

pub fn map_owned<T, R, F>(mode: Mode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.into_par_iter().map(f).collect();
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}
