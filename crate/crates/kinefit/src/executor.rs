//! Multi-threaded trial evaluation.

use std::num::NonZeroUsize;
use std::thread;

use kinefit_core::fitting::TrialExecutor;

/// Runs trials on scoped worker threads, each taking a contiguous block of
/// trial indices. Results come back in trial order, so fits match
/// [`kinefit_core::fitting::Sequential`] bit for bit.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: NonZeroUsize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self { threads: NonZeroUsize::new(threads).unwrap_or(NonZeroUsize::MIN) }
    }

    /// One thread per available core.
    pub fn available() -> Self {
        Self { threads: thread::available_parallelism().unwrap_or(NonZeroUsize::MIN) }
    }
}

impl TrialExecutor for Threaded {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        let workers = self.threads.get().min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        let chunk = n.div_ceil(workers);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|lo| s.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Vec<R>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("trial worker panicked")).collect()
        })
    }
}
