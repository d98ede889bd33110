use std::num::NonZeroUsize;

use descap_core::objectives::BatchRunner;
use descap_core::Result;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "IIT_TRAINER_THREADS";

/// Splits per-example work into contiguous chunks over scoped threads.
/// Results are reassembled in index order, so the output does not depend
/// on the thread count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: NonZeroUsize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self {
            threads: NonZeroUsize::new(threads).unwrap_or(NonZeroUsize::MIN),
        }
    }

    /// `--threads` if given, else `IIT_TRAINER_THREADS`, else the number of
    /// available cores.
    pub fn from_flag(flag: Option<usize>) -> Self {
        let n = flag
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get));
        Self::new(n)
    }

    pub fn threads(&self) -> usize {
        self.threads.get()
    }
}

impl BatchRunner for Threaded {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        let workers = self.threads.get().min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        let chunk = n.div_ceil(workers);
        let f = &f;
        let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = w * chunk..((w + 1) * chunk).min(n);
                    s.spawn(move || range.map(f).collect::<Result<Vec<T>>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
