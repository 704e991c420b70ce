//! Worker-thread control shared by all data-parallel loops.
//!
//! Every hot loop in the crate (projection, backprojection, FDK, SQS updates,
//! INR ray batches) dispatches through [`sequential`]: with an effective
//! thread count of 1 the pure sequential code path runs, which is bitwise
//! reproducible from run to run. With more threads the rayon path runs;
//! floating-point reductions may then reorder, so multi-threaded results are
//! only reproducible up to summation order.
//!
//! Compiling without the `parallel` feature removes rayon entirely and every
//! loop takes the sequential path regardless of [`set_threads`].

use std::sync::atomic::{AtomicUsize, Ordering};

/// Requested worker count; 0 means "all available cores".
static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps worker parallelism globally. `0` selects all available cores,
/// `1` forces the deterministic sequential path.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::SeqCst);
    #[cfg(feature = "parallel")]
    pool::invalidate();
}

/// The thread count the next parallel region will use.
pub fn effective_threads() -> usize {
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
    #[cfg(feature = "parallel")]
    {
        match THREADS.load(Ordering::SeqCst) {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// True when loops must take the sequential code path.
pub(crate) fn sequential() -> bool {
    effective_threads() == 1
}

#[cfg(feature = "parallel")]
mod pool {
    use std::sync::{Arc, Mutex};

    use super::effective_threads;

    static POOL: Mutex<Option<(usize, Arc<rayon::ThreadPool>)>> = Mutex::new(None);

    pub(super) fn invalidate() {
        *POOL.lock().unwrap() = None;
    }

    pub(crate) fn current() -> Arc<rayon::ThreadPool> {
        let want = effective_threads();
        let mut guard = POOL.lock().unwrap();
        match &*guard {
            Some((n, pool)) if *n == want => Arc::clone(pool),
            _ => {
                let pool = Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(want)
                        .build()
                        .expect("failed to build worker pool"),
                );
                *guard = Some((want, Arc::clone(&pool)));
                pool
            }
        }
    }
}

/// Runs `f` inside the crate's worker pool so `par_iter` in `f` uses the
/// configured thread count.
#[cfg(feature = "parallel")]
pub(crate) fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool::current().install(f)
}

#[cfg(test)]
pub(crate) mod test_support {
    //! Unit tests that pin the thread count must hold this guard; it
    //! serializes them against each other and restores auto threading on
    //! drop.

    use std::sync::{Mutex, MutexGuard};

    static LOCK: Mutex<()> = Mutex::new(());

    pub(crate) struct SingleThread(#[allow(dead_code)] MutexGuard<'static, ()>);

    impl Drop for SingleThread {
        fn drop(&mut self) {
            super::set_threads(0);
        }
    }

    pub(crate) fn single_thread() -> SingleThread {
        let guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        super::set_threads(1);
        SingleThread(guard)
    }
}
