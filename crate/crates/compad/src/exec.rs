//! Scoped-thread batch executor.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use compad_core::training::{BatchExecutor, ChunkStats};
use compad_core::Result;

/// Runs jobs on up to `threads` scoped workers. Results are returned in job
/// order, so merged gradients do not depend on the thread count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl BatchExecutor for Threaded {
    fn run(&self, jobs: usize, job: &(dyn Fn(usize) -> Result<ChunkStats> + Sync)) -> Vec<Result<ChunkStats>> {
        par_map(self.threads, jobs, job)
    }
}

/// `(0..n).map(f)` on up to `threads` workers, collected in index order.
pub fn par_map<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = threads.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every index ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = par_map(4, 100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        assert!(par_map(3, 0, |i| i).is_empty());
    }
}
