//! Fixed-size worker pool with results funneled back to the caller.

use std::collections::VecDeque;
use std::sync::{mpsc, Mutex};

/// Worker count from `CONFLICT_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var("CONFLICT_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `work` over `items` on up to `workers` threads. `sink` sees every
/// result on the calling thread, in completion order.
pub fn run_pool<T, R, W, S>(items: Vec<T>, workers: usize, work: W, mut sink: S)
where
    T: Send,
    R: Send,
    W: Fn(T) -> R + Sync,
    S: FnMut(R),
{
    let workers = workers.clamp(1, items.len().max(1));
    let queue = Mutex::new(VecDeque::from(items));
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (queue, work) = (&queue, &work);
            scope.spawn(move || loop {
                let Some(item) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                if tx.send(work(item)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for r in rx {
            sink(r);
        }
    });
}

/// Order-preserving parallel map.
pub fn parallel_map<T, R, W>(items: Vec<T>, workers: usize, work: W) -> Vec<R>
where
    T: Send,
    R: Send,
    W: Fn(T) -> R + Sync,
{
    let n = items.len();
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    run_pool(
        items.into_iter().enumerate().collect(),
        workers,
        |(i, t)| (i, work(t)),
        |(i, r)| out[i] = Some(r),
    );
    out.into_iter()
        .map(|r| r.expect("every item produces a result"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_keeps_order() {
        let out = parallel_map((0..50).collect(), 4, |i: u64| i * i);
        assert_eq!(out, (0..50).map(|i| i * i).collect::<Vec<_>>());
        assert!(parallel_map(Vec::<u8>::new(), 3, |i| i).is_empty());
    }
}
