//! Deterministic batch parallelism. Items are computed independently
//! (possibly on several threads) and merged in index order, so results are
//! identical for any worker count. `HSF_NUM_THREADS` caps the pool.

pub fn worker_threads(n_items: usize) -> usize {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("HSF_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(avail);
    cap.min(n_items).max(1)
}

pub(crate) fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = worker_threads(n);
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                scope.spawn(move || {
                    let mut res = Vec::new();
                    let mut i = t;
                    while i < n {
                        res.push((i, f(i)));
                        i += threads;
                    }
                    res
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker thread panicked") {
                out[i] = Some(v);
            }
        }
    });
    out.into_iter().map(|v| v.expect("all items computed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_order_is_index_order() {
        let vals = run_indexed(17, |i| i * i);
        assert_eq!(vals, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }
}
