//! Per-encoder work can run on separate threads; results are always
//! assembled in input order, so the thread count never changes the output.
//! `MERV_THREADS` caps the number of worker threads (1 disables threading).

use std::env;

pub fn thread_cap() -> usize {
    match env::var("MERV_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

/// Maps `f` over the items, possibly on worker threads, preserving input order.
pub fn ordered_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let cap = thread_cap();
    let n = items.len();
    if cap <= 1 || n <= 1 {
        return items.into_iter().map(f).collect();
    }

    let chunk_len = n.div_ceil(cap);
    let mut chunks: Vec<Vec<(usize, T)>> = Vec::new();
    let mut current: Vec<(usize, T)> = Vec::with_capacity(chunk_len);
    for pair in items.into_iter().enumerate() {
        current.push(pair);
        if current.len() == chunk_len {
            chunks.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }

    let f = &f;
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, item)| (i, f(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::ordered_map;

    #[test]
    fn preserves_order() {
        let out = ordered_map((0..17).collect::<Vec<usize>>(), |x| x * 2);
        assert_eq!(out, (0..17).map(|x| x * 2).collect::<Vec<_>>());
    }
}
