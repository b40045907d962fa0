//! Deterministic batch parallelism: items are mapped on worker threads but
//! results come back indexed, so any reduction happens in item order and the
//! outcome is independent of the thread count.

pub fn map_indexed<T: Sync, O: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> O + Sync,
) -> Vec<O> {
    let n = items.len();
    if threads <= 1 || n <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let workers = threads.min(n);
    let mut out: Vec<Option<O>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest: &mut [Option<O>] = &mut out;
        let mut start = 0;
        while start < n {
            let take = chunk.min(n - start);
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let base = start;
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(base + off, &items[base + off]));
                }
            });
            start += take;
        }
    });
    out.into_iter().map(|o| o.expect("worker missed slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_thread_count() {
        let items: Vec<usize> = (0..23).collect();
        let seq = map_indexed(&items, 1, |i, &x| i * 100 + x);
        for threads in [2, 3, 8] {
            assert_eq!(map_indexed(&items, threads, |i, &x| i * 100 + x), seq);
        }
    }
}
