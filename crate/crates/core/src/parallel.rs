//! Bounded, order-preserving parallel map.
//!
//! Work items are claimed from an atomic cursor and results land in their
//! input slot, so the output (and the error reported, if any) is identical
//! for every worker count. A failure stops further claims; already-running
//! items finish.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Apply `f` to every item with up to `workers` threads.
///
/// Returns the first error in input order, or all results in input order.
pub fn try_map<T, R, E, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }

    let cursor = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<R, E>>>> = items.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::Acquire) {
                    break;
                }
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                if out.is_err() {
                    failed.store(true, Ordering::Release);
                }
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });

    let mut results = Vec::with_capacity(items.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(Ok(r)) => results.push(r),
            Some(Err(e)) => return Err(e),
            // Unclaimed slot after an earlier failure.
            None => break,
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let out = try_map(4, &items, |_, &x| Ok::<_, ()>(x * 2)).unwrap();
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn single_worker_matches_parallel() {
        let items: Vec<u64> = (0..37).collect();
        let a = try_map(1, &items, |i, &x| Ok::<_, ()>(x + i as u64)).unwrap();
        let b = try_map(8, &items, |i, &x| Ok::<_, ()>(x + i as u64)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reports_first_error_by_index() {
        let items: Vec<u64> = (0..64).collect();
        let err =
            try_map(4, &items, |_, &x| if x % 10 == 7 { Err(x) } else { Ok(()) }).unwrap_err();
        assert_eq!(err, 7);
    }

    #[test]
    fn empty_input() {
        let items: Vec<u64> = vec![];
        let out = try_map(4, &items, |_, &x| Ok::<_, ()>(x)).unwrap();
        assert!(out.is_empty());
    }
}
