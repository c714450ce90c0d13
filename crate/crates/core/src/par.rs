use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item on up to `workers` threads and returns the
/// results in input order. When `f` returns `Err` and `stop_on_err` is set,
/// workers stop picking up new items; unprocessed slots come back as `None`.
pub(crate) fn map_ordered<T, R, E, F>(
    items: &[T],
    workers: usize,
    stop_on_err: bool,
    f: F,
) -> Vec<Option<Result<R, E>>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let r = f(i, item);
            let failed = r.is_err();
            out.push(Some(r));
            if failed && stop_on_err {
                break;
            }
        }
        out.resize_with(items.len(), || None);
        return out;
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R, E>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                if r.is_err() && stop_on_err {
                    stop.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned")
}
