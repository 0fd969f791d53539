//! Small shared utilities: thread-capped deterministic parallel map and
//! weight-initialization helpers.

use rand::Rng;

use crate::tensor::{Shape4, Tensor4};

/// Environment variable capping worker threads for per-image parallelism.
pub const THREADS_ENV: &str = "FNDETECT_THREADS";

/// Worker count: `FNDETECT_THREADS` if set (minimum 1), else available
/// parallelism capped at 8.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(8))
        .unwrap_or(1)
}

/// Applies `f` to every item, possibly across threads, returning results in
/// input order. The reduction is deterministic: output slot i always holds
/// f(items[i]).
pub fn parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = worker_threads().min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ptr = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                let mut guard = slots_ptr.lock().unwrap();
                guard[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

/// Kaiming-uniform init for a conv kernel (fan_in = c_in_per_group * k * k).
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: Shape4) -> Tensor4 {
    let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..shape.len())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor4::from_vec(shape, data).unwrap()
}
