//! Thread-local recycling of large `f64` buffers. Training allocates and
//! frees arrays of identical sizes every step; reusing them avoids paying
//! fresh-page faults each time.

use std::cell::RefCell;

/// Buffers shorter than this go straight to the allocator.
const MIN_POOLED: usize = 1 << 15;
const MAX_POOLED_BYTES: usize = 1 << 30;

#[derive(Default)]
struct Pool {
    free: Vec<Vec<f64>>,
    bytes: usize,
}

thread_local! {
    static POOL: RefCell<Pool> = RefCell::new(Pool::default());
}

/// An empty vector with capacity for at least `len` values.
pub(crate) fn take_empty(len: usize) -> Vec<f64> {
    if len < MIN_POOLED {
        return Vec::with_capacity(len);
    }
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        let best = p
            .free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len && v.capacity() <= 2 * len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        match best {
            Some(i) => {
                let mut v = p.free.swap_remove(i);
                p.bytes -= v.capacity() * 8;
                v.clear();
                v
            }
            None => Vec::with_capacity(len),
        }
    })
}

pub(crate) fn take_zeroed(len: usize) -> Vec<f64> {
    let mut v = take_empty(len);
    v.resize(len, 0.0);
    v
}

/// Returns a buffer for reuse; dropped if the pool is full.
pub(crate) fn give(v: Vec<f64>) {
    if v.capacity() < MIN_POOLED {
        return;
    }
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        let bytes = v.capacity() * 8;
        if p.bytes + bytes <= MAX_POOLED_BYTES {
            p.bytes += bytes;
            p.free.push(v);
        }
    });
}
