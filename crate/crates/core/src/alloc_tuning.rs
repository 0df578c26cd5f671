//! Keeps multi-megabyte tensor buffers inside the malloc arena instead of
//! round-tripping through mmap/munmap on every tape step. Safe to call any
//! number of times.

use std::sync::Once;

static TUNE: Once = Once::new();

pub fn tune_allocator() {
    TUNE.call_once(|| unsafe {
        // serve large tensor blocks from the arena free lists
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        // never trim freed arena memory back to the kernel mid-run
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}
