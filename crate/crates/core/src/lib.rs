//! Retrieval-augmented motion adaptation for image-to-video generation,
//! built end to end on a synthetic moving-shapes corpus whose ground-truth
//! motion makes every stage checkable.

pub mod autograd;
pub mod cama;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod resampler;
pub mod retrieval;

pub use error::{Error, Result};

/// Keeps glibc from returning every large temporary to the kernel. Training
/// allocates and frees many mid-sized matrices per step; with the default
/// dynamic mmap threshold each of those becomes an mmap/munmap pair.
/// Idempotent; a no-op on other allocators.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
        });
    }
}
