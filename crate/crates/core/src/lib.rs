//! Spurious-motif graph benchmarks, a two-stage interpretable GNN classifier,
//! and self-reflective refinement of its edge masks.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod plots;
pub mod reflection;
pub mod training;

pub use error::{Error, Result, Stage};

/// Keeps freed heap memory mapped between training steps. Glibc otherwise
/// returns it to the kernel after each large tensor is dropped, and the
/// resulting page faults dominated runtime. No-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}
