//! Segmentation networks built from multi-kernel-size convolution blocks.
//!
//! The crate is a small self-contained framework: a tape-based autodiff core
//! ([`autograd`]), the convolution blocks ([`nn`]), the U-Net family
//! ([`arch`]), segmentation metrics ([`metrics`]), the preprocessing and
//! augmentation pipeline ([`data`]), Adam training with a plateau schedule
//! ([`train`]) and the `mixseg` command-line front end ([`cli`]).

pub mod arch;
pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};

static WORKER_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Worker threads for batch-parallel kernels: `MIXSEG_THREADS`, default 1.
pub fn worker_threads() -> usize {
    match WORKER_THREADS.load(Ordering::Relaxed) {
        0 => {
            let n = std::env::var("MIXSEG_THREADS")
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1);
            WORKER_THREADS.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

/// Overrides `MIXSEG_THREADS` for the rest of the process.
pub fn set_worker_threads(n: usize) {
    WORKER_THREADS.store(n.max(1), Ordering::Relaxed);
}
