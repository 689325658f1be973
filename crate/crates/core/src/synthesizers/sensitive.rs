use std::sync::atomic::{AtomicU64, Ordering};

use crate::dataio::Dataset;

/// Read guard around a sensitive dataset.
///
/// Trainers only see the records through [`Sensitive::release`], which they
/// call once per privacy-consuming release (one DP-SGD step, one noisy
/// histogram, one embedding). The touch count therefore has to agree with the
/// number of releases in the ledger, which the tests check.
#[derive(Debug)]
pub struct Sensitive<'a> {
    data: &'a Dataset,
    touches: AtomicU64,
}

impl<'a> Sensitive<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            data,
            touches: AtomicU64::new(0),
        }
    }

    /// Record access for one release.
    pub fn release(&self) -> &'a Dataset {
        self.touches.fetch_add(1, Ordering::Relaxed);
        self.data
    }

    pub fn touches(&self) -> u64 {
        self.touches.load(Ordering::Relaxed)
    }

    // Shape metadata is treated as public.

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.feature_dim()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }
}
