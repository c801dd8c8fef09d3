use serde::Serialize;

/// Instrumentation for complexity measurements.
///
/// Counts are monotone during a pass; call [`OpCounter::reset`] between passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    /// Node pairs (i, j) whose interaction was evaluated.
    pub pairwise: u64,
    /// Multiply-accumulate operations.
    pub macs: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn add_pairwise(&mut self, n: u64) {
        self.pairwise += n;
    }

    pub fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Component-wise difference `self - earlier`.
    pub fn since(&self, earlier: &OpCounter) -> OpCounter {
        OpCounter {
            pairwise: self.pairwise - earlier.pairwise,
            macs: self.macs - earlier.macs,
        }
    }
}
