//! The common interface every streaming estimator implements.

use crate::stream::{StatisticKind, UpdateOp};
use crate::tree::NodeRecord;
use crate::Result;

/// Counters a sketch exposes for experiment metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Diagnostics {
    pub sample_size: usize,
    pub max_sample_size: usize,
    pub halvings: u32,
    pub tree_counters_peak: usize,
    /// Steps where the rate-adjustment loop hit its per-step cap.
    pub capped_adjustments: u32,
}

/// A sketch consuming resettable stream operations and releasing an estimate
/// after every operation.
pub trait Sketch: Send {
    /// The statistic the estimate targets.
    fn statistic(&self) -> StatisticKind;

    /// Processes one operation and returns the released estimate.
    fn process(&mut self, op: &UpdateOp) -> Result<f64>;

    fn diagnostics(&self) -> Diagnostics;

    /// Turns on recording of tree-mechanism node noise, when the sketch has
    /// a tree. Returns whether a ledger is now being kept.
    fn enable_noise_ledger(&mut self) -> bool {
        false
    }

    fn noise_ledger(&self) -> Vec<NodeRecord> {
        Vec::new()
    }
}
