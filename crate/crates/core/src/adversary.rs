//! Input sources for duels against a sketch.
//!
//! An [`Adversary`] sees only the released estimates. The two adaptive attacks
//! insert fresh keys and watch for the jump a sampled insert causes in the
//! standard `|S|/p` estimator:
//!
//! * [`AdversaryKind::Reinsertion`] re-inserts each key that appeared to be
//!   sampled, once, so it is resampled and kept only with probability `p²`.
//! * [`AdversaryKind::SampleAndDelete`] deletes each key that appeared to be
//!   sampled, which empties the sample while most active keys are unsampled.
//!
//! Replayed and generated streams ignore the estimates.

use serde::{Deserialize, Serialize};

use crate::stream::{Key, UpdateOp};

/// `1` iff `cur − prev > tol`.
#[inline]
pub fn detect_change(prev: f64, cur: f64, tol: f64) -> bool {
    cur - prev > tol
}

/// Tolerance that separates a sampled insert (a jump of exactly `1/p`) from
/// an unsampled one under the standard estimator.
pub fn default_tolerance(p: f64) -> f64 {
    (1.0 / (2.0 * p) - f64::EPSILON).max(0.0)
}

/// The adaptive attacks selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Reinsert,
    SampleDelete,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryKind {
    Reinsertion,
    SampleAndDelete,
    /// Emits a recorded stream verbatim.
    Replay(Vec<UpdateOp>),
    /// Emits a pre-generated stream verbatim.
    NonAdaptive(Vec<UpdateOp>),
}

#[derive(Debug, Clone)]
pub struct Adversary {
    kind: AdversaryKind,
    /// Fresh-key rounds for the adaptive attacks.
    rounds: u64,
    rounds_done: u64,
    next_key: u64,
    tol: f64,
    /// Key inserted in the previous step, with the estimate seen before it.
    awaiting: Option<(Key, f64)>,
    last_estimate: f64,
    position: usize,
}

impl Adversary {
    /// An adaptive attack with `rounds` fresh-key inserts. Each conditional
    /// follow-up costs one more step, so the stream has between `rounds` and
    /// `2 · rounds` operations.
    pub fn attack(kind: AttackKind, rounds: u64, tol: f64) -> Self {
        let kind = match kind {
            AttackKind::Reinsert => AdversaryKind::Reinsertion,
            AttackKind::SampleDelete => AdversaryKind::SampleAndDelete,
        };
        Self::with_kind(kind, rounds, tol)
    }

    pub fn replay(ops: Vec<UpdateOp>) -> Self {
        Self::with_kind(AdversaryKind::Replay(ops), 0, 0.0)
    }

    pub fn non_adaptive(ops: Vec<UpdateOp>) -> Self {
        Self::with_kind(AdversaryKind::NonAdaptive(ops), 0, 0.0)
    }

    fn with_kind(kind: AdversaryKind, rounds: u64, tol: f64) -> Self {
        Adversary {
            kind,
            rounds,
            rounds_done: 0,
            next_key: 1,
            tol: tol.max(0.0),
            awaiting: None,
            last_estimate: 0.0,
            position: 0,
        }
    }

    pub fn kind(&self) -> &AdversaryKind {
        &self.kind
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    /// Upper bound on the number of operations this source emits.
    pub fn max_ops(&self) -> u64 {
        match &self.kind {
            AdversaryKind::Reinsertion | AdversaryKind::SampleAndDelete => 2 * self.rounds,
            AdversaryKind::Replay(ops) | AdversaryKind::NonAdaptive(ops) => ops.len() as u64,
        }
    }

    /// Next operation given the sketch's reply to the previous one (`None`
    /// before the first step). Returns `None` when the source is exhausted.
    pub fn next_op(&mut self, last_estimate: Option<f64>) -> Option<UpdateOp> {
        if let Some(est) = last_estimate {
            self.last_estimate = est;
        }
        match &self.kind {
            AdversaryKind::Replay(ops) | AdversaryKind::NonAdaptive(ops) => {
                let op = ops.get(self.position).cloned();
                self.position += usize::from(op.is_some());
                op
            }
            AdversaryKind::Reinsertion | AdversaryKind::SampleAndDelete => {
                if let Some((key, before)) = self.awaiting.take() {
                    if detect_change(before, self.last_estimate, self.tol) {
                        return Some(match self.kind {
                            AdversaryKind::Reinsertion => UpdateOp::Insert(key),
                            _ => UpdateOp::Delete(key),
                        });
                    }
                }
                if self.rounds_done == self.rounds {
                    return None;
                }
                self.rounds_done += 1;
                let key = Key(self.next_key);
                self.next_key += 1;
                self.awaiting = Some((key, self.last_estimate));
                Some(UpdateOp::Insert(key))
            }
        }
    }
}

/// Final state of a duel, read off the harness trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuelOutcome {
    pub final_estimate: f64,
    pub final_truth: f64,
    pub truth_trace_max: f64,
    pub bias: f64,
}

impl DuelOutcome {
    pub fn from_trace(trace: &[crate::harness::TraceRecord]) -> Self {
        let (final_estimate, final_truth) =
            trace.last().map_or((0.0, 0.0), |r| (r.estimate, r.truth));
        DuelOutcome {
            final_estimate,
            final_truth,
            truth_trace_max: trace.iter().map(|r| r.truth).fold(0.0, f64::max),
            bias: final_estimate - final_truth,
        }
    }
}
