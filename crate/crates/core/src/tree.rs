//! Streaming binary tree mechanism for noisy prefix sums.
//!
//! Time steps `1..=capacity` are the leaves of a dyadic forest with
//! `H = ⌈log2 capacity⌉` levels; a node at level `ℓ` covers `2^ℓ` consecutive
//! steps. Each node gets one Laplace draw when it is completed, and the
//! released prefix sum at step `t` adds the noisy sums of the nodes in the
//! binary decomposition of `[1, t]`. Completed nodes are folded into their
//! parent as soon as the parent completes, so at most `H + 1` noisy counters
//! are alive at once.

use std::io::Write;

use crate::randomness::{NoiseMode, RandomSource, RngSeed};
use crate::{Result, SketchError};

/// A completed tree node, as recorded by the noise ledger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeRecord {
    pub level: u32,
    /// First covered step (1-based).
    pub start: u64,
    pub len: u64,
    /// Exact sum of the covered updates.
    pub sum: f64,
    pub noise: f64,
}

impl NodeRecord {
    #[inline]
    pub fn covers(&self, step: u64) -> bool {
        self.start <= step && step < self.start + self.len
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    start: u64,
    sum: f64,
    noise: f64,
}

/// Noisy prefix sum released at step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyPrefix {
    pub value: f64,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct TreeMechanism {
    capacity: u64,
    levels: u32,
    t: u64,
    lambda: f64,
    sensitivity: f64,
    eps_dp: f64,
    mode: NoiseMode,
    rng: RandomSource,
    /// Completed nodes below the top level that are part of the current
    /// prefix decomposition; at most one per level.
    frontier: Vec<Option<Node>>,
    /// Completed top-level nodes, which never fold.
    top: Vec<Node>,
    max_live: usize,
    ledger: Option<Vec<NodeRecord>>,
}

impl TreeMechanism {
    /// Creates a mechanism for up to `capacity` updates with unit-level
    /// sensitivity `sensitivity` and privacy parameter `eps_dp`.
    ///
    /// The Laplace scale is `sensitivity · log2(capacity) / eps_dp`; for
    /// `capacity = 1` the single node uses `sensitivity / eps_dp`.
    pub fn new(
        capacity: u64,
        sensitivity: f64,
        eps_dp: f64,
        mode: NoiseMode,
        seed: RngSeed,
    ) -> Result<Self> {
        if capacity < 1 {
            return Err(SketchError::invalid("tree capacity must be at least 1"));
        }
        if !(sensitivity > 0.0) || !sensitivity.is_finite() {
            return Err(SketchError::invalid(format!(
                "tree sensitivity must be positive, got {sensitivity}"
            )));
        }
        if !(eps_dp > 0.0) || !eps_dp.is_finite() {
            return Err(SketchError::invalid(format!(
                "tree privacy parameter must be positive, got {eps_dp}"
            )));
        }
        let levels = ceil_log2(capacity).max(1);
        let lambda = if capacity == 1 {
            sensitivity / eps_dp
        } else {
            sensitivity * (capacity as f64).log2() / eps_dp
        };
        Ok(TreeMechanism {
            capacity,
            levels,
            t: 0,
            lambda,
            sensitivity,
            eps_dp,
            mode,
            rng: RandomSource::new(seed),
            frontier: vec![None; levels as usize - 1],
            top: Vec::new(),
            max_live: 0,
            ledger: None,
        })
    }

    /// Starts recording every completed node. Test and diagnostic use.
    pub fn enable_ledger(&mut self) {
        if self.ledger.is_none() {
            self.ledger = Some(Vec::new());
        }
    }

    pub fn ledger(&self) -> Option<&[NodeRecord]> {
        self.ledger.as_deref()
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn eps_dp(&self) -> f64 {
        self.eps_dp
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn remaining(&self) -> u64 {
        self.capacity - self.t
    }

    /// Consumes `u` as the next update and releases the noisy prefix sum.
    pub fn update_and_report(&mut self, u: f64) -> Result<NoisyPrefix> {
        if self.t >= self.capacity {
            return Err(SketchError::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        self.t += 1;
        let top_level = self.levels - 1;
        let mut sum = u;
        let mut start = self.t;
        let mut level = 0;
        while level < top_level {
            match self.frontier[level as usize].take() {
                Some(child) => {
                    sum += child.sum;
                    start = child.start;
                    level += 1;
                }
                None => break,
            }
        }
        let noise = self.rng.laplace(self.lambda, self.mode)?;
        let node = Node { start, sum, noise };
        if let Some(ledger) = self.ledger.as_mut() {
            ledger.push(NodeRecord {
                level,
                start,
                len: 1 << level,
                sum,
                noise,
            });
        }
        if level < top_level {
            self.frontier[level as usize] = Some(node);
        } else {
            self.top.push(node);
        }
        self.max_live = self.max_live.max(self.live_counters());
        Ok(NoisyPrefix {
            value: self.report(),
            t: self.t,
        })
    }

    /// Noisy prefix sum over the steps consumed so far (0 before any update).
    pub fn report(&self) -> f64 {
        let top: f64 = self.top.iter().map(|n| n.sum + n.noise).sum();
        let below: f64 = self
            .frontier
            .iter()
            .rev()
            .flatten()
            .map(|n| n.sum + n.noise)
            .sum();
        top + below
    }

    pub fn live_counters(&self) -> usize {
        self.top.len() + self.frontier.iter().filter(|n| n.is_some()).count()
    }

    /// Historical maximum of [`TreeMechanism::live_counters`].
    pub fn max_live_counters(&self) -> usize {
        self.max_live
    }

    /// Writes the node ledger as CSV (`node_level,node_start,noise`).
    pub fn write_ledger_csv<W: Write>(&self, out: W) -> Result<()> {
        write_node_csv(self.ledger().unwrap_or_default(), out)
    }
}

/// Writes node records in the ledger CSV layout.
pub fn write_node_csv<W: Write>(records: &[NodeRecord], mut out: W) -> Result<()> {
    writeln!(out, "node_level,node_start,noise")?;
    for rec in records {
        writeln!(out, "{},{},{}", rec.level, rec.start, rec.noise)?;
    }
    Ok(())
}

/// `Σ_v |Σ_{t ∈ I_v} u_t|` over released nodes for one unit's contributions
/// `(step, u)`: the ℓ1 change of the node-sum vector when the unit is removed.
pub fn unit_node_sensitivity(nodes: &[NodeRecord], contributions: &[(u64, f64)]) -> f64 {
    nodes
        .iter()
        .map(|node| {
            contributions
                .iter()
                .filter(|(step, _)| node.covers(*step))
                .map(|(_, u)| *u)
                .sum::<f64>()
                .abs()
        })
        .sum()
}

pub(crate) fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}
