//! Cardinality with deletions.
//!
//! Three sketches share the same Bernoulli sampling core:
//!
//! * [`BernoulliCardSketch`]: fixed-rate sample with the standard `|S|/p`
//!   estimator. Unbiased on non-adaptive streams, but its estimate reveals
//!   sample membership to an adaptive input source.
//! * [`RobustFixedCard`]: the same sample, with the signed sample-size changes
//!   fed through a [`TreeMechanism`] and the noisy prefix sum released.
//! * [`RobustAdaptiveCard`]: the robust design with a sample-size budget `k`.
//!   Whenever the noisy size exceeds `k - α` the rate is halved, every sampled
//!   key is kept with probability 1/2 and the size change is reported to the
//!   tree.
//!
//! A generic `Inc(x, Δ)` with `Δ > 0` is treated as `Insert(x)`, and
//! `ResetKey`/`ResetPred` as deletions.

use log::warn;

use crate::randomness::{NoiseMode, RandomSource, RngSeed};
use crate::sketch::{Diagnostics, Sketch};
use crate::stream::{Key, KeySet, Predicate, StatisticKind, UpdateOp};
use crate::tree::{ceil_log2, NodeRecord, TreeMechanism};
use crate::{Result, SketchError};

/// Unit-level sensitivity of a sample-size stream: each key epoch contributes
/// at most one `+1` and one `-1`.
pub const CARD_SENSITIVITY: f64 = 2.0;

/// Cap on rate halvings within one step of [`RobustAdaptiveCard`].
pub const MAX_ADJUSTMENTS_PER_STEP: u32 = 64;

/// Released cardinality estimate `N̂_t`. May be negative for the robust
/// sketches; consumers clamp if they need to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardEstimate {
    pub value: f64,
    pub t: u64,
}

enum SampleAction<'a> {
    Refresh(Key),
    Remove(Key),
    RemoveMatching(&'a Predicate),
    Nothing,
}

fn classify(op: &UpdateOp) -> Result<SampleAction<'_>> {
    op.validate()?;
    Ok(match op {
        UpdateOp::Insert(key) => SampleAction::Refresh(*key),
        UpdateOp::Inc { key, delta } if *delta > 0.0 => SampleAction::Refresh(*key),
        UpdateOp::Inc { .. } => SampleAction::Nothing,
        UpdateOp::Delete(key) | UpdateOp::ResetKey(key) => SampleAction::Remove(*key),
        UpdateOp::ResetPred(pred) => SampleAction::RemoveMatching(pred),
    })
}

/// Applies one operation to a Bernoulli sample at rate `p`.
fn apply_to_sample(
    sample: &mut KeySet,
    p: f64,
    rng: &mut RandomSource,
    op: &UpdateOp,
) -> Result<()> {
    match classify(op)? {
        SampleAction::Refresh(key) => {
            // Drop any previous copy, then resample.
            sample.remove(&key);
            if rng.bernoulli(p)? {
                sample.insert(key);
            }
        }
        SampleAction::Remove(key) => {
            sample.remove(&key);
        }
        SampleAction::RemoveMatching(pred) => sample.retain(|k| !pred.matches(*k)),
        SampleAction::Nothing => {}
    }
    Ok(())
}

fn check_rate(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(SketchError::invalid(format!(
            "sampling rate must lie in (0, 1], got {p}"
        )))
    }
}

/// Fixed-rate Bernoulli sample of the active keys.
#[derive(Debug, Clone)]
pub struct BernoulliCardSketch {
    sample: KeySet,
    p: f64,
    rng: RandomSource,
    t: u64,
    max_sample: usize,
}

impl BernoulliCardSketch {
    pub fn new(p: f64, seed: RngSeed) -> Result<Self> {
        check_rate(p)?;
        Ok(BernoulliCardSketch {
            sample: KeySet::default(),
            p,
            rng: RandomSource::new(seed),
            t: 0,
            max_sample: 0,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn sample_size(&self) -> usize {
        self.sample.len()
    }

    pub fn contains(&self, key: Key) -> bool {
        self.sample.contains(&key)
    }

    fn apply(&mut self, op: &UpdateOp) -> Result<()> {
        apply_to_sample(&mut self.sample, self.p, &mut self.rng, op)?;
        self.t += 1;
        self.max_sample = self.max_sample.max(self.sample.len());
        Ok(())
    }

    pub fn estimate(&self) -> f64 {
        self.sample.len() as f64 / self.p
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<CardEstimate> {
        self.apply(op)?;
        Ok(CardEstimate {
            value: self.estimate(),
            t: self.t,
        })
    }
}

impl Sketch for BernoulliCardSketch {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Cardinality
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        BernoulliCardSketch::process(self, op).map(|e| e.value)
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            sample_size: self.sample.len(),
            max_sample_size: self.max_sample,
            ..Diagnostics::default()
        }
    }
}

/// Fixed-rate sample whose size is released through the tree mechanism.
#[derive(Debug, Clone)]
pub struct RobustFixedCard {
    inner: BernoulliCardSketch,
    tree: TreeMechanism,
    prev_size: usize,
}

impl RobustFixedCard {
    pub fn new(p: f64, eps_dp: f64, capacity: u64, mode: NoiseMode, seed: RngSeed) -> Result<Self> {
        Ok(RobustFixedCard {
            inner: BernoulliCardSketch::new(p, seed.derive_named("sample"))?,
            tree: TreeMechanism::new(
                capacity,
                CARD_SENSITIVITY,
                eps_dp,
                mode,
                seed.derive_named("tree"),
            )?,
            prev_size: 0,
        })
    }

    pub fn p(&self) -> f64 {
        self.inner.p
    }

    pub fn sample_size(&self) -> usize {
        self.inner.sample_size()
    }

    pub fn contains(&self, key: Key) -> bool {
        self.inner.contains(key)
    }

    pub fn tree(&self) -> &TreeMechanism {
        &self.tree
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<CardEstimate> {
        self.inner.apply(op)?;
        let size = self.inner.sample_size();
        let u = size as f64 - self.prev_size as f64;
        self.prev_size = size;
        let noisy = self.tree.update_and_report(u)?;
        Ok(CardEstimate {
            value: noisy.value / self.inner.p,
            t: self.inner.t,
        })
    }
}

impl Sketch for RobustFixedCard {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Cardinality
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        RobustFixedCard::process(self, op).map(|e| e.value)
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            tree_counters_peak: self.tree.max_live_counters(),
            ..self.inner.diagnostics()
        }
    }

    fn enable_noise_ledger(&mut self) -> bool {
        self.tree.enable_ledger();
        true
    }

    fn noise_ledger(&self) -> Vec<NodeRecord> {
        self.tree.ledger().unwrap_or_default().to_vec()
    }
}

/// Multiplicative constants for the Θ(·) parameter settings of the
/// adjustable-rate sketch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardConstants {
    pub k_const: f64,
    pub alpha_const: f64,
}

impl Default for CardConstants {
    fn default() -> Self {
        CardConstants {
            k_const: 1.0,
            alpha_const: 1.0,
        }
    }
}

/// Parameters of [`RobustAdaptiveCard`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardParams {
    /// Sample-size budget.
    pub k: u64,
    /// Error margin kept below the budget.
    pub alpha: f64,
    pub eps_dp: f64,
    /// `k_const` actually used, after any feasibility scaling.
    pub k_const: f64,
}

/// Budget, margin and privacy parameter for accuracy `eps`, confidence
/// `delta` and horizon `horizon`:
///
/// ```text
/// k     = ⌈k_const · ε⁻² · log2(T)^{3/2} · ln(T/δ)⌉
/// α     = α_const · ε_dp⁻¹ · log2(T)^{3/2} · ln(T/δ)
/// ε_dp  = ε
/// ```
///
/// The analysis needs `k ≥ 4α`; when the constants violate it, `k_const` is
/// raised to `4 · α_const · ε` and a warning is logged.
pub fn card_params(
    eps: f64,
    delta: f64,
    horizon: u64,
    consts: CardConstants,
) -> Result<CardParams> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SketchError::invalid(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SketchError::invalid(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if horizon < 2 {
        return Err(SketchError::invalid("horizon must be at least 2"));
    }
    if !(consts.k_const > 0.0 && consts.alpha_const > 0.0) {
        return Err(SketchError::invalid("parameter constants must be positive"));
    }
    let t = horizon as f64;
    let shared = t.log2().powf(1.5) * (t / delta).ln();
    let eps_dp = eps;
    let alpha = consts.alpha_const * shared / eps_dp;
    let mut k_const = consts.k_const;
    let mut k = (k_const * shared / (eps * eps)).ceil();
    if k < 4.0 * alpha {
        let scaled = 4.0 * consts.alpha_const * eps;
        warn!(
            "k = {k} is below 4α = {}; raising k_const from {k_const} to {scaled}",
            4.0 * alpha
        );
        k_const = scaled;
        k = (k_const * shared / (eps * eps)).ceil();
    }
    Ok(CardParams {
        k: k as u64,
        alpha,
        eps_dp,
        k_const,
    })
}

/// Tree capacity for `ops` stream operations plus the rate-adjustment
/// reports of [`RobustAdaptiveCard`].
pub fn adaptive_tree_capacity(ops: u64) -> u64 {
    ops + 2 * u64::from(ceil_log2(ops.max(2))) + 1
}

/// Configuration of [`RobustAdaptiveCard`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveCardConfig {
    pub p0: f64,
    pub k: u64,
    pub alpha: f64,
    pub eps_dp: f64,
    /// Tree capacity; see [`adaptive_tree_capacity`].
    pub capacity: u64,
    pub noise: NoiseMode,
}

impl AdaptiveCardConfig {
    /// Configuration from [`card_params`] with `p0 = 1`, sized for `ops`
    /// stream operations.
    pub fn from_params(params: &CardParams, ops: u64, noise: NoiseMode) -> Self {
        AdaptiveCardConfig {
            p0: 1.0,
            k: params.k,
            alpha: params.alpha,
            eps_dp: params.eps_dp,
            capacity: adaptive_tree_capacity(ops),
            noise,
        }
    }
}

/// Robust adjustable-rate cardinality sketch.
#[derive(Debug, Clone)]
pub struct RobustAdaptiveCard {
    sample: KeySet,
    p: f64,
    k: u64,
    alpha: f64,
    tree: TreeMechanism,
    s_prev: usize,
    last_report: f64,
    halvings: u32,
    capped: u32,
    max_sample: usize,
    rng: RandomSource,
    t: u64,
}

impl RobustAdaptiveCard {
    pub fn new(cfg: AdaptiveCardConfig, seed: RngSeed) -> Result<Self> {
        check_rate(cfg.p0)?;
        if cfg.k == 0 {
            return Err(SketchError::invalid("sample budget k must be positive"));
        }
        if !(cfg.alpha >= 0.0) || !cfg.alpha.is_finite() {
            return Err(SketchError::invalid(format!(
                "error margin must be finite and nonnegative, got {}",
                cfg.alpha
            )));
        }
        Ok(RobustAdaptiveCard {
            sample: KeySet::default(),
            p: cfg.p0,
            k: cfg.k,
            alpha: cfg.alpha,
            tree: TreeMechanism::new(
                cfg.capacity,
                CARD_SENSITIVITY,
                cfg.eps_dp,
                cfg.noise,
                seed.derive_named("tree"),
            )?,
            s_prev: 0,
            last_report: 0.0,
            halvings: 0,
            capped: 0,
            max_sample: 0,
            rng: RandomSource::new(seed.derive_named("sample")),
            t: 0,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn sample_size(&self) -> usize {
        self.sample.len()
    }

    pub fn contains(&self, key: Key) -> bool {
        self.sample.contains(&key)
    }

    /// Last noisy sample size released by the tree.
    pub fn last_report(&self) -> f64 {
        self.last_report
    }

    pub fn tree(&self) -> &TreeMechanism {
        &self.tree
    }

    fn report_size_change(&mut self) -> Result<f64> {
        let s = self.sample.len();
        let u = s as f64 - self.s_prev as f64;
        self.s_prev = s;
        self.last_report = self.tree.update_and_report(u)?.value;
        Ok(self.last_report)
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<CardEstimate> {
        apply_to_sample(&mut self.sample, self.p, &mut self.rng, op)?;
        self.t += 1;
        self.max_sample = self.max_sample.max(self.sample.len());
        let mut noisy = self.report_size_change()?;

        let threshold = self.k as f64 - self.alpha;
        let mut rounds = 0;
        while noisy > threshold {
            if rounds == MAX_ADJUSTMENTS_PER_STEP {
                self.capped += 1;
                warn!(
                    "step {}: rate adjustment stopped after {rounds} halvings (noisy size {noisy})",
                    self.t
                );
                break;
            }
            self.p /= 2.0;
            let rng = &mut self.rng;
            self.sample.retain(|_| rng.coin());
            self.halvings += 1;
            rounds += 1;
            noisy = self.report_size_change()?;
        }
        Ok(CardEstimate {
            value: noisy / self.p,
            t: self.t,
        })
    }
}

impl Sketch for RobustAdaptiveCard {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Cardinality
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        RobustAdaptiveCard::process(self, op).map(|e| e.value)
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            sample_size: self.sample.len(),
            max_sample_size: self.max_sample,
            halvings: self.halvings,
            tree_counters_peak: self.tree.max_live_counters(),
            capped_adjustments: self.capped,
        }
    }

    fn enable_noise_ledger(&mut self) -> bool {
        self.tree.enable_ledger();
        true
    }

    fn noise_ledger(&self) -> Vec<NodeRecord> {
        self.tree.ledger().unwrap_or_default().to_vec()
    }
}
