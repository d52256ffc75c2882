//! Sum over resettable streams.
//!
//! [`ResettableSumSketch`] is sample-and-hold: a key enters the sample when an
//! increment beats a fresh `Exp(mean τ)` draw, after which every increment is
//! counted exactly until the key is reset. Each sampled key contributes
//! `τ + c` to the estimate, which is unbiased for `Σ_x v_x`.
//!
//! [`RobustSumFixed`] splits each key's contribution at a clip level `B` into
//! a protected part `min(B, c + τ)` and an overflow `max(0, c + τ − B)`. The
//! protected total is released through a [`TreeMechanism`] in units of `B`;
//! the overflow is added in the clear.
//!
//! [`PrefixMaxSum`] runs robust instances at dyadic scales `τ_k ∝ 2^k` and
//! reports from the largest one whose estimate has crossed `2^k`.

use log::debug;

use crate::randomness::{NoiseMode, RandomSource, RngSeed};
use crate::sketch::{Diagnostics, Sketch};
use crate::stream::{to_cardinality_stream, Key, KeyMap, StatisticKind, UpdateOp};
use crate::tree::{NodeRecord, TreeMechanism};
use crate::{Result, SketchError};

/// Unit-level sensitivity of the clipped stream `u_t`.
pub const SUM_SENSITIVITY: f64 = 2.0;

/// Released sum estimate `F̃_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumEstimate {
    pub value: f64,
    pub t: u64,
}

/// Counter of one key before and after an operation; `None` means not
/// sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterChange {
    pub key: Key,
    pub old: Option<f64>,
    pub new: Option<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(SketchError::invalid(format!(
            "sampling threshold must be positive and finite, got {tau}"
        )))
    }
}

/// Sample-and-hold sketch for the sum.
#[derive(Debug, Clone)]
pub struct ResettableSumSketch {
    sample: KeyMap<f64>,
    tau: f64,
    rng: RandomSource,
    total: f64,
    t: u64,
    max_sample: usize,
}

impl ResettableSumSketch {
    pub fn new(tau: f64, seed: RngSeed) -> Result<Self> {
        check_tau(tau)?;
        Ok(ResettableSumSketch {
            sample: KeyMap::default(),
            tau,
            rng: RandomSource::new(seed),
            total: 0.0,
            t: 0,
            max_sample: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sample(&self) -> &KeyMap<f64> {
        &self.sample
    }

    pub fn sample_size(&self) -> usize {
        self.sample.len()
    }

    /// Counter `c_x` of a sampled key.
    pub fn counter(&self, key: Key) -> Option<f64> {
        self.sample.get(&key).copied()
    }

    /// `Σ_{x ∈ S} (τ + c_x)`.
    pub fn estimate(&self) -> f64 {
        self.total
    }

    fn set(&mut self, key: Key, new: Option<f64>, changes: &mut Vec<CounterChange>) {
        let old = match new {
            Some(c) => self.sample.insert(key, c),
            None => self.sample.remove(&key),
        };
        if old.is_none() && new.is_none() {
            return;
        }
        let weight = |c: Option<f64>| c.map_or(0.0, |c| c + self.tau);
        self.total += weight(new) - weight(old);
        if self.sample.is_empty() {
            self.total = 0.0;
        }
        changes.push(CounterChange { key, old, new });
    }

    fn apply_primitive(&mut self, op: &UpdateOp, changes: &mut Vec<CounterChange>) {
        match op {
            UpdateOp::Inc { key, delta } => {
                if *delta == 0.0 {
                    return;
                }
                match self.sample.get(key) {
                    Some(c) => {
                        let c = c + delta;
                        self.set(*key, Some(c), changes);
                    }
                    None => {
                        let r = self.rng.exponential_unchecked(1.0 / self.tau);
                        if r < *delta {
                            self.set(*key, Some(delta - r), changes);
                        }
                    }
                }
            }
            UpdateOp::ResetKey(key) => self.set(*key, None, changes),
            UpdateOp::ResetPred(pred) => {
                let mut hits: Vec<Key> = self
                    .sample
                    .keys()
                    .filter(|k| pred.matches(**k))
                    .copied()
                    .collect();
                hits.sort_unstable();
                for key in hits {
                    self.set(key, None, changes);
                }
            }
            UpdateOp::Insert(_) | UpdateOp::Delete(_) => {
                unreachable!("expanded by to_cardinality_stream")
            }
        }
    }

    /// Applies one operation and appends every counter change to `changes`.
    pub fn apply(&mut self, op: &UpdateOp, changes: &mut Vec<CounterChange>) -> Result<()> {
        op.validate()?;
        match op {
            UpdateOp::Insert(_) | UpdateOp::Delete(_) => {
                for p in to_cardinality_stream(op) {
                    self.apply_primitive(&p, changes);
                }
            }
            _ => self.apply_primitive(op, changes),
        }
        self.t += 1;
        self.max_sample = self.max_sample.max(self.sample.len());
        Ok(())
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<SumEstimate> {
        let mut changes = Vec::new();
        self.apply(op, &mut changes)?;
        Ok(SumEstimate {
            value: self.estimate(),
            t: self.t,
        })
    }
}

impl Sketch for ResettableSumSketch {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Sum
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        ResettableSumSketch::process(self, op).map(|e| e.value)
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            sample_size: self.sample.len(),
            max_sample_size: self.max_sample,
            ..Diagnostics::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ThresholdEntry {
    value: f64,
    threshold: f64,
}

/// Entry-threshold form of [`ResettableSumSketch`].
///
/// Each key epoch draws one threshold `R ~ Exp(mean τ)` at its first
/// increment and the key counts as sampled while its accumulated value
/// exceeds `R`, contributing `v − R + τ`. It stores every key and exists to
/// check the operational sketch against.
#[derive(Debug, Clone)]
pub struct ThresholdSumSketch {
    entries: KeyMap<ThresholdEntry>,
    tau: f64,
    rng: RandomSource,
}

impl ThresholdSumSketch {
    pub fn new(tau: f64, seed: RngSeed) -> Result<Self> {
        check_tau(tau)?;
        Ok(ThresholdSumSketch {
            entries: KeyMap::default(),
            tau,
            rng: RandomSource::new(seed),
        })
    }

    fn apply_primitive(&mut self, op: &UpdateOp) {
        match op {
            UpdateOp::Inc { key, delta } => {
                if *delta == 0.0 {
                    return;
                }
                let entry = match self.entries.get_mut(key) {
                    Some(e) => e,
                    None => {
                        let threshold = self.rng.exponential_unchecked(1.0 / self.tau);
                        self.entries.entry(*key).or_insert(ThresholdEntry {
                            value: 0.0,
                            threshold,
                        })
                    }
                };
                entry.value += delta;
            }
            UpdateOp::ResetKey(key) => {
                self.entries.remove(key);
            }
            UpdateOp::ResetPred(pred) => self.entries.retain(|k, _| !pred.matches(*k)),
            UpdateOp::Insert(_) | UpdateOp::Delete(_) => {
                unreachable!("expanded by to_cardinality_stream")
            }
        }
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        op.validate()?;
        for p in to_cardinality_stream(op) {
            self.apply_primitive(&p);
        }
        Ok(self.estimate())
    }

    /// Threshold of the current epoch of `key`, if it has one.
    pub fn threshold(&self, key: Key) -> Option<f64> {
        self.entries.get(&key).map(|e| e.threshold)
    }

    pub fn value(&self, key: Key) -> f64 {
        self.entries.get(&key).map_or(0.0, |e| e.value)
    }

    pub fn is_sampled(&self, key: Key) -> bool {
        self.entries
            .get(&key)
            .is_some_and(|e| e.value > e.threshold)
    }

    /// Keys with their `(value, threshold)`, sorted by key.
    pub fn entries(&self) -> Vec<(Key, f64, f64)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(k, e)| (*k, e.value, e.threshold))
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn estimate(&self) -> f64 {
        let mut terms: Vec<f64> = self
            .entries
            .values()
            .filter(|e| e.value > e.threshold)
            .map(|e| e.value - e.threshold + self.tau)
            .collect();
        terms.sort_by(f64::total_cmp);
        terms.iter().sum()
    }
}

/// Per-unit record of the clipped stream: a unit is one epoch of one key.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitContribution {
    pub key: Key,
    pub epoch: u32,
    /// `(step, u)` pairs attributed to this unit.
    pub updates: Vec<(u64, f64)>,
}

impl UnitContribution {
    /// `Σ |u|` over the unit's updates.
    pub fn mass(&self) -> f64 {
        self.updates.iter().map(|(_, u)| u.abs()).sum()
    }
}

/// Robust fixed-rate sum sketch with clip level `B`.
#[derive(Debug, Clone)]
pub struct RobustSumFixed {
    inner: ResettableSumSketch,
    clip: f64,
    tree: TreeMechanism,
    p_hat: f64,
    d_hat: f64,
    p_hat_prev: f64,
    changes: Vec<CounterChange>,
    epochs: KeyMap<u32>,
    units: Option<KeyMap<Vec<UnitContribution>>>,
}

impl RobustSumFixed {
    pub fn new(
        tau: f64,
        clip: f64,
        eps_dp: f64,
        capacity: u64,
        mode: NoiseMode,
        seed: RngSeed,
    ) -> Result<Self> {
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(SketchError::invalid(format!(
                "clip level must be positive and finite, got {clip}"
            )));
        }
        Ok(RobustSumFixed {
            inner: ResettableSumSketch::new(tau, seed.derive_named("sample"))?,
            clip,
            tree: TreeMechanism::new(
                capacity,
                SUM_SENSITIVITY,
                eps_dp,
                mode,
                seed.derive_named("tree"),
            )?,
            p_hat: 0.0,
            d_hat: 0.0,
            p_hat_prev: 0.0,
            changes: Vec::new(),
            epochs: KeyMap::default(),
            units: None,
        })
    }

    pub fn tau(&self) -> f64 {
        self.inner.tau
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn inner(&self) -> &ResettableSumSketch {
        &self.inner
    }

    pub fn tree(&self) -> &TreeMechanism {
        &self.tree
    }

    /// Protected total `P̂_t = Σ min(B, c + τ)`.
    pub fn p_hat(&self) -> f64 {
        self.p_hat
    }

    /// Overflow `D̂_t = Σ max(0, c + τ − B)`.
    pub fn d_hat(&self) -> f64 {
        self.d_hat
    }

    /// Starts recording each unit's clipped updates. Test and diagnostic use.
    pub fn enable_unit_ledger(&mut self) {
        if self.units.is_none() {
            self.units = Some(KeyMap::default());
        }
    }

    /// Recorded units, sorted by `(key, epoch)`.
    pub fn unit_ledger(&self) -> Vec<UnitContribution> {
        let mut out: Vec<UnitContribution> = self
            .units
            .iter()
            .flat_map(|m| m.values().flatten().cloned())
            .collect();
        out.sort_by_key(|u| (u.key, u.epoch));
        out
    }

    fn split(&self, c: Option<f64>) -> (f64, f64) {
        match c {
            Some(c) => {
                let w = c + self.inner.tau;
                (w.min(self.clip), (w - self.clip).max(0.0))
            }
            None => (0.0, 0.0),
        }
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<SumEstimate> {
        self.changes.clear();
        let mut changes = std::mem::take(&mut self.changes);
        self.inner.apply(op, &mut changes)?;
        let step = self.tree.step() + 1;
        for ch in &changes {
            let (p_old, d_old) = self.split(ch.old);
            let (p_new, d_new) = self.split(ch.new);
            self.p_hat += p_new - p_old;
            self.d_hat += d_new - d_old;
            let epoch = self.epochs.get(&ch.key).copied().unwrap_or(0);
            if let Some(units) = self.units.as_mut() {
                let list = units.entry(ch.key).or_default();
                if list.last().is_none_or(|u| u.epoch != epoch) {
                    list.push(UnitContribution {
                        key: ch.key,
                        epoch,
                        updates: Vec::new(),
                    });
                }
                if let Some(unit) = list.last_mut() {
                    unit.updates.push((step, (p_new - p_old) / self.clip));
                }
            }
            if ch.new.is_none() {
                self.epochs.insert(ch.key, epoch + 1);
            }
        }
        self.changes = changes;
        if self.inner.sample.is_empty() {
            self.p_hat = 0.0;
            self.d_hat = 0.0;
        }
        let u = (self.p_hat - self.p_hat_prev) / self.clip;
        self.p_hat_prev = self.p_hat;
        let noisy = self.tree.update_and_report(u)?;
        Ok(SumEstimate {
            value: self.clip * noisy.value + self.d_hat,
            t: noisy.t,
        })
    }
}

impl Sketch for RobustSumFixed {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Sum
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        RobustSumFixed::process(self, op).map(|e| e.value)
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

/// Thresholds and clip levels of the switching instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SumParams {
    /// `τ_k` for `k = 1..=L`.
    pub taus: Vec<f64>,
    /// `B_k = τ_k · ln(T/δ)`.
    pub clips: Vec<f64>,
    pub eps_dp: f64,
}

/// Instance parameters for accuracy `eps`, confidence `delta`, horizon `T`
/// and sum scale `scale_max`:
///
/// ```text
/// τ_k = τ_const · ε² · 2^k / (log2(T)^{7/2} · ln(1/δ)²),   k = 1..=L
/// B_k = τ_k · ln(T/δ)
/// L   = max(1, ⌈log2 scale_max⌉)
/// ```
pub fn sum_params(
    eps: f64,
    delta: f64,
    horizon: u64,
    scale_max: f64,
    tau_const: f64,
) -> Result<SumParams> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(SketchError::invalid(format!(
            "eps must lie in (0, 1], got {eps}"
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
    if !(scale_max >= 1.0 && scale_max.is_finite()) {
        return Err(SketchError::invalid(format!(
            "scale_max must be at least 1, got {scale_max}"
        )));
    }
    if !(tau_const > 0.0 && tau_const.is_finite()) {
        return Err(SketchError::invalid("tau_const must be positive"));
    }
    let t = horizon as f64;
    let levels = (scale_max.log2().ceil() as i32).max(1);
    let denom = t.log2().powf(3.5) * (1.0 / delta).ln().powi(2);
    let taus: Vec<f64> = (1..=levels)
        .map(|k| tau_const * eps * eps * 2f64.powi(k) / denom)
        .collect();
    let clips = taus.iter().map(|tau| tau * (t / delta).ln()).collect();
    Ok(SumParams {
        taus,
        clips,
        eps_dp: eps,
    })
}

/// Configuration of [`PrefixMaxSum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixMaxConfig {
    pub eps: f64,
    pub delta: f64,
    pub horizon: u64,
    /// Upper bound on the sum; sets the number of instances.
    pub scale_max: f64,
    pub tau_const: f64,
    /// Tree capacity of each instance.
    pub capacity: u64,
    pub noise: NoiseMode,
}

/// Sketch switching over dyadic-scale [`RobustSumFixed`] instances.
#[derive(Debug, Clone)]
pub struct PrefixMaxSum {
    instances: Vec<Option<RobustSumFixed>>,
    estimates: Vec<f64>,
    activated: Vec<bool>,
    active: Option<usize>,
    max_sample: usize,
    t: u64,
}

impl PrefixMaxSum {
    pub fn new(cfg: PrefixMaxConfig, seed: RngSeed) -> Result<Self> {
        let params = sum_params(
            cfg.eps,
            cfg.delta,
            cfg.horizon,
            cfg.scale_max,
            cfg.tau_const,
        )?;
        let instances = params
            .taus
            .iter()
            .zip(&params.clips)
            .enumerate()
            .map(|(j, (tau, clip))| {
                RobustSumFixed::new(
                    *tau,
                    *clip,
                    params.eps_dp,
                    cfg.capacity,
                    cfg.noise,
                    seed.derive(j as u64 + 1),
                )
                .map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = instances.len();
        Ok(PrefixMaxSum {
            instances,
            estimates: vec![0.0; n],
            activated: vec![false; n],
            active: None,
            max_sample: 0,
            t: 0,
        })
    }

    /// Number of instances `L`.
    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Scale index `c` (1-based) of the reporting instance, if any has been
    /// activated.
    pub fn reporting_index(&self) -> Option<usize> {
        self.active.map(|j| j + 1)
    }

    pub fn is_activated(&self, k: usize) -> bool {
        k >= 1 && self.activated.get(k - 1).copied().unwrap_or(false)
    }

    /// Instance `k` (1-based), unless it was dropped.
    pub fn instance(&self, k: usize) -> Option<&RobustSumFixed> {
        k.checked_sub(1)
            .and_then(|j| self.instances.get(j))
            .and_then(Option::as_ref)
    }

    pub fn estimate(&self) -> f64 {
        self.active.map_or(0.0, |j| self.estimates[j])
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<SumEstimate> {
        op.validate()?;
        for (j, slot) in self.instances.iter_mut().enumerate() {
            let Some(inst) = slot.as_mut() else { continue };
            let est = inst.process(op)?.value;
            self.estimates[j] = est;
            if !self.activated[j] && est >= 2f64.powi(j as i32 + 1) {
                self.activated[j] = true;
                debug!("step {}: activated sum instance {}", self.t + 1, j + 1);
            }
        }
        if let Some(c) = self.activated.iter().rposition(|a| *a) {
            if self.active != Some(c) {
                for slot in &mut self.instances[..c] {
                    *slot = None;
                }
                self.active = Some(c);
            }
        }
        self.t += 1;
        let live_sample: usize = self
            .instances
            .iter()
            .flatten()
            .map(|i| i.inner.sample_size())
            .sum();
        self.max_sample = self.max_sample.max(live_sample);
        Ok(SumEstimate {
            value: self.estimate(),
            t: self.t,
        })
    }
}

impl Sketch for PrefixMaxSum {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Sum
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        PrefixMaxSum::process(self, op).map(|e| e.value)
    }

    fn diagnostics(&self) -> Diagnostics {
        let live = self.instances.iter().flatten();
        Diagnostics {
            sample_size: live.clone().map(|i| i.inner.sample_size()).sum(),
            max_sample_size: self.max_sample,
            tree_counters_peak: live.map(|i| i.tree.max_live_counters()).sum(),
            ..Diagnostics::default()
        }
    }
}
