//! Bernstein statistics `F = Σ_x f(v_x)` for soft concave sublinear `f`.
//!
//! A Bernstein function has the Lévy-Khintchine form
//! `f(w) = ∫_0^∞ a(t)(1 − e^{−wt}) dt` with `a ≥ 0`. The sketch splits the
//! integral at a cutoff `τ`: the head `∫_0^τ` is close to `α_0 · Σ_x v_x` and
//! is served by a sum sketch, and the tail is discretized at levels
//! `τ_1 < … < τ_m` with weights `α_i = V(τ_{i−1}) − V(τ_i)`, where
//! `V(t) = ∫_t^∞ a`. Each level is a cardinality stream `E_i`: every
//! `Inc(x, Δ)` turns into up to `r` inserts of derived keys `H(x, k)`, each
//! emitted with probability `1 − e^{−Δ τ_i}`, so that
//! `E[|E_i|] = r · Σ_x (1 − e^{−v_x τ_i})`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::cardinality::{
    adaptive_tree_capacity, card_params, AdaptiveCardConfig, CardConstants, RobustAdaptiveCard,
};
use crate::randomness::{NoiseMode, RandomSource, RngSeed};
use crate::sketch::{Diagnostics, Sketch};
use crate::stream::{to_cardinality_stream, Key, KeyMap, Predicate, StatisticKind, UpdateOp};
use crate::sum::{PrefixMaxConfig, PrefixMaxSum};
use crate::{Result, SketchError};

/// Largest granularity `r`; `k − 1` must fit in the low byte of `H(x, k)`.
pub const MAX_GRANULARITY: u32 = 256;

/// Input keys must be below `2^56` so that `H(x, k)` does not overflow.
pub const MAX_INPUT_KEY: u64 = (1 << 56) - 1;

/// Search interval for inverting `V`.
const T_MIN: f64 = 1e-18;
const T_MAX: f64 = 1e18;
const BISECTION_REL_TOL: f64 = 1e-12;
const MAX_LEVELS: usize = 1_000_000;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BernsteinFunction {
    /// `f(w) = w^p`, `0 < p < 1`.
    Moment { p: f64 },
    /// `f(w) = ln(1 + w)`.
    Log1p,
    /// `f(w) = T_c (1 − e^{−w/T_c})`.
    SoftCap { cap: f64 },
}

impl BernsteinFunction {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BernsteinFunction::Moment { p } if !(p > 0.0 && p < 1.0) => Err(SketchError::invalid(
                format!("moment exponent must lie in (0, 1), got {p}"),
            )),
            BernsteinFunction::SoftCap { cap } if !(cap > 0.0 && cap.is_finite()) => Err(
                SketchError::invalid(format!("soft cap must be positive, got {cap}")),
            ),
            _ => Ok(()),
        }
    }

    /// `f(w)`; zero for `w ≤ 0`.
    pub fn evaluate(&self, w: f64) -> f64 {
        if w <= 0.0 {
            return 0.0;
        }
        match *self {
            BernsteinFunction::Moment { p } => w.powf(p),
            BernsteinFunction::Log1p => w.ln_1p(),
            BernsteinFunction::SoftCap { cap } => -cap * (-w / cap).exp_m1(),
        }
    }

    /// Lévy density `a(t)`, or `None` for the point mass of `SoftCap`.
    pub fn levy_density(&self, t: f64) -> Option<f64> {
        match *self {
            BernsteinFunction::Moment { p } => Some(p / gamma(1.0 - p) * t.powf(-(1.0 + p))),
            BernsteinFunction::Log1p => Some((-t).exp() / t),
            BernsteinFunction::SoftCap { .. } => None,
        }
    }

    /// `V(t) = ∫_t^∞ a(s) ds`.
    ///
    /// For `SoftCap` the atom sits at `1/T_c` and is counted for `t < 1/T_c`
    /// only, so `V(1/T_c) = 0`.
    pub fn tail_value(&self, t: f64) -> f64 {
        match *self {
            BernsteinFunction::Moment { p } => t.powf(-p) / gamma(1.0 - p),
            BernsteinFunction::Log1p => exp_integral_e1(t),
            BernsteinFunction::SoftCap { cap } => {
                if t < 1.0 / cap {
                    cap
                } else {
                    0.0
                }
            }
        }
    }

    /// `α_0 = ∫_0^τ a(t) t dt`.
    pub fn head_weight(&self, tau: f64) -> f64 {
        match *self {
            BernsteinFunction::Moment { p } => p * tau.powf(1.0 - p) / (gamma(1.0 - p) * (1.0 - p)),
            BernsteinFunction::Log1p => -(-tau).exp_m1(),
            BernsteinFunction::SoftCap { cap } => {
                if tau >= 1.0 / cap {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for BernsteinFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BernsteinFunction::Moment { p } => write!(f, "moment:{p}"),
            BernsteinFunction::Log1p => write!(f, "log1p"),
            BernsteinFunction::SoftCap { cap } => write!(f, "softcap:{cap}"),
        }
    }
}

impl FromStr for BernsteinFunction {
    type Err = SketchError;

    /// Parses `moment:<p>`, `log1p` or `softcap:<T_c>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| SketchError::invalid(format!("`{name}` needs a parameter")))?
                .parse::<f64>()
                .map_err(|e| SketchError::invalid(format!("bad parameter in `{s}`: {e}")))
        };
        let f = match name {
            "moment" => BernsteinFunction::Moment { p: number(arg)? },
            "log1p" if arg.is_none() => BernsteinFunction::Log1p,
            "softcap" => BernsteinFunction::SoftCap { cap: number(arg)? },
            _ => {
                return Err(SketchError::invalid(format!(
                    "unknown function `{s}`; expected moment:<p>, log1p or softcap:<cap>"
                )))
            }
        };
        f.validate()?;
        Ok(f)
    }
}

/// Exponential integral `E1(x) = ∫_x^∞ e^{−s}/s ds` for `x > 0`.
pub fn exp_integral_e1(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    if x <= 1.0 {
        // E1(x) = −γ − ln x − Σ_{k≥1} (−x)^k / (k · k!)
        let mut term = 1.0;
        let mut series = 0.0;
        for k in 1..200 {
            term *= -x / k as f64;
            let add = term / k as f64;
            series += add;
            if add.abs() < 1e-17 * series.abs() {
                break;
            }
        }
        -EULER_GAMMA - x.ln() - series
    } else {
        if x > 745.0 {
            return 0.0;
        }
        // Modified Lentz on the continued fraction for e^x E1(x).
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// Tail discretization used by [`BernsteinSketch`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    /// Cutoff `τ = √ε / (T · Δ_max)`.
    pub tau: f64,
    /// `V(τ)`.
    pub tail_at_tau: f64,
    /// `τ_1 < … < τ_m`.
    pub levels: Vec<f64>,
    /// `α_i = V(τ_{i−1}) − V(τ_i)`, with `τ_0 = τ`.
    pub weights: Vec<f64>,
    /// `α_0` for the sum part.
    pub head_weight: f64,
    /// Truncation value `(ε/T) f(Δ_min)`.
    pub v_floor: f64,
}

impl LevelPlan {
    pub fn m(&self) -> usize {
        self.levels.len()
    }
}

fn check_plan_inputs(eps: f64, horizon: u64, delta_min: f64, delta_max: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SketchError::invalid(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if horizon < 1 {
        return Err(SketchError::invalid("horizon must be at least 1"));
    }
    if !(delta_min > 0.0 && delta_min <= delta_max && delta_max.is_finite()) {
        return Err(SketchError::invalid(format!(
            "update range must satisfy 0 < delta_min <= delta_max, got [{delta_min}, {delta_max}]"
        )));
    }
    Ok(())
}

/// Level plan for a builtin function.
pub fn plan_levels(
    f: BernsteinFunction,
    eps: f64,
    horizon: u64,
    delta_min: f64,
    delta_max: f64,
) -> Result<LevelPlan> {
    f.validate()?;
    check_plan_inputs(eps, horizon, delta_min, delta_max)?;
    let tau = eps.sqrt() / (horizon as f64 * delta_max);
    let v_floor = eps / horizon as f64 * f.evaluate(delta_min);
    if let BernsteinFunction::SoftCap { cap } = f {
        // V is a single step at 1/T_c.
        let (levels, weights) = if tau < 1.0 / cap {
            (vec![1.0 / cap], vec![cap])
        } else {
            (Vec::new(), Vec::new())
        };
        return Ok(LevelPlan {
            tau,
            tail_at_tau: f.tail_value(tau),
            levels,
            weights,
            head_weight: f.head_weight(tau),
            v_floor,
        });
    }
    let mut plan = plan_from_tail(|t| f.tail_value(t), eps, horizon, delta_max, v_floor)?;
    plan.head_weight = f.head_weight(tau);
    Ok(plan)
}

/// Level plan for an arbitrary tail function `V`, which must be finite,
/// nonnegative and nonincreasing on `[τ, 10^18]`. The head weight is left at
/// zero for the caller to fill in.
pub fn plan_from_tail<V: Fn(f64) -> f64>(
    tail: V,
    eps: f64,
    horizon: u64,
    delta_max: f64,
    v_floor: f64,
) -> Result<LevelPlan> {
    check_plan_inputs(eps, horizon, delta_max, delta_max)?;
    let tau = eps.sqrt() / (horizon as f64 * delta_max);
    check_tail_shape(&tail, tau)?;
    let v0 = tail(tau);
    let mut levels = Vec::new();
    let mut weights = Vec::new();
    let mut prev_t = tau;
    let mut prev_v = v0;
    let mut i = 0i32;
    while v0 > 0.0 && i < i32::MAX {
        i += 1;
        let target = v0 * (1.0 + eps).powi(-i);
        if tail(prev_t) >= target {
            let t_i = invert_tail(&tail, target, prev_t);
            let v_i = tail(t_i);
            if v_i > prev_v {
                return Err(SketchError::invalid(format!(
                    "tail function increases between t = {prev_t} and t = {t_i}"
                )));
            }
            levels.push(t_i);
            weights.push(prev_v - v_i);
            prev_t = t_i;
            prev_v = v_i;
            if v_i <= v_floor || t_i >= T_MAX {
                break;
            }
        }
        // A jump in V can skip targets; they add no level.
        if target <= v_floor {
            break;
        }
        if levels.len() >= MAX_LEVELS {
            return Err(SketchError::invalid("level plan does not terminate"));
        }
    }
    Ok(LevelPlan {
        tau,
        tail_at_tau: v0,
        levels,
        weights,
        head_weight: 0.0,
        v_floor,
    })
}

fn check_tail_shape<V: Fn(f64) -> f64>(tail: &V, tau: f64) -> Result<()> {
    const GRID: usize = 512;
    let (lo, hi) = (tau.max(T_MIN).ln(), T_MAX.ln());
    let mut prev = f64::INFINITY;
    for j in 0..=GRID {
        let t = (lo + (hi - lo) * j as f64 / GRID as f64).exp();
        let v = tail(t);
        if !(v.is_finite() && v >= 0.0) {
            return Err(SketchError::invalid(format!(
                "tail function must be finite and nonnegative, got V({t}) = {v}"
            )));
        }
        if v > prev * (1.0 + 1e-12) {
            return Err(SketchError::invalid(format!(
                "tail function is not monotone near t = {t}"
            )));
        }
        prev = v;
    }
    Ok(())
}

/// `sup{t : V(t) ≥ target}` by bisection in `ln t`, starting from a point
/// with `V(lo) ≥ target`. Returns the upper bracket.
fn invert_tail<V: Fn(f64) -> f64>(tail: &V, target: f64, lo: f64) -> f64 {
    let mut lo = lo.max(T_MIN);
    let mut hi = T_MAX;
    if tail(hi) >= target {
        return hi;
    }
    while hi / lo > 1.0 + BISECTION_REL_TOL {
        let mid = ((lo.ln() + hi.ln()) / 2.0).exp();
        if mid <= lo || mid >= hi {
            break;
        }
        if tail(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Derived key `H(x, k) = (x << 8) | (k − 1)` for `k ∈ 1..=256`.
#[inline]
pub fn encode_key(x: Key, k: u32) -> Key {
    debug_assert!((1..=MAX_GRANULARITY).contains(&k) && x.0 <= MAX_INPUT_KEY);
    Key((x.0 << 8) | u64::from(k - 1))
}

/// Inverse of [`encode_key`].
#[inline]
pub fn decode_key(z: Key) -> (Key, u32) {
    (Key(z.0 >> 8), (z.0 & 0xff) as u32 + 1)
}

/// Maps an input stream to the `m` level streams `E_1..E_m`.
///
/// Randomness for the `n`-th increment of key `x` comes from a source seeded
/// by `(seed, x, n)`, so removing every operation on `x` leaves all other
/// emissions unchanged.
#[derive(Debug, Clone)]
pub struct ElementMapper {
    levels: Vec<f64>,
    r: u32,
    seed: RngSeed,
    inc_counts: KeyMap<u64>,
}

impl ElementMapper {
    pub fn new(levels: Vec<f64>, r: u32, seed: RngSeed) -> Result<Self> {
        if !(1..=MAX_GRANULARITY).contains(&r) {
            return Err(SketchError::invalid(format!(
                "granularity r must lie in 1..={MAX_GRANULARITY}, got {r}"
            )));
        }
        if levels.iter().any(|t| !(*t > 0.0)) {
            return Err(SketchError::invalid("levels must be positive"));
        }
        Ok(ElementMapper {
            levels,
            r,
            seed,
            inc_counts: KeyMap::default(),
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    /// Appends the emissions for one `Inc`, `ResetKey` or `ResetPred` to
    /// `out[i]` for each level `i`. `Insert` and `Delete` are rejected; expand
    /// them with [`to_cardinality_stream`] first.
    pub fn map_into(&mut self, op: &UpdateOp, out: &mut [Vec<UpdateOp>]) -> Result<()> {
        if out.len() != self.levels.len() {
            return Err(SketchError::invalid(format!(
                "expected {} output streams, got {}",
                self.levels.len(),
                out.len()
            )));
        }
        op.validate()?;
        match op {
            UpdateOp::Inc { key, delta } => {
                check_key(*key)?;
                if *delta == 0.0 {
                    return Ok(());
                }
                let n = self.inc_counts.entry(*key).or_insert(0);
                let mut rng = RandomSource::new(self.seed.derive(key.0).derive(*n));
                *n += 1;
                for k in 1..=self.r {
                    let z = encode_key(*key, k);
                    for (i, tau_i) in self.levels.iter().enumerate() {
                        if rng.exponential_unchecked(*delta) < *tau_i {
                            out[i].push(UpdateOp::Insert(z));
                        }
                    }
                }
            }
            UpdateOp::ResetKey(key) => {
                check_key(*key)?;
                for stream in out.iter_mut() {
                    stream.extend((1..=self.r).map(|k| UpdateOp::Delete(encode_key(*key, k))));
                }
            }
            UpdateOp::ResetPred(pred) => {
                let mapped = match pred {
                    Predicate::KeyRange { lo, hi } => {
                        check_key(*hi)?;
                        Predicate::KeyRange {
                            lo: Key(lo.0 << 8),
                            hi: Key((hi.0 << 8) | 0xff),
                        }
                    }
                    Predicate::KeySet(keys) => {
                        let mut derived = Vec::with_capacity(keys.len() * self.r as usize);
                        for x in keys {
                            check_key(*x)?;
                            derived.extend((1..=self.r).map(|k| encode_key(*x, k)));
                        }
                        Predicate::KeySet(derived)
                    }
                };
                for stream in out.iter_mut() {
                    stream.push(UpdateOp::ResetPred(mapped.clone()));
                }
            }
            UpdateOp::Insert(_) | UpdateOp::Delete(_) => {
                return Err(SketchError::invalid(
                    "the element mapper takes Inc and reset operations only",
                ))
            }
        }
        Ok(())
    }

    /// Emissions for one operation, one vector per level.
    pub fn map(&mut self, op: &UpdateOp) -> Result<Vec<Vec<UpdateOp>>> {
        let mut out = vec![Vec::new(); self.levels.len()];
        self.map_into(op, &mut out)?;
        Ok(out)
    }
}

fn check_key(key: Key) -> Result<()> {
    if key.0 > MAX_INPUT_KEY {
        Err(SketchError::invalid(format!(
            "key {key} too large for the Bernstein key encoding (max {MAX_INPUT_KEY})"
        )))
    } else {
        Ok(())
    }
}

/// `Σ_x f(v_x)` by direct evaluation.
pub fn exact_bernstein_oracle(values: &KeyMap<f64>, f: BernsteinFunction) -> f64 {
    let mut terms: Vec<f64> = values.values().map(|v| f.evaluate(*v)).collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Configuration of [`BernsteinSketch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernsteinConfig {
    pub f: BernsteinFunction,
    pub eps: f64,
    pub delta: f64,
    /// Number of input operations `T`.
    pub horizon: u64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Granularity `r`.
    pub r: u32,
    pub noise: NoiseMode,
    pub card_consts: CardConstants,
    pub tau_const: f64,
}

impl BernsteinConfig {
    pub fn new(f: BernsteinFunction, eps: f64, delta: f64, horizon: u64) -> Self {
        BernsteinConfig {
            f,
            eps,
            delta,
            horizon,
            delta_min: 1.0,
            delta_max: 1.0,
            r: 64,
            noise: NoiseMode::Live,
            card_consts: CardConstants::default(),
            tau_const: 1.0,
        }
    }
}

/// Sum sketch plus one robust cardinality sketch per level, combined as
/// `α_0 · Ŝ + (1/r) Σ_i α_i N̂_i`.
#[derive(Debug, Clone)]
pub struct BernsteinSketch {
    cfg: BernsteinConfig,
    plan: LevelPlan,
    mapper: ElementMapper,
    sum: PrefixMaxSum,
    cards: Vec<RobustAdaptiveCard>,
    sum_estimate: f64,
    card_estimates: Vec<f64>,
    buffers: Vec<Vec<UpdateOp>>,
    ops_seen: u64,
}

impl BernsteinSketch {
    pub fn new(cfg: BernsteinConfig, seed: RngSeed) -> Result<Self> {
        if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
            return Err(SketchError::invalid(format!(
                "delta must lie in (0, 1), got {}",
                cfg.delta
            )));
        }
        if cfg.horizon < 2 {
            return Err(SketchError::invalid("horizon must be at least 2"));
        }
        let plan = plan_levels(cfg.f, cfg.eps, cfg.horizon, cfg.delta_min, cfg.delta_max)?;
        let m = plan.m();
        let parts = (m + 1) as f64;
        let (eps_part, delta_part) = (cfg.eps / parts, cfg.delta / parts);
        let mapper = ElementMapper::new(plan.levels.clone(), cfg.r, seed.derive_named("map"))?;

        let sum = PrefixMaxSum::new(
            PrefixMaxConfig {
                eps: eps_part,
                delta: delta_part,
                horizon: cfg.horizon,
                scale_max: (cfg.horizon as f64 * cfg.delta_max).max(2.0),
                tau_const: cfg.tau_const,
                capacity: cfg.horizon,
                noise: cfg.noise,
            },
            seed.derive_named("sum"),
        )?;

        let level_horizon = cfg.horizon * u64::from(cfg.r);
        let params = card_params(eps_part, delta_part, level_horizon, cfg.card_consts)?;
        // A ResetKey emits r deletes and an Insert expands to a reset plus an
        // increment, so a level stream sees at most 2·T·r operations.
        let card_cfg = AdaptiveCardConfig {
            capacity: adaptive_tree_capacity(2 * level_horizon),
            ..AdaptiveCardConfig::from_params(&params, level_horizon, cfg.noise)
        };
        let card_seed = seed.derive_named("card");
        let cards = (0..m)
            .map(|i| RobustAdaptiveCard::new(card_cfg, card_seed.derive(i as u64)))
            .collect::<Result<Vec<_>>>()?;

        Ok(BernsteinSketch {
            cfg,
            plan,
            mapper,
            sum,
            cards,
            sum_estimate: 0.0,
            card_estimates: vec![0.0; m],
            buffers: vec![Vec::new(); m],
            ops_seen: 0,
        })
    }

    pub fn plan(&self) -> &LevelPlan {
        &self.plan
    }

    pub fn config(&self) -> &BernsteinConfig {
        &self.cfg
    }

    fn check_delta(&self, op: &UpdateOp) -> Result<()> {
        if let UpdateOp::Inc { delta, .. } = op {
            if *delta != 0.0 && !(self.cfg.delta_min..=self.cfg.delta_max).contains(delta) {
                return Err(SketchError::invalid(format!(
                    "increment {delta} outside [{}, {}]",
                    self.cfg.delta_min, self.cfg.delta_max
                )));
            }
        }
        Ok(())
    }

    /// Unclamped linear combination of the part estimates.
    pub fn raw_estimate(&self) -> f64 {
        let tail: f64 = self
            .plan
            .weights
            .iter()
            .zip(&self.card_estimates)
            .map(|(a, n)| a * n)
            .sum();
        self.plan.head_weight * self.sum_estimate + tail / f64::from(self.cfg.r)
    }

    pub fn estimate(&self) -> f64 {
        if self.ops_seen == 0 {
            return 0.0;
        }
        let raw = self.raw_estimate();
        if raw < (1.0 - self.cfg.eps) * self.cfg.f.evaluate(self.cfg.delta_min) {
            0.0
        } else {
            raw
        }
    }

    pub fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        op.validate()?;
        let primitives = to_cardinality_stream(op);
        for p in &primitives {
            self.check_delta(p)?;
        }
        self.sum_estimate = self.sum.process(op)?.value;
        for p in &primitives {
            self.mapper.map_into(p, &mut self.buffers)?;
        }
        for ((card, buf), est) in self
            .cards
            .iter_mut()
            .zip(self.buffers.iter_mut())
            .zip(self.card_estimates.iter_mut())
        {
            for emitted in buf.drain(..) {
                *est = card.process(&emitted)?.value;
            }
        }
        self.ops_seen += 1;
        Ok(self.estimate())
    }
}

impl Sketch for BernsteinSketch {
    fn statistic(&self) -> StatisticKind {
        StatisticKind::Bernstein(self.cfg.f)
    }

    fn process(&mut self, op: &UpdateOp) -> Result<f64> {
        BernsteinSketch::process(self, op)
    }

    fn diagnostics(&self) -> Diagnostics {
        self.cards
            .iter()
            .map(|c| c.diagnostics())
            .fold(self.sum.diagnostics(), |acc, d| Diagnostics {
                sample_size: acc.sample_size + d.sample_size,
                max_sample_size: acc.max_sample_size + d.max_sample_size,
                halvings: acc.halvings + d.halvings,
                tree_counters_peak: acc.tree_counters_peak + d.tree_counters_peak,
                capped_adjustments: acc.capped_adjustments + d.capped_adjustments,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn e1_reference_values() {
        // Abramowitz and Stegun table 5.1.
        assert!(close(exp_integral_e1(0.5), 0.559_773_594_776_160_8, 1e-13));
        assert!(close(exp_integral_e1(1.0), 0.219_383_934_395_520_3, 1e-13));
        assert!(close(exp_integral_e1(2.0), 0.048_900_510_708_061_1, 1e-12));
        assert!(close(
            exp_integral_e1(10.0),
            4.156_968_929_685_324e-6,
            1e-12
        ));
        assert!(close(
            exp_integral_e1(1e-10),
            -EULER_GAMMA + 1e10f64.ln(),
            1e-9
        ));
        assert_eq!(exp_integral_e1(1000.0), 0.0);
    }

    #[test]
    fn closed_forms() {
        let m = BernsteinFunction::Moment { p: 0.5 };
        assert_eq!(m.evaluate(4.0), 2.0);
        assert_eq!(m.evaluate(0.0), 0.0);
        let pi = std::f64::consts::PI;
        assert!(close(m.tail_value(1.0), 1.0 / pi.sqrt(), 1e-12));
        assert!(close(m.head_weight(1.0), 1.0 / pi.sqrt(), 1e-12));

        let s = BernsteinFunction::SoftCap { cap: 10.0 };
        assert!(close(
            s.evaluate(1.0),
            10.0 * (1.0 - (-0.1f64).exp()),
            1e-12
        ));
        assert_eq!(s.tail_value(0.05), 10.0);
        assert_eq!(s.tail_value(0.1), 0.0);
        assert_eq!(s.head_weight(0.1), 1.0);
        assert_eq!(s.head_weight(0.05), 0.0);

        let l = BernsteinFunction::Log1p;
        assert!(close(l.evaluate(1.0), 2f64.ln(), 1e-15));
        assert!(close(l.head_weight(2.0), 1.0 - (-2f64).exp(), 1e-15));
    }

    #[test]
    fn parse_and_display() {
        for s in ["moment:0.5", "log1p", "softcap:10"] {
            let f: BernsteinFunction = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        assert!("moment:1.5".parse::<BernsteinFunction>().is_err());
        assert!("moment".parse::<BernsteinFunction>().is_err());
        assert!("softcap:-1".parse::<BernsteinFunction>().is_err());
        assert!("cube".parse::<BernsteinFunction>().is_err());
    }

    #[test]
    fn softcap_plan_is_one_level() {
        let plan = plan_levels(BernsteinFunction::SoftCap { cap: 1.0 }, 0.5, 10, 1.0, 1.0).unwrap();
        assert_eq!(plan.m(), 1);
        assert_eq!(plan.levels, vec![1.0]);
        assert_eq!(plan.weights, vec![1.0]);
        assert_eq!(plan.head_weight, 0.0);
    }

    #[test]
    fn moment_plan_shape() {
        let f = BernsteinFunction::Moment { p: 0.5 };
        let plan = plan_levels(f, 0.25, 16, 1.0, 1.0).unwrap();
        let bound = (256.0 * 0.25f64.powf(-1.5) * 2.0).ln() / 1.25f64.ln();
        assert!(plan.m() as f64 <= bound.ceil(), "m = {}", plan.m());
        assert!(plan.levels.windows(2).all(|w| w[0] < w[1]));
        assert!(plan.weights.iter().all(|a| *a >= 0.0));
        let total: f64 = plan.weights.iter().sum();
        let last = f.tail_value(*plan.levels.last().unwrap());
        assert!(close(total, plan.tail_at_tau - last, 1e-9));
        assert!(last <= plan.v_floor);
        // Each level sits at the target value.
        for (i, t) in plan.levels.iter().enumerate() {
            let target = plan.tail_at_tau * 1.25f64.powi(-(i as i32 + 1));
            assert!(close(f.tail_value(*t), target, 1e-9));
        }
    }

    #[test]
    fn custom_tail_validation() {
        assert!(plan_from_tail(|t| t, 0.5, 10, 1.0, 1e-3).is_err());
        assert!(plan_from_tail(|t| (1.0 / t).sin().abs(), 0.5, 10, 1.0, 1e-3).is_err());
        let plan = plan_from_tail(|t| (-t).exp(), 0.5, 10, 1.0, 1e-3).unwrap();
        assert!(plan.m() > 0);
        // A step function yields a single level.
        let plan = plan_from_tail(|t| if t < 2.0 { 3.0 } else { 0.0 }, 0.5, 10, 1.0, 1e-3).unwrap();
        assert_eq!(plan.m(), 1);
        assert!(close(plan.levels[0], 2.0, 1e-11));
    }

    #[test]
    fn key_encoding_roundtrip() {
        for (x, k) in [(0u64, 1u32), (5, 256), (MAX_INPUT_KEY, 17)] {
            let z = encode_key(Key(x), k);
            assert_eq!(decode_key(z), (Key(x), k));
        }
        assert_ne!(encode_key(Key(1), 1), encode_key(Key(0), 256));
    }

    #[test]
    fn mapper_resets_cover_all_copies() {
        let mut mapper = ElementMapper::new(vec![0.5, 5.0], 4, RngSeed(1)).unwrap();
        let out = mapper.map(&UpdateOp::ResetKey(Key(3))).unwrap();
        for stream in &out {
            let keys: Vec<u64> = stream
                .iter()
                .map(|op| match op {
                    UpdateOp::Delete(z) => z.0,
                    other => panic!("unexpected {other:?}"),
                })
                .collect();
            assert_eq!(keys, vec![3 << 8, (3 << 8) | 1, (3 << 8) | 2, (3 << 8) | 3]);
        }
        let out = mapper
            .map(&UpdateOp::ResetPred(Predicate::KeyRange {
                lo: Key(2),
                hi: Key(4),
            }))
            .unwrap();
        assert_eq!(
            out[0],
            vec![UpdateOp::ResetPred(Predicate::KeyRange {
                lo: Key(2 << 8),
                hi: Key((4 << 8) | 255)
            })]
        );
        assert!(mapper.map(&UpdateOp::Insert(Key(1))).is_err());
        assert!(ElementMapper::new(vec![1.0], 257, RngSeed(0)).is_err());
        assert!(mapper.map(&UpdateOp::inc(MAX_INPUT_KEY + 1, 1.0)).is_err());
    }

    #[test]
    fn mapper_emission_probability() {
        let tau = 0.7;
        let mut mapper = ElementMapper::new(vec![tau], 1, RngSeed(5)).unwrap();
        let trials = 1_000_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            hits += mapper.map(&UpdateOp::inc(9, 1.5)).unwrap()[0].len();
        }
        let expected = 1.0 - (-1.5 * tau).exp();
        let got = hits as f64 / trials as f64;
        assert!((got - expected).abs() < 0.003, "{got} vs {expected}");
    }

    #[test]
    fn oracle_values() {
        let f = BernsteinFunction::Moment { p: 0.5 };
        let mut values = KeyMap::default();
        values.insert(Key(1), 1.0);
        assert_eq!(exact_bernstein_oracle(&values, f), 1.0);
        values.insert(Key(1), 4.0);
        values.insert(Key(2), 9.0);
        assert_eq!(exact_bernstein_oracle(&values, f), 5.0);
    }

    #[test]
    fn empty_sketch_reports_zero() {
        let cfg = BernsteinConfig::new(BernsteinFunction::Log1p, 0.25, 0.1, 100);
        let sk = BernsteinSketch::new(cfg, RngSeed(3)).unwrap();
        assert_eq!(sk.estimate(), 0.0);
    }

    #[test]
    fn out_of_range_increment_rejected() {
        let cfg = BernsteinConfig::new(BernsteinFunction::SoftCap { cap: 10.0 }, 0.25, 0.1, 10);
        let mut sk = BernsteinSketch::new(cfg, RngSeed(3)).unwrap();
        assert!(sk.process(&UpdateOp::inc(1, 2.0)).is_err());
        assert!(sk.process(&UpdateOp::inc(1, 1.0)).is_ok());
    }
}
