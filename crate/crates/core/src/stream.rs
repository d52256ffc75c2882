//! The resettable stream model: keys, update operations, the exact
//! ground-truth tracker, stream generators and the text stream format.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};

use std::fmt;
use std::hash::BuildHasherDefault;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bernstein::BernsteinFunction;
use crate::randomness::{RandomSource, RngSeed};
use crate::{Result, SketchError};

/// Hasher with a fixed key, so that iteration order over sampled keys (and
/// therefore every random draw that depends on it) is reproducible.
pub type DetState = BuildHasherDefault<DefaultHasher>;
pub type KeySet = HashSet<Key, DetState>;
pub type KeyMap<V> = HashMap<Key, V, DetState>;

/// Opaque 64-bit key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Key(pub u64);

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Key predicate for bulk resets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    /// Inclusive range `lo..=hi`.
    KeyRange {
        lo: Key,
        hi: Key,
    },
    KeySet(Vec<Key>),
}

impl Predicate {
    pub fn matches(&self, key: Key) -> bool {
        match self {
            Predicate::KeyRange { lo, hi } => *lo <= key && key <= *hi,
            Predicate::KeySet(keys) => keys.contains(&key),
        }
    }
}

/// One stream event.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOp {
    Inc {
        key: Key,
        delta: f64,
    },
    ResetKey(Key),
    ResetPred(Predicate),
    /// Sugar for `ResetKey(x)` followed by `Inc(x, 1)`.
    Insert(Key),
    /// Sugar for `ResetKey(x)`.
    Delete(Key),
}

impl UpdateOp {
    pub fn inc(key: u64, delta: f64) -> Self {
        UpdateOp::Inc {
            key: Key(key),
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let UpdateOp::Inc { delta, .. } = self {
            if !(*delta >= 0.0) || !delta.is_finite() {
                return Err(SketchError::invalid(format!(
                    "increment must be a finite nonnegative value, got {delta}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for UpdateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateOp::Inc { key, delta } => write!(f, "INC {key} {delta}"),
            UpdateOp::ResetKey(key) => write!(f, "RST {key}"),
            UpdateOp::Insert(key) => write!(f, "INS {key}"),
            UpdateOp::Delete(key) => write!(f, "DEL {key}"),
            UpdateOp::ResetPred(Predicate::KeyRange { lo, hi }) => write!(f, "RSTR {lo} {hi}"),
            UpdateOp::ResetPred(Predicate::KeySet(keys)) => {
                // The text format has no set form; a set reset is written as
                // one range reset per key.
                for (i, key) in keys.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "RSTR {key} {key}")?;
                }
                Ok(())
            }
        }
    }
}

/// Rewrites `Insert` and `Delete` into the primitive resettable operations.
///
/// `Insert(x)` becomes `ResetKey(x), Inc(x, 1)` and `Delete(x)` becomes
/// `ResetKey(x)`; any other operation is passed through unchanged.
pub fn to_cardinality_stream(op: &UpdateOp) -> Vec<UpdateOp> {
    match op {
        UpdateOp::Insert(key) => vec![
            UpdateOp::ResetKey(*key),
            UpdateOp::Inc {
                key: *key,
                delta: 1.0,
            },
        ],
        UpdateOp::Delete(key) => vec![UpdateOp::ResetKey(*key)],
        other => vec![other.clone()],
    }
}

/// The statistic `F = Σ_x f(v_x)` a sketch estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StatisticKind {
    Cardinality,
    Sum,
    Bernstein(BernsteinFunction),
}

impl StatisticKind {
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            StatisticKind::Cardinality => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            StatisticKind::Sum => v,
            StatisticKind::Bernstein(f) => f.evaluate(v),
        }
    }
}

#[derive(Debug, Clone)]
struct TrackedStatistic {
    kind: StatisticKind,
    total: f64,
    prefix_max: f64,
}

/// Exact key → value map with running totals and prefix maxima for a set of
/// registered statistics.
///
/// Keys whose value drops to zero are removed, so the map size is the
/// cardinality.
#[derive(Debug, Clone, Default)]
pub struct ExactTracker {
    values: KeyMap<f64>,
    t: u64,
    tracked: Vec<TrackedStatistic>,
}

impl ExactTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_statistics(kinds: &[StatisticKind]) -> Self {
        let mut tracker = Self::new();
        for kind in kinds {
            tracker.register(*kind);
        }
        tracker
    }

    /// Starts tracking a statistic; its prefix max starts at the current value.
    pub fn register(&mut self, kind: StatisticKind) {
        if self.tracked.iter().any(|s| s.kind == kind) {
            return;
        }
        let total = self.exact_statistic(kind);
        self.tracked.push(TrackedStatistic {
            kind,
            total,
            prefix_max: total,
        });
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn values(&self) -> &KeyMap<f64> {
        &self.values
    }

    pub fn value(&self, key: Key) -> f64 {
        self.values.get(&key).copied().unwrap_or(0.0)
    }

    pub fn apply(&mut self, op: &UpdateOp) -> Result<()> {
        op.validate()?;
        match op {
            UpdateOp::Inc { key, delta } => self.increment(*key, *delta)?,
            UpdateOp::ResetKey(key) | UpdateOp::Delete(key) => self.reset(*key),
            UpdateOp::Insert(key) => {
                self.reset(*key);
                self.increment(*key, 1.0)?;
            }
            UpdateOp::ResetPred(pred) => {
                let mut hit: Vec<Key> = self
                    .values
                    .keys()
                    .filter(|k| pred.matches(**k))
                    .copied()
                    .collect();
                hit.sort_unstable();
                for key in hit {
                    self.reset(key);
                }
            }
        }
        if self.values.is_empty() {
            for s in &mut self.tracked {
                s.total = 0.0;
            }
        }
        self.t += 1;
        for s in &mut self.tracked {
            s.prefix_max = s.prefix_max.max(s.total);
        }
        Ok(())
    }

    fn increment(&mut self, key: Key, delta: f64) -> Result<()> {
        if delta == 0.0 {
            return Ok(());
        }
        let old = self.value(key);
        let new = old + delta;
        if !new.is_finite() {
            return Err(SketchError::invalid(format!(
                "increment of key {key} by {delta} overflows"
            )));
        }
        self.values.insert(key, new);
        self.adjust_totals(old, new);
        Ok(())
    }

    fn reset(&mut self, key: Key) {
        if let Some(old) = self.values.remove(&key) {
            self.adjust_totals(old, 0.0);
        }
    }

    fn adjust_totals(&mut self, old: f64, new: f64) {
        for s in &mut self.tracked {
            s.total += s.kind.apply(new) - s.kind.apply(old);
        }
    }

    /// `Σ_x f(v_x)` recomputed from the current map.
    pub fn exact_statistic(&self, kind: StatisticKind) -> f64 {
        match kind {
            StatisticKind::Cardinality => self.values.len() as f64,
            _ => {
                let mut vals: Vec<(&Key, &f64)> = self.values.iter().collect();
                vals.sort_unstable_by_key(|(k, _)| **k);
                vals.into_iter().map(|(_, v)| kind.apply(*v)).sum()
            }
        }
    }

    /// Running value of a registered statistic (falls back to a full
    /// recomputation for unregistered ones).
    pub fn current(&self, kind: StatisticKind) -> f64 {
        self.tracked
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| s.total)
            .unwrap_or_else(|| self.exact_statistic(kind))
    }

    /// `max_{t' ≤ t} F_{t'}` for a registered statistic.
    pub fn prefix_max(&self, kind: StatisticKind) -> Option<f64> {
        self.tracked
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| s.prefix_max)
    }
}

/// Synthetic, non-adaptive stream generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// `n` inserts of distinct keys.
    DistinctInserts { n: u64 },
    /// `cycles` rounds of inserting `n` keys and then deleting them.
    InsertDeleteCycles { n: u64, cycles: u64 },
    /// `n` increments with deltas uniform in `[delta_min, delta_max]` over a
    /// universe of `⌈n/4⌉` keys, so keys repeat.
    WeightedIncs {
        n: u64,
        delta_min: f64,
        delta_max: f64,
    },
}

impl GeneratorSpec {
    /// Number of operations the generator emits.
    pub fn len(&self) -> u64 {
        match *self {
            GeneratorSpec::DistinctInserts { n } => n,
            GeneratorSpec::InsertDeleteCycles { n, cycles } => 2 * n * cycles,
            GeneratorSpec::WeightedIncs { n, .. } => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for GeneratorSpec {
    type Err = SketchError;

    /// Parses `distinct:<n>`, `cycles:<n>:<cycles>` or `weighted:<n>:<dmin>:<dmax>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || SketchError::Config(format!("unrecognized generator spec `{s}`"));
        let int = |p: &str| p.parse::<u64>().map_err(|_| bad());
        let real = |p: &str| p.parse::<f64>().map_err(|_| bad());
        match parts.as_slice() {
            ["distinct", n] => Ok(GeneratorSpec::DistinctInserts { n: int(n)? }),
            ["cycles", n, c] => Ok(GeneratorSpec::InsertDeleteCycles {
                n: int(n)?,
                cycles: int(c)?,
            }),
            ["weighted", n, lo, hi] => {
                let (delta_min, delta_max) = (real(lo)?, real(hi)?);
                if !(delta_min > 0.0 && delta_min <= delta_max && delta_max.is_finite()) {
                    return Err(bad());
                }
                Ok(GeneratorSpec::WeightedIncs {
                    n: int(n)?,
                    delta_min,
                    delta_max,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Keys produced by generators stay below 2^48 so they can be mapped by the
/// Bernstein element map.
const GENERATED_KEY_MASK: u64 = (1 << 48) - 1;

fn distinct_keys(n: u64, rng: &mut RandomSource) -> Vec<Key> {
    let mut seen = HashSet::with_capacity(n as usize);
    let mut keys = Vec::with_capacity(n as usize);
    while (keys.len() as u64) < n {
        let k = rng.next_u64() & GENERATED_KEY_MASK;
        if seen.insert(k) {
            keys.push(Key(k));
        }
    }
    keys
}

/// Materializes a generator. Deterministic in `(spec, seed)`.
pub fn generate_stream(spec: &GeneratorSpec, seed: RngSeed) -> Vec<UpdateOp> {
    let mut rng = RandomSource::new(seed);
    match *spec {
        GeneratorSpec::DistinctInserts { n } => distinct_keys(n, &mut rng)
            .into_iter()
            .map(UpdateOp::Insert)
            .collect(),
        GeneratorSpec::InsertDeleteCycles { n, cycles } => {
            let keys = distinct_keys(n, &mut rng);
            let mut ops = Vec::with_capacity(spec.len() as usize);
            for _ in 0..cycles {
                ops.extend(keys.iter().map(|k| UpdateOp::Insert(*k)));
                ops.extend(keys.iter().map(|k| UpdateOp::Delete(*k)));
            }
            ops
        }
        GeneratorSpec::WeightedIncs {
            n,
            delta_min,
            delta_max,
        } => {
            let universe = distinct_keys(n.div_ceil(4), &mut rng);
            (0..n)
                .map(|_| {
                    let key = universe[(rng.next_u64() % universe.len() as u64) as usize];
                    let delta = delta_min + (delta_max - delta_min) * rng.uniform();
                    UpdateOp::Inc { key, delta }
                })
                .collect()
        }
    }
}

/// Parses the line-oriented stream format.
///
/// One operation per line: `INC <key> <delta>`, `RST <key>`, `INS <key>`,
/// `DEL <key>` or `RSTR <lo> <hi>`. Blank lines and lines starting with `#`
/// are skipped. Errors carry the 1-based line number.
pub fn parse_stream(text: &str) -> Result<Vec<UpdateOp>> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        ops.push(parse_line(line).map_err(|message| SketchError::Parse {
            line: idx + 1,
            message,
        })?);
    }
    Ok(ops)
}

fn parse_line(line: &str) -> std::result::Result<UpdateOp, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let key = |s: &str| {
        s.parse::<u64>()
            .map(Key)
            .map_err(|_| format!("invalid key `{s}`"))
    };
    let op = match fields.as_slice() {
        ["INC", k, d] => {
            let delta = d
                .parse::<f64>()
                .map_err(|_| format!("invalid delta `{d}`"))?;
            UpdateOp::Inc {
                key: key(k)?,
                delta,
            }
        }
        ["RST", k] => UpdateOp::ResetKey(key(k)?),
        ["INS", k] => UpdateOp::Insert(key(k)?),
        ["DEL", k] => UpdateOp::Delete(key(k)?),
        ["RSTR", lo, hi] => {
            let (lo, hi) = (key(lo)?, key(hi)?);
            if lo > hi {
                return Err(format!("empty range {lo}..={hi}"));
            }
            UpdateOp::ResetPred(Predicate::KeyRange { lo, hi })
        }
        _ => return Err(format!("unrecognized operation `{line}`")),
    };
    op.validate().map_err(|e| e.to_string())?;
    Ok(op)
}
