//! Experiment runner: sketch × input source × exact oracle.
//!
//! Each trial derives its own seed from `(seed, trial)`, so results do not
//! depend on how trials are scheduled across threads.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{default_tolerance, Adversary, AttackKind};
use crate::bernstein::{BernsteinConfig, BernsteinFunction, BernsteinSketch};
use crate::cardinality::{
    adaptive_tree_capacity, card_params, AdaptiveCardConfig, BernoulliCardSketch, CardConstants,
    RobustAdaptiveCard, RobustFixedCard,
};
use crate::randomness::{NoiseMode, RngSeed};
use crate::sketch::{Diagnostics, Sketch};
use crate::stream::{
    generate_stream, parse_stream, ExactTracker, GeneratorSpec, StatisticKind, UpdateOp,
};
use crate::sum::{PrefixMaxConfig, PrefixMaxSum, ResettableSumSketch, RobustSumFixed};
use crate::tree::{write_node_csv, NodeRecord};
use crate::{Result, SketchError};

/// Header of the per-trial trace CSV.
pub const TRACE_HEADER: [&str; 7] = [
    "t",
    "op",
    "estimate",
    "truth",
    "prefix_max",
    "abs_err",
    "norm_err",
];

fn one() -> f64 {
    1.0
}

fn default_r() -> u32 {
    64
}

fn default_trials() -> u32 {
    1
}

/// Sketch under test and its own parameters. Shared parameters (`ε`, `δ`,
/// `T`, noise) live on [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SketchSpec {
    CardBernoulli {
        p: f64,
    },
    CardRobustFixed {
        p: f64,
    },
    CardRobustAdaptive {
        #[serde(default = "one")]
        p0: f64,
        /// Overrides the budget from the parameter formula.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<u64>,
        /// Overrides the margin from the parameter formula.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default = "one")]
        k_const: f64,
        #[serde(default = "one")]
        alpha_const: f64,
    },
    SumBasic {
        tau: f64,
    },
    SumRobust {
        tau: f64,
        /// Defaults to `τ · ln(T/δ)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clip: Option<f64>,
    },
    SumPrefixmax {
        /// Defaults to `T · Δ_max` of the input.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale_max: Option<f64>,
        #[serde(default = "one")]
        tau_const: f64,
    },
    Bernstein {
        f: BernsteinFunction,
        #[serde(default = "default_r")]
        r: u32,
        #[serde(default = "one")]
        delta_min: f64,
        #[serde(default = "one")]
        delta_max: f64,
        #[serde(default = "one")]
        k_const: f64,
        #[serde(default = "one")]
        alpha_const: f64,
        #[serde(default = "one")]
        tau_const: f64,
    },
}

impl SketchSpec {
    /// Command-line name of the sketch.
    pub fn name(&self) -> &'static str {
        match self {
            SketchSpec::CardBernoulli { .. } => "card-bernoulli",
            SketchSpec::CardRobustFixed { .. } => "card-robust-fixed",
            SketchSpec::CardRobustAdaptive { .. } => "card-robust-adaptive",
            SketchSpec::SumBasic { .. } => "sum-basic",
            SketchSpec::SumRobust { .. } => "sum-robust",
            SketchSpec::SumPrefixmax { .. } => "sum-prefixmax",
            SketchSpec::Bernstein { .. } => "bernstein",
        }
    }

    /// Change-detection tolerance for adaptive attacks on this sketch.
    fn attack_tolerance(&self) -> f64 {
        match self {
            SketchSpec::CardBernoulli { p } | SketchSpec::CardRobustFixed { p } => {
                default_tolerance(*p)
            }
            SketchSpec::CardRobustAdaptive { p0, .. } => default_tolerance(*p0),
            _ => 0.0,
        }
    }
}

/// Where the update stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputSpec {
    /// Adaptive attack with `rounds` fresh-key inserts (default: the horizon).
    Attack {
        attack: AttackKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rounds: Option<u64>,
    },
    Generator {
        generator: GeneratorSpec,
    },
    /// Stream file replayed verbatim.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub eps: f64,
    pub delta: f64,
    /// Horizon `T` used in parameter formulas.
    pub horizon: u64,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub noise: NoiseMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Write each trial's tree node noise next to its trace.
    #[serde(default)]
    pub dump_tree_noise: bool,
    pub sketch: SketchSpec,
    pub input: InputSpec,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SketchError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SketchError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SketchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks shared parameters and that the sketch can be built.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SketchError::Config(msg));
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.horizon < 2 {
            return bad("horizon T must be at least 2".into());
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if let InputSpec::Attack {
            rounds: Some(0), ..
        } = self.input
        {
            return bad("attack rounds must be positive".into());
        }
        let bound = match &self.input {
            InputSpec::Attack { rounds, .. } => 2 * rounds.unwrap_or(self.horizon),
            InputSpec::Generator { generator } => generator.len(),
            InputSpec::File { .. } => self.horizon,
        };
        build_sketch(self, bound.max(2), 1.0, RngSeed(self.seed))
            .map(|_| ())
            .map_err(|e| match e {
                SketchError::InvalidParameter(msg) => SketchError::Config(msg),
                other => other,
            })
    }
}

/// Instantiates the configured sketch for at most `op_bound` operations with
/// increments up to `max_delta`.
pub fn build_sketch(
    cfg: &ExperimentConfig,
    op_bound: u64,
    max_delta: f64,
    seed: RngSeed,
) -> Result<Box<dyn Sketch>> {
    let capacity = op_bound.max(1);
    Ok(match &cfg.sketch {
        SketchSpec::CardBernoulli { p } => Box::new(BernoulliCardSketch::new(*p, seed)?),
        SketchSpec::CardRobustFixed { p } => Box::new(RobustFixedCard::new(
            *p, cfg.eps, capacity, cfg.noise, seed,
        )?),
        SketchSpec::CardRobustAdaptive {
            p0,
            k,
            alpha,
            k_const,
            alpha_const,
        } => {
            let params = card_params(
                cfg.eps,
                cfg.delta,
                cfg.horizon,
                CardConstants {
                    k_const: *k_const,
                    alpha_const: *alpha_const,
                },
            )?;
            let card = AdaptiveCardConfig {
                p0: *p0,
                k: k.unwrap_or(params.k),
                alpha: alpha.unwrap_or(params.alpha),
                eps_dp: params.eps_dp,
                capacity: adaptive_tree_capacity(capacity),
                noise: cfg.noise,
            };
            Box::new(RobustAdaptiveCard::new(card, seed)?)
        }
        SketchSpec::SumBasic { tau } => Box::new(ResettableSumSketch::new(*tau, seed)?),
        SketchSpec::SumRobust { tau, clip } => {
            let clip = clip.unwrap_or(tau * (cfg.horizon as f64 / cfg.delta).ln());
            Box::new(RobustSumFixed::new(
                *tau, clip, cfg.eps, capacity, cfg.noise, seed,
            )?)
        }
        SketchSpec::SumPrefixmax {
            scale_max,
            tau_const,
        } => Box::new(PrefixMaxSum::new(
            PrefixMaxConfig {
                eps: cfg.eps,
                delta: cfg.delta,
                horizon: cfg.horizon,
                scale_max: scale_max.unwrap_or((op_bound as f64 * max_delta).max(2.0)),
                tau_const: *tau_const,
                capacity,
                noise: cfg.noise,
            },
            seed,
        )?),
        SketchSpec::Bernstein {
            f,
            r,
            delta_min,
            delta_max,
            k_const,
            alpha_const,
            tau_const,
        } => Box::new(BernsteinSketch::new(
            BernsteinConfig {
                f: *f,
                eps: cfg.eps,
                delta: cfg.delta,
                horizon: op_bound.max(2),
                delta_min: *delta_min,
                delta_max: *delta_max,
                r: *r,
                noise: cfg.noise,
                card_consts: CardConstants {
                    k_const: *k_const,
                    alpha_const: *alpha_const,
                },
                tau_const: *tau_const,
            },
            seed,
        )?),
    })
}

/// One step of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    /// Operation in the stream text format.
    pub op: String,
    /// Raw released estimate.
    pub estimate: f64,
    pub truth: f64,
    pub prefix_max: f64,
    /// `|max(estimate, 0) − truth|`.
    pub abs_err: f64,
    /// `abs_err / max(prefix_max, 1)`.
    pub norm_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub steps: u64,
    pub max_norm_err: f64,
    /// Final raw estimate minus final truth.
    pub final_bias: f64,
    pub max_sample_size: usize,
    pub halvings: u32,
    pub tree_counters_peak: usize,
    pub capped_adjustments: u32,
}

impl Metrics {
    pub fn from_trace(trace: &[TraceRecord], diag: &Diagnostics) -> Self {
        Metrics {
            steps: trace.len() as u64,
            max_norm_err: trace.iter().map(|r| r.norm_err).fold(0.0, f64::max),
            final_bias: trace.last().map_or(0.0, |r| r.estimate - r.truth),
            max_sample_size: diag.max_sample_size,
            halvings: diag.halvings,
            tree_counters_peak: diag.tree_counters_peak,
            capped_adjustments: diag.capped_adjustments,
        }
    }
}

/// Exact statistic and its running maximum. Real-valued statistics are
/// recomputed from the key map in key order at every step, so the values do
/// not depend on the order of earlier updates.
#[derive(Debug, Clone)]
struct Truth {
    tracker: ExactTracker,
    kind: StatisticKind,
    prefix_max: f64,
}

impl Truth {
    fn new(kind: StatisticKind) -> Self {
        Truth {
            tracker: ExactTracker::with_statistics(&[kind]),
            kind,
            prefix_max: 0.0,
        }
    }

    fn apply(&mut self, op: &UpdateOp) -> Result<(f64, f64)> {
        self.tracker.apply(op)?;
        let value = match self.kind {
            StatisticKind::Cardinality => self.tracker.current(self.kind),
            _ => self.tracker.exact_statistic(self.kind),
        };
        self.prefix_max = self.prefix_max.max(value);
        Ok((value, self.prefix_max))
    }
}

/// Runs `source` against `sketch` until the source is exhausted or an error
/// occurs. The trace up to the failing step is returned with the error.
pub fn run_duel(
    sketch: &mut dyn Sketch,
    source: &mut Adversary,
) -> (Vec<TraceRecord>, Option<SketchError>) {
    let mut truth = Truth::new(sketch.statistic());
    let mut trace = Vec::new();
    let mut last = None;
    while let Some(op) = source.next_op(last) {
        let estimate = match sketch.process(&op) {
            Ok(e) => e,
            Err(e) => return (trace, Some(e)),
        };
        let (value, prefix_max) = match truth.apply(&op) {
            Ok(v) => v,
            Err(e) => return (trace, Some(e)),
        };
        let abs_err = (estimate.max(0.0) - value).abs();
        trace.push(TraceRecord {
            t: trace.len() as u64 + 1,
            op: op.to_string(),
            estimate,
            truth: value,
            prefix_max,
            abs_err,
            norm_err: abs_err / prefix_max.max(1.0),
        });
        last = Some(estimate);
    }
    (trace, None)
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: u32,
    pub seed: RngSeed,
    pub trace: Vec<TraceRecord>,
    pub metrics: Metrics,
    /// Error that ended the trial early, if any.
    pub error: Option<String>,
    /// Tree node noise, when requested and supported by the sketch.
    pub tree_noise: Option<Vec<NodeRecord>>,
}

fn max_increment(ops: &[UpdateOp]) -> f64 {
    ops.iter()
        .map(|op| match op {
            UpdateOp::Inc { delta, .. } => *delta,
            _ => 1.0,
        })
        .fold(1.0, f64::max)
}

/// Stream source for one trial, with its operation bound and largest
/// increment.
fn input_source(cfg: &ExperimentConfig, seed: RngSeed) -> Result<(Adversary, u64, f64)> {
    let fixed = |ops: Vec<UpdateOp>, replay: bool| {
        let bound = ops.len() as u64;
        let dmax = max_increment(&ops);
        let adv = if replay {
            Adversary::replay(ops)
        } else {
            Adversary::non_adaptive(ops)
        };
        (adv, bound, dmax)
    };
    Ok(match &cfg.input {
        InputSpec::Attack { attack, rounds } => {
            let adv = Adversary::attack(
                *attack,
                rounds.unwrap_or(cfg.horizon),
                cfg.sketch.attack_tolerance(),
            );
            let bound = adv.max_ops();
            (adv, bound, 1.0)
        }
        InputSpec::Generator { generator } => fixed(generate_stream(generator, seed), false),
        InputSpec::File { path } => fixed(parse_stream_file(path)?, true),
    })
}

/// Runs one trial. Errors are captured in the result.
pub fn run_trial(cfg: &ExperimentConfig, trial: u32) -> TrialResult {
    let seed = RngSeed(cfg.seed).derive(u64::from(trial));
    let mut result = TrialResult {
        trial,
        seed,
        trace: Vec::new(),
        metrics: Metrics::default(),
        error: None,
        tree_noise: None,
    };
    let setup = input_source(cfg, seed.derive_named("input")).and_then(|(adv, bound, dmax)| {
        build_sketch(cfg, bound, dmax, seed.derive_named("sketch")).map(|sk| (adv, sk))
    });
    let (mut source, mut sketch) = match setup {
        Ok(v) => v,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let ledger = cfg.dump_tree_noise && sketch.enable_noise_ledger();
    let (trace, err) = run_duel(sketch.as_mut(), &mut source);
    result.metrics = Metrics::from_trace(&trace, &sketch.diagnostics());
    result.trace = trace;
    result.error = err.map(|e| e.to_string());
    if ledger {
        result.tree_noise = Some(sketch.noise_ledger());
    }
    result
}

/// Runs all trials in parallel. Fails only on an invalid configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    Ok((0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, trial))
        .collect())
}

/// Aggregate over trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub trials: usize,
    pub failed: usize,
    pub mean_final_estimate: f64,
    pub mean_final_truth: f64,
    pub mean_final_bias: f64,
    pub mean_max_norm_err: f64,
    pub worst_max_norm_err: f64,
}

pub fn summarize(results: &[TrialResult]) -> Summary {
    let ok: Vec<&TrialResult> = results.iter().filter(|r| r.error.is_none()).collect();
    let n = ok.len().max(1) as f64;
    let mean = |f: &dyn Fn(&TrialResult) -> f64| ok.iter().fold(0.0, |acc, r| acc + f(r)) / n;
    Summary {
        trials: results.len(),
        failed: results.len() - ok.len(),
        mean_final_estimate: mean(&|r| r.trace.last().map_or(0.0, |x| x.estimate)),
        mean_final_truth: mean(&|r| r.trace.last().map_or(0.0, |x| x.truth)),
        mean_final_bias: mean(&|r| r.metrics.final_bias),
        mean_max_norm_err: mean(&|r| r.metrics.max_norm_err),
        worst_max_norm_err: ok
            .iter()
            .map(|r| r.metrics.max_norm_err)
            .fold(0.0, f64::max),
    }
}

/// `x` rounded to 12 significant digits.
pub fn round_sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn fmt_real(x: f64) -> String {
    round_sig12(x).to_string()
}

fn parse_real(field: &str, row: usize) -> Result<f64> {
    field.parse().map_err(|e| SketchError::Parse {
        line: row,
        message: format!("bad number `{field}`: {e}"),
    })
}

fn csv_error(e: csv::Error) -> SketchError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SketchError::Io(io),
        other => SketchError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes a trace as CSV with reals rounded to 12 significant digits.
pub fn write_csv<W: Write>(trace: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_error)?;
    for r in trace {
        w.write_record([
            r.t.to_string(),
            r.op.clone(),
            fmt_real(r.estimate),
            fmt_real(r.truth),
            fmt_real(r.prefix_max),
            fmt_real(r.abs_err),
            fmt_real(r.norm_err),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_csv`].
pub fn parse_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(SketchError::Parse {
            line: 1,
            message: format!(
                "unexpected header `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_error)?;
        let line = i + 2;
        if row.len() != TRACE_HEADER.len() {
            return Err(SketchError::Parse {
                line,
                message: format!("expected {} fields, got {}", TRACE_HEADER.len(), row.len()),
            });
        }
        out.push(TraceRecord {
            t: row[0].parse().map_err(|e| SketchError::Parse {
                line,
                message: format!("bad step `{}`: {e}", &row[0]),
            })?,
            op: row[1].to_string(),
            estimate: parse_real(&row[2], line)?,
            truth: parse_real(&row[3], line)?,
            prefix_max: parse_real(&row[4], line)?,
            abs_err: parse_real(&row[5], line)?,
            norm_err: parse_real(&row[6], line)?,
        });
    }
    Ok(out)
}

/// Reads a stream file in the text format (`INC k d`, `RST k`, `INS k`,
/// `DEL k`, `RSTR lo hi`; `#` comments and blank lines are skipped).
pub fn parse_stream_file(path: &Path) -> Result<Vec<UpdateOp>> {
    let text = fs::read_to_string(path).map_err(|e| {
        SketchError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_stream(&text)
}

/// Writes `config.toml`, `metrics.csv`, one `trial_NNNN.csv` per trial and,
/// when recorded, `trial_NNNN_tree_noise.csv`.
pub fn write_outputs(cfg: &ExperimentConfig, results: &[TrialResult], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut metrics = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_error)?;
    metrics
        .write_record([
            "trial",
            "seed",
            "steps",
            "max_norm_err",
            "final_bias",
            "max_sample_size",
            "halvings",
            "tree_counters_peak",
            "capped_adjustments",
            "error",
        ])
        .map_err(csv_error)?;
    for r in results {
        let m = &r.metrics;
        metrics
            .write_record([
                r.trial.to_string(),
                r.seed.0.to_string(),
                m.steps.to_string(),
                fmt_real(m.max_norm_err),
                fmt_real(m.final_bias),
                m.max_sample_size.to_string(),
                m.halvings.to_string(),
                m.tree_counters_peak.to_string(),
                m.capped_adjustments.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_error)?;
        let file = fs::File::create(dir.join(format!("trial_{:04}.csv", r.trial)))?;
        write_csv(&r.trace, std::io::BufWriter::new(file))?;
        if let Some(nodes) = &r.tree_noise {
            let file = fs::File::create(dir.join(format!("trial_{:04}_tree_noise.csv", r.trial)))?;
            write_node_csv(nodes, std::io::BufWriter::new(file))?;
        }
    }
    metrics.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(sketch: SketchSpec, input: InputSpec) -> ExperimentConfig {
        ExperimentConfig {
            eps: 0.2,
            delta: 0.1,
            horizon: 100,
            seed: 7,
            trials: 1,
            noise: NoiseMode::Live,
            out: None,
            dump_tree_noise: false,
            sketch,
            input,
        }
    }

    #[test]
    fn exact_bernoulli_trace() {
        let cfg = base(
            SketchSpec::CardBernoulli { p: 1.0 },
            InputSpec::Generator {
                generator: GeneratorSpec::DistinctInserts { n: 5 },
            },
        );
        let results = run_experiment(&cfg).unwrap();
        let r = &results[0];
        let est: Vec<f64> = r.trace.iter().map(|x| x.estimate).collect();
        assert_eq!(est, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(r.metrics.max_norm_err, 0.0);
        assert!(r.error.is_none());
    }

    #[test]
    fn config_toml_roundtrip() {
        let configs = [
            base(
                SketchSpec::CardRobustAdaptive {
                    p0: 1.0,
                    k: Some(512),
                    alpha: None,
                    k_const: 1.0,
                    alpha_const: 2.0,
                },
                InputSpec::Attack {
                    attack: AttackKind::SampleDelete,
                    rounds: Some(1000),
                },
            ),
            base(
                SketchSpec::Bernstein {
                    f: BernsteinFunction::Moment { p: 0.5 },
                    r: 16,
                    delta_min: 1.0,
                    delta_max: 4.0,
                    k_const: 1.0,
                    alpha_const: 1.0,
                    tau_const: 1.0,
                },
                InputSpec::Generator {
                    generator: GeneratorSpec::WeightedIncs {
                        n: 10,
                        delta_min: 1.0,
                        delta_max: 4.0,
                    },
                },
            ),
            ExperimentConfig {
                out: Some(PathBuf::from("runs/a")),
                dump_tree_noise: true,
                noise: NoiseMode::Zero,
                ..base(
                    SketchSpec::SumRobust {
                        tau: 0.5,
                        clip: Some(3.0),
                    },
                    InputSpec::File {
                        path: PathBuf::from("in.txt"),
                    },
                )
            },
        ];
        for cfg in configs {
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let good = base(
            SketchSpec::CardBernoulli { p: 0.5 },
            InputSpec::Generator {
                generator: GeneratorSpec::DistinctInserts { n: 5 },
            },
        );
        assert!(good.validate().is_ok());
        for cfg in [
            ExperimentConfig {
                eps: 0.0,
                ..good.clone()
            },
            ExperimentConfig {
                delta: 1.0,
                ..good.clone()
            },
            ExperimentConfig {
                trials: 0,
                ..good.clone()
            },
            ExperimentConfig {
                sketch: SketchSpec::CardBernoulli { p: 2.0 },
                ..good.clone()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(SketchError::Config(_))));
        }
    }

    #[test]
    fn missing_file_is_a_trial_error() {
        let cfg = base(
            SketchSpec::SumBasic { tau: 1.0 },
            InputSpec::File {
                path: PathBuf::from("/nonexistent/stream.txt"),
            },
        );
        let results = run_experiment(&cfg).unwrap();
        assert!(results[0].error.as_deref().unwrap().contains("stream.txt"));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,op,estimate,truth,prefix_max,abs_err,norm_err\n"
        );
        let row = TraceRecord {
            t: 1,
            op: "INC 7 3.5".into(),
            estimate: 1.0 / 3.0,
            truth: 0.0,
            prefix_max: 2.0,
            abs_err: 1.0 / 3.0,
            norm_err: 1.0 / 6.0,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "1,INC 7 3.5,0.333333333333,0,2,0.333333333333,0.166666666667"
        );
    }

    #[test]
    fn round_sig12_values() {
        assert_eq!(round_sig12(0.0), 0.0);
        assert_eq!(round_sig12(123_456_789_012_345.0), 123_456_789_012_000.0);
        assert_eq!(round_sig12(-2.0 / 3.0), -0.666666666667);
    }
}
