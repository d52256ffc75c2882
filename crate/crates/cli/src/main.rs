use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use sketchlab::adversary::AttackKind;
use sketchlab::bernstein::BernsteinFunction;
use sketchlab::harness::{
    run_experiment, summarize, write_outputs, ExperimentConfig, InputSpec, SketchSpec, TrialResult,
};
use sketchlab::randomness::SEED_ENV_VAR;
use sketchlab::stream::GeneratorSpec;
use sketchlab::{NoiseMode, SketchError};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sketchlab",
    version,
    about = "Adaptively robust sketches for resettable streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print per-trial results.
    Run(Box<RunArgs>),
    /// Both adaptive attacks against the standard and the robust cardinality
    /// sketches.
    AttackDemo(DemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SketchKind {
    CardBernoulli,
    CardRobustFixed,
    CardRobustAdaptive,
    SumBasic,
    SumRobust,
    SumPrefixmax,
    Bernstein,
}

#[derive(Clone, Debug)]
enum AttackArg {
    None,
    Attack(AttackKind),
    Replay(PathBuf),
}

fn parse_attack(s: &str) -> Result<AttackArg, String> {
    match s {
        "none" => Ok(AttackArg::None),
        "reinsert" => Ok(AttackArg::Attack(AttackKind::Reinsert)),
        "sample-delete" => Ok(AttackArg::Attack(AttackKind::SampleDelete)),
        _ => match s.strip_prefix("replay:") {
            Some(path) if !path.is_empty() => Ok(AttackArg::Replay(path.into())),
            _ => Err("expected none, reinsert, sample-delete or replay:<path>".into()),
        },
    }
}

#[derive(Args)]
struct RunArgs {
    /// Load the experiment from a TOML file; other flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    sketch: Option<SketchKind>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Horizon used in the parameter formulas; also the attack length.
    #[arg(short = 'T', long = "horizon")]
    horizon: Option<u64>,
    /// none | reinsert | sample-delete | replay:<path>
    #[arg(long, value_parser = parse_attack)]
    attack: Option<AttackArg>,
    /// Fresh-key rounds for an attack (default: the horizon).
    #[arg(long)]
    rounds: Option<u64>,
    /// Stream file to replay.
    #[arg(long, conflicts_with = "gen")]
    stream: Option<PathBuf>,
    /// distinct:<n> | cycles:<n>:<cycles> | weighted:<n>:<dmin>:<dmax>
    #[arg(long)]
    gen: Option<GeneratorSpec>,
    #[arg(long, env = SEED_ENV_VAR)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u32>,
    /// live | zero
    #[arg(long)]
    noise: Option<NoiseMode>,
    /// Directory for config.toml, metrics.csv and per-trial traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each trial's tree node noise.
    #[arg(long)]
    dump_tree_noise: bool,

    /// Sampling rate (initial rate for card-robust-adaptive).
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Clip level for sum-robust.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    scale_max: Option<f64>,
    /// moment:<p> | log1p | softcap:<cap>
    #[arg(long)]
    f: Option<BernsteinFunction>,
    #[arg(long)]
    r: Option<u32>,
    #[arg(long)]
    dmin: Option<f64>,
    #[arg(long)]
    dmax: Option<f64>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k_const: Option<f64>,
    #[arg(long)]
    alpha_const: Option<f64>,
    #[arg(long)]
    tau_const: Option<f64>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(short = 'T', long = "horizon", default_value_t = 10_000)]
    horizon: u64,
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 20)]
    trials: u32,
    #[arg(long, env = SEED_ENV_VAR, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "live")]
    noise: NoiseMode,
    /// Write each run under <out>/<attack>/<sketch>.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(msg: impl Into<String>) -> SketchError {
    SketchError::Config(msg.into())
}

fn sketch_spec(
    kind: SketchKind,
    a: &RunArgs,
    input: Option<&InputSpec>,
) -> Result<SketchSpec, SketchError> {
    let one = |x: Option<f64>| x.unwrap_or(1.0);
    // Increment range defaults to the weighted generator's range.
    let (gen_min, gen_max) = match input {
        Some(InputSpec::Generator {
            generator:
                GeneratorSpec::WeightedIncs {
                    delta_min,
                    delta_max,
                    ..
                },
        }) => (Some(*delta_min), Some(*delta_max)),
        _ => (None, None),
    };
    Ok(match kind {
        SketchKind::CardBernoulli => SketchSpec::CardBernoulli {
            p: a.p.unwrap_or(0.1),
        },
        SketchKind::CardRobustFixed => SketchSpec::CardRobustFixed {
            p: a.p.unwrap_or(0.1),
        },
        SketchKind::CardRobustAdaptive => SketchSpec::CardRobustAdaptive {
            p0: one(a.p),
            k: a.k,
            alpha: a.alpha,
            k_const: one(a.k_const),
            alpha_const: one(a.alpha_const),
        },
        SketchKind::SumBasic => SketchSpec::SumBasic { tau: one(a.tau) },
        SketchKind::SumRobust => SketchSpec::SumRobust {
            tau: one(a.tau),
            clip: a.clip,
        },
        SketchKind::SumPrefixmax => SketchSpec::SumPrefixmax {
            scale_max: a.scale_max,
            tau_const: one(a.tau_const),
        },
        SketchKind::Bernstein => SketchSpec::Bernstein {
            f: a.f
                .ok_or_else(|| config_error("--sketch bernstein needs --f"))?,
            r: a.r.unwrap_or(64),
            delta_min: one(a.dmin.or(gen_min)),
            delta_max: one(a.dmax.or(gen_max)),
            k_const: one(a.k_const),
            alpha_const: one(a.alpha_const),
            tau_const: one(a.tau_const),
        },
    })
}

fn input_spec(a: &RunArgs) -> Result<Option<InputSpec>, SketchError> {
    let attack = match &a.attack {
        None | Some(AttackArg::None) => None,
        Some(AttackArg::Attack(kind)) => Some(InputSpec::Attack {
            attack: *kind,
            rounds: a.rounds,
        }),
        Some(AttackArg::Replay(path)) => Some(InputSpec::File { path: path.clone() }),
    };
    let file = a.stream.clone().map(|path| InputSpec::File { path });
    let generated = a
        .gen
        .clone()
        .map(|generator| InputSpec::Generator { generator });
    let mut given: Vec<InputSpec> = [attack, file, generated].into_iter().flatten().collect();
    match given.len() {
        0 => Ok(None),
        1 => Ok(given.pop()),
        _ => Err(config_error(
            "give only one of --attack, --stream and --gen",
        )),
    }
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig, SketchError> {
    let input = input_spec(a)?;
    let mut cfg = match &a.config {
        Some(path) => {
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(input) = input {
                cfg.input = input;
            }
            if let Some(kind) = a.sketch {
                cfg.sketch = sketch_spec(kind, a, Some(&cfg.input))?;
            }
            cfg
        }
        None => {
            let kind = a
                .sketch
                .ok_or_else(|| config_error("--sketch is required"))?;
            let input = input.ok_or_else(|| {
                config_error(
                    "an input is required: --attack <kind>, --stream <file> or --gen <spec>",
                )
            })?;
            ExperimentConfig {
                eps: 0.1,
                delta: 0.05,
                horizon: 10_000,
                seed: 0,
                trials: 1,
                noise: NoiseMode::Live,
                out: None,
                dump_tree_noise: false,
                sketch: sketch_spec(kind, a, Some(&input))?,
                input,
            }
        }
    };
    cfg.eps = a.eps.unwrap_or(cfg.eps);
    cfg.delta = a.delta.unwrap_or(cfg.delta);
    cfg.horizon = a.horizon.unwrap_or(cfg.horizon);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.trials = a.trials.unwrap_or(cfg.trials);
    cfg.noise = a.noise.unwrap_or(cfg.noise);
    cfg.out = a.out.clone().or(cfg.out);
    cfg.dump_tree_noise |= a.dump_tree_noise;
    if let (Some(rounds), InputSpec::Attack { rounds: r, .. }) = (a.rounds, &mut cfg.input) {
        *r = Some(rounds);
    }
    Ok(cfg)
}

fn exit_code(e: &SketchError) -> u8 {
    match e {
        SketchError::Config(_) | SketchError::InvalidParameter(_) | SketchError::Parse { .. } => {
            EXIT_CONFIG
        }
        SketchError::CapacityExceeded { .. } | SketchError::Io(_) => EXIT_RUNTIME,
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

fn print_trials(results: &[TrialResult]) {
    println!(
        "{:>5}  {:>8}  {:>14}  {:>14}  {:>12}  {:>10}  {:>8}",
        "trial", "steps", "final_est", "final_truth", "max_norm_err", "max_sample", "halvings"
    );
    for r in results {
        let (est, truth) = r.trace.last().map_or((0.0, 0.0), |x| (x.estimate, x.truth));
        println!(
            "{:>5}  {:>8}  {:>14}  {:>14}  {:>12}  {:>10}  {:>8}{}",
            r.trial,
            r.metrics.steps,
            fmt(est),
            fmt(truth),
            fmt(r.metrics.max_norm_err),
            r.metrics.max_sample_size,
            r.metrics.halvings,
            r.error
                .as_ref()
                .map_or(String::new(), |e| format!("  error: {e}")),
        );
    }
}

fn run(args: &RunArgs) -> Result<bool, SketchError> {
    let cfg = build_config(args)?;
    info!("running {} with {} trial(s)", cfg.sketch.name(), cfg.trials);
    let results = run_experiment(&cfg)?;
    print_trials(&results);
    let s = summarize(&results);
    println!(
        "{}: {} trial(s), {} failed; mean final estimate {}, mean truth {}, mean bias {}, \
         mean max norm err {}, worst {}",
        cfg.sketch.name(),
        s.trials,
        s.failed,
        fmt(s.mean_final_estimate),
        fmt(s.mean_final_truth),
        fmt(s.mean_final_bias),
        fmt(s.mean_max_norm_err),
        fmt(s.worst_max_norm_err),
    );
    if let Some(dir) = &cfg.out {
        write_outputs(&cfg, &results, dir)?;
        println!("wrote {}", dir.display());
    }
    for r in results.iter().filter(|r| r.error.is_some()) {
        error!(
            "trial {}: {}",
            r.trial,
            r.error.as_deref().unwrap_or_default()
        );
    }
    Ok(s.failed == 0)
}

fn attack_demo(a: &DemoArgs) -> Result<bool, SketchError> {
    let sketches = [
        SketchSpec::CardBernoulli { p: a.p },
        SketchSpec::CardRobustFixed { p: a.p },
        SketchSpec::CardRobustAdaptive {
            p0: 1.0,
            k: None,
            alpha: None,
            k_const: 1.0,
            alpha_const: 1.0,
        },
    ];
    let mut ok = true;
    for attack in [AttackKind::Reinsert, AttackKind::SampleDelete] {
        let label = match attack {
            AttackKind::Reinsert => "reinsert",
            AttackKind::SampleDelete => "sample-delete",
        };
        println!("attack {label}, {} rounds, {} trials", a.horizon, a.trials);
        println!(
            "  {:<22} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "sketch", "final_est", "final_truth", "bias", "rel_err", "max_norm_err"
        );
        for sketch in &sketches {
            let cfg = ExperimentConfig {
                eps: a.eps,
                delta: a.delta,
                horizon: a.horizon,
                seed: a.seed,
                trials: a.trials,
                noise: a.noise,
                out: None,
                dump_tree_noise: false,
                sketch: sketch.clone(),
                input: InputSpec::Attack {
                    attack,
                    rounds: None,
                },
            };
            let results = run_experiment(&cfg)?;
            let s = summarize(&results);
            ok &= s.failed == 0;
            let rel = if s.mean_final_truth > 0.0 {
                s.mean_final_bias.abs() / s.mean_final_truth
            } else {
                0.0
            };
            println!(
                "  {:<22} {:>12} {:>12} {:>12} {:>12} {:>12}",
                sketch.name(),
                fmt(s.mean_final_estimate),
                fmt(s.mean_final_truth),
                fmt(s.mean_final_bias),
                fmt(rel),
                fmt(s.mean_max_norm_err),
            );
            if let Some(out) = &a.out {
                write_outputs(&cfg, &results, &out.join(label).join(sketch.name()))?;
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::AttackDemo(args) => attack_demo(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
