mod common;

use proptest::prelude::*;
use rayon::prelude::*;
use sketchlab::bernstein::{
    decode_key, plan_levels, BernsteinConfig, BernsteinFunction, BernsteinSketch, ElementMapper,
};
use sketchlab::{Key, NoiseMode, RngSeed, UpdateOp};
use std::collections::BTreeSet;

const LOG_SPAN: f64 = 400.0;

/// Lévy densities written out independently of the library.
fn density(f: BernsteinFunction, t: f64) -> f64 {
    match f {
        BernsteinFunction::Moment { p } => {
            p / statrs::function::gamma::gamma(1.0 - p) * t.powf(-1.0 - p)
        }
        BernsteinFunction::Log1p => (-t).exp() / t,
        BernsteinFunction::SoftCap { .. } => unreachable!("atom"),
    }
}

/// `∫_lo^hi g(t) dt` over `u = ln t`, split so the quadrature sees the bulk of
/// the mass on a short interval.
fn integrate_log(g: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.ln().max(-LOG_SPAN), hi.ln().min(LOG_SPAN));
    let h = |u: f64| {
        let t = u.exp();
        let v = g(t) * t;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let mut cuts = vec![a];
    cuts.extend(
        [-30.0, -5.0, 5.0, 30.0]
            .into_iter()
            .filter(|c| *c > a && *c < b),
    );
    cuts.push(b);
    cuts.windows(2)
        .map(|w| common::integrate(h, w[0], w[1], 1e-15))
        .sum()
}

fn builtins() -> [BernsteinFunction; 5] {
    [
        BernsteinFunction::Moment { p: 0.1 },
        BernsteinFunction::Moment { p: 0.5 },
        BernsteinFunction::Moment { p: 0.9 },
        BernsteinFunction::Log1p,
        BernsteinFunction::SoftCap { cap: 10.0 },
    ]
}

#[test]
fn evaluate_matches_levy_integral() {
    for f in builtins()
        .into_iter()
        .filter(|f| !matches!(f, BernsteinFunction::SoftCap { .. }))
    {
        for w in [0.01, 0.5, 1.0, 4.0, 250.0] {
            let oracle = integrate_log(|t| density(f, t) * -(-w * t).exp_m1(), 0.0, f64::INFINITY);
            let got = f.evaluate(w);
            assert!(
                (got / oracle - 1.0).abs() < 1e-9,
                "{f} at {w}: {got} vs {oracle}"
            );
        }
    }
}

#[test]
fn soft_cap_is_its_atom() {
    for cap in [0.5, 1.0, 10.0] {
        let f = BernsteinFunction::SoftCap { cap };
        for w in [0.0, 0.1, 1.0, 7.0, 1e3] {
            // Unit mass T_c at t = 1/T_c.
            let atom = cap * (1.0 - (-w / cap).exp());
            assert!((f.evaluate(w) - atom).abs() <= 1e-12 * cap);
        }
        assert_eq!(f.tail_value(0.5 / cap), cap);
        assert_eq!(f.tail_value(2.0 / cap), 0.0);
        assert_eq!(f.head_weight(0.5 / cap), 0.0);
        assert_eq!(f.head_weight(2.0 / cap), 1.0);
    }
}

#[test]
fn tail_and_head_match_quadrature() {
    for f in builtins()
        .into_iter()
        .filter(|f| !matches!(f, BernsteinFunction::SoftCap { .. }))
    {
        for t in [1e-6, 1e-3, 0.3, 1.0, 5.0] {
            let v = integrate_log(|s| density(f, s), t, f64::INFINITY);
            assert!((f.tail_value(t) / v - 1.0).abs() < 1e-9, "{f}: V({t})");
            let a0 = integrate_log(|s| density(f, s) * s, 0.0, t);
            assert!(
                (f.head_weight(t) / a0 - 1.0).abs() < 1e-9,
                "{f}: alpha0({t})"
            );
        }
    }
}

#[test]
fn exact_oracle_examples() {
    use sketchlab::stream::KeyMap;
    let mut values = KeyMap::default();
    values.insert(Key(1), 1.0);
    let half = BernsteinFunction::Moment { p: 0.5 };
    assert_eq!(
        sketchlab::bernstein::exact_bernstein_oracle(&values, half),
        1.0
    );
    values.insert(Key(1), 4.0);
    values.insert(Key(2), 9.0);
    assert_eq!(
        sketchlab::bernstein::exact_bernstein_oracle(&values, half),
        5.0
    );
}

/// `L^c[W](t) = Σ_x (1 − e^{−w_x t})`.
fn laplace_complement(ws: &[f64], t: f64) -> f64 {
    ws.iter().map(|w| -(-w * t).exp_m1()).sum()
}

#[test]
fn level_sum_brackets_tail_integral() {
    let datasets: [&[f64]; 3] = [&[1.0], &[0.5, 1.0, 2.0, 4.0], &[0.25, 3.0, 3.0, 8.0, 16.0]];
    for f in builtins()
        .into_iter()
        .filter(|f| !matches!(f, BernsteinFunction::SoftCap { .. }))
    {
        for eps in [0.1, 0.25, 0.5] {
            let plan = plan_levels(f, eps, 64, 0.25, 16.0).unwrap();
            let tau_m = *plan.levels.last().unwrap();
            for ws in datasets {
                let riemann: f64 = plan
                    .weights
                    .iter()
                    .zip(&plan.levels)
                    .map(|(a, t)| a * laplace_complement(ws, *t))
                    .sum();
                let tail = integrate_log(
                    |t| density(f, t) * laplace_complement(ws, t),
                    plan.tau,
                    tau_m,
                );
                let v_m = f.tail_value(tau_m);
                let n = ws.len() as f64;
                let slack = 1e-7 * riemann;
                assert!(tail <= riemann + slack, "{f} eps {eps}: {tail} > {riemann}");
                assert!(
                    riemann <= (1.0 + eps) * tail + eps * v_m * n + slack,
                    "{f} eps {eps}: {riemann} vs {tail}"
                );
            }
        }
    }
}

#[test]
fn level_plans_are_well_formed_over_a_grid() {
    for f in builtins() {
        for eps in [0.1, 0.25, 0.5, 0.9] {
            for horizon in [2u64, 16, 1024, 1_000_000] {
                for (dmin, dmax) in [(1.0, 1.0), (0.5, 4.0), (0.01, 100.0)] {
                    let plan = plan_levels(f, eps, horizon, dmin, dmax).unwrap();
                    let ctx = format!("{f} eps {eps} T {horizon} [{dmin}, {dmax}]");
                    assert!(plan.levels.windows(2).all(|w| w[0] < w[1]), "{ctx}");
                    assert!(plan.weights.iter().all(|a| *a >= 0.0), "{ctx}");
                    assert!(plan.levels.first().is_none_or(|t| *t > plan.tau), "{ctx}");
                    let tau = eps.sqrt() / (horizon as f64 * dmax);
                    assert!((plan.tau / tau - 1.0).abs() < 1e-15, "{ctx}");
                    if let BernsteinFunction::SoftCap { cap } = f {
                        assert_eq!(plan.m(), usize::from(tau < 1.0 / cap), "{ctx}");
                        continue;
                    }
                    let v_tau = integrate_log(|t| density(f, t), tau, f64::INFINITY);
                    let v_floor = eps / horizon as f64 * f.evaluate(dmin);
                    // Truncation keeps the first target at or below the floor,
                    // so every earlier one sits above it.
                    let bound = ((v_tau / v_floor).ln() / eps.ln_1p() + 1.0).ceil().max(1.0);
                    assert!(
                        (plan.m() as f64) <= bound,
                        "{ctx}: m {} > {bound}",
                        plan.m()
                    );
                    let tau_m = *plan.levels.last().unwrap();
                    let mass = integrate_log(|t| density(f, t), tau, tau_m);
                    let total: f64 = plan.weights.iter().sum();
                    assert!(
                        (total / mass - 1.0).abs() < 1e-7,
                        "{ctx}: {total} vs {mass}"
                    );
                }
            }
        }
    }
}

#[test]
fn moment_level_count_example() {
    let plan = plan_levels(BernsteinFunction::Moment { p: 0.5 }, 0.25, 16, 1.0, 1.0).unwrap();
    let bound = (256.0 * 0.25f64.powf(-1.5) * 2.0).ln() / 1.25f64.ln();
    assert!(
        plan.m() as f64 <= bound.ceil(),
        "m {} vs {}",
        plan.m(),
        bound.ceil()
    );
}

#[test]
fn square_root_of_one_key() {
    let f = BernsteinFunction::Moment { p: 0.5 };
    let ops = vec![UpdateOp::inc(7, 1.0); 4];
    let mut cfg = BernsteinConfig::new(f, 0.25, 0.1, ops.len() as u64);
    cfg.r = 256;
    cfg.noise = NoiseMode::Zero;
    let within = (0..100u64)
        .into_par_iter()
        .filter(|s| {
            let mut sk = BernsteinSketch::new(cfg, RngSeed(300).derive(*s)).unwrap();
            let est = ops.iter().map(|op| sk.process(op).unwrap()).last().unwrap();
            (est - 2.0).abs() <= 0.25 * 2.0
        })
        .count();
    assert!(within >= 90, "{within}/100 within 0.5 of 2");
}

#[test]
fn sketch_replay_is_deterministic() {
    let ops = [
        UpdateOp::inc(1, 1.0),
        UpdateOp::inc(2, 1.0),
        UpdateOp::ResetKey(Key(1)),
        UpdateOp::inc(1, 1.0),
    ];
    let cfg = BernsteinConfig::new(BernsteinFunction::Log1p, 0.3, 0.1, 4);
    let run = |seed| {
        let mut sk = BernsteinSketch::new(cfg, RngSeed(seed)).unwrap();
        ops.iter()
            .map(|op| sk.process(op).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(301), run(301));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reset_clears_every_copy_of_the_key(
        history in prop::collection::vec((1u64..6, 1u32..4), 1..40),
        target in 1u64..6,
        seed in any::<u64>(),
    ) {
        let plan = plan_levels(BernsteinFunction::Log1p, 0.3, 64, 1.0, 3.0).unwrap();
        let mut mapper = ElementMapper::new(plan.levels.clone(), 16, RngSeed(seed)).unwrap();
        let mut sets = vec![BTreeSet::new(); plan.m()];
        let mut ops: Vec<UpdateOp> =
            history.iter().map(|(k, d)| UpdateOp::inc(*k, f64::from(*d))).collect();
        ops.push(UpdateOp::ResetKey(Key(target)));
        for op in &ops {
            for (set, emitted) in sets.iter_mut().zip(mapper.map(op).unwrap()) {
                for e in emitted {
                    match e {
                        UpdateOp::Insert(z) => { set.insert(z); }
                        UpdateOp::Delete(z) => { set.remove(&z); }
                        other => prop_assert!(false, "unexpected {other:?}"),
                    }
                }
            }
        }
        for set in &sets {
            prop_assert!(set.iter().all(|z| decode_key(*z).0 != Key(target)));
        }
    }
}
