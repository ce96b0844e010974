//! Sampler against the closed-form Gaussian bridge.

mod common;

use common::*;
use ddbridge::bridge::BridgeSchedule;

fn oracle(sched: BridgeSchedule) -> GaussianOracle {
    GaussianOracle {
        sched,
        m: 0.4,
        v: 0.04,
    }
}

#[test]
fn hybrid_recovers_posterior_moments() {
    for final_denoise in [false, true] {
        let o = oracle(BridgeSchedule::vp(2.0));
        let cfg = sampler_cfg(100, 0.5, final_denoise, 5);
        let (m, v, finite) = hybrid_moments(&o, 0.7, &cfg, 10_000);
        let (em, ev) = expected_output(&o, 0.7, final_denoise);
        assert!(finite);
        assert!((m - em).abs() / em.abs() < 0.02, "mean {m} vs {em}");
        assert!((v - ev).abs() / ev < 0.05, "var {v} vs {ev}");
        // Both laws sit within a fraction of a percent of the prior N(m, v).
        assert!((em - o.m).abs() < 1e-3 && (ev - o.v).abs() / o.v < 0.01);
    }
}

/// At the default 0.3 split the first Heun step starts close to the
/// singular end of the probability-flow ODE; the resulting variance excess
/// (about 4%) decays only partly over the remaining steps.
#[test]
fn hybrid_default_fraction_variance_bias_is_bounded() {
    let o = oracle(BridgeSchedule::vp(2.0));
    let (m, v, _) = hybrid_moments(&o, 0.7, &sampler_cfg(100, 0.3, true, 8), 40_000);
    let (em, ev) = expected_output(&o, 0.7, true);
    assert!((m - em).abs() / em < 0.01, "mean {m} vs {em}");
    assert!(v / ev > 1.0 && v / ev < 1.06, "var ratio {}", v / ev);
}

#[test]
fn hybrid_variance_bias_shrinks_with_steps() {
    let o = oracle(BridgeSchedule::vp(2.0));
    let (_, ev) = expected_output(&o, 0.7, true);
    let r: Vec<f64> = [50, 200]
        .iter()
        .map(|&n| hybrid_moments(&o, 0.7, &sampler_cfg(n, 0.3, true, 9), 40_000).1 / ev - 1.0)
        .collect();
    assert!(r[1] < 0.6 * r[0], "{r:?}");
}

#[test]
fn hybrid_ve_recovers_posterior_mean() {
    let o = oracle(BridgeSchedule::ve(1.0));
    let (m, v, finite) = hybrid_moments(&o, 0.7, &sampler_cfg(100, 0.5, true, 6), 10_000);
    let (em, ev) = expected_output(&o, 0.7, true);
    assert!(finite);
    assert!((m - em).abs() / em.abs() < 0.02, "mean {m} vs {em}");
    assert!((v - ev).abs() / ev < 0.05, "var {v} vs {ev}");
}

#[test]
fn deterministic_mode_is_repeatable() {
    let o = oracle(BridgeSchedule::vp(2.0));
    let a = hybrid_moments(&o, 0.3, &sampler_cfg(30, 0.0, true, 1), 16);
    let b = hybrid_moments(&o, 0.3, &sampler_cfg(30, 0.0, true, 99), 16);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
}

#[test]
fn heun_is_second_order() {
    for sched in [BridgeSchedule::vp(2.0), BridgeSchedule::ve(1.0)] {
        let o = oracle(sched);
        let steps = [8, 16, 32, 64];
        let errs: Vec<f64> = steps
            .iter()
            .map(|&n| heun_error(&o, 0.7, 0.85, 0.9, 0.2, n))
            .collect();
        let slope = loglog_slope(&steps, &errs);
        eprintln!("{:?}: errors {errs:?} slope {slope:.3}", o.sched.kind);
        assert!(slope >= 1.8, "{:?}", observed_orders(&errs));
    }
}
