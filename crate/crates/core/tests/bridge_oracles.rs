//! Bridge marginals, h-transform and score against independent closed forms.

mod common;

use common::*;
use ddbridge::bridge::{forward_marginal_sample, BridgeCoeffs, BridgeSchedule};
use ddbridge::Volume;

#[test]
fn pinned_sde_matches_bridge_marginal() {
    for sched in [BridgeSchedule::vp(2.0), BridgeSchedule::ve(1.0)] {
        let (x0, y) = (1.0, 2.0);
        let ts = [0.25, 0.5, 0.75];
        let moments = pinned_sde_moments(&sched, x0, y, &ts, 100_000, 1_000, 7);
        for (&t, &(m, v)) in ts.iter().zip(&moments) {
            let (a, b, c) = closed_form_abc(&sched, t);
            let (em, ev) = (a * y + b * x0, c);
            assert!(
                (m - em).abs() / em.abs() < 0.02,
                "{:?} t={t}: mean {m} vs {em}",
                sched.kind
            );
            assert!(
                (v - ev).abs() / ev < 0.02,
                "{:?} t={t}: var {v} vs {ev}",
                sched.kind
            );
        }
    }
}

#[test]
fn library_coefficients_match_closed_form() {
    for sched in [
        BridgeSchedule::vp(2.0),
        BridgeSchedule::vp(0.5),
        BridgeSchedule::ve(1.3),
    ] {
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let c = sched.bridge_coeffs(t).unwrap();
            let (a, b, cc) = closed_form_abc(&sched, t);
            assert!((c.a - a).abs() < 1e-12 && (c.b - b).abs() < 1e-12 && (c.c - cc).abs() < 1e-12);
        }
    }
}

#[test]
fn h_transform_matches_finite_differences() {
    for sched in [BridgeSchedule::vp(2.0), BridgeSchedule::ve(1.0)] {
        let worst = h_fd_worst(&sched, 100, 11);
        assert!(worst < 1e-6, "{:?}: {worst}", sched.kind);
    }
}

#[test]
fn score_matches_finite_differences() {
    for sched in [BridgeSchedule::vp(2.0), BridgeSchedule::ve(1.0)] {
        let worst = score_fd_worst(&sched, 100, 12);
        assert!(worst < 1e-6, "{:?}: {worst}", sched.kind);
    }
}

#[test]
fn terminal_pinning_is_exact() {
    let sched = BridgeSchedule::default();
    let c = sched.bridge_coeffs(sched.t_max).unwrap();
    assert_eq!(
        c,
        BridgeCoeffs {
            a: 1.0,
            b: 0.0,
            c: 0.0
        }
    );
    let y = Volume::from_fn([3, 4, 5], |a, b, c| {
        ((a * 7 + b * 3 + c) as f32 * 0.137).sin()
    });
    let x0 = y.map(|v| v * 0.5 + 0.1);
    let noise = y.map(|v| 3.0 * v - 1.0);
    let out = forward_marginal_sample(&c, &x0, &y, &noise).unwrap();
    assert_eq!(out.as_slice(), y.as_slice());
}
