//! Finite-difference checks of the network gradient on the 4^3 micro configuration.

use ddbridge::bridge::{loss_weight, scalings, BridgeSchedule, DataStats};
use ddbridge::network::{pred_x_loss, pred_x_loss_grad, Fusion, LossSample, NetConfig, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Problem {
    pub xt: Vec<f64>,
    pub y: Vec<f64>,
    pub x0: Vec<f64>,
    pub aux: Vec<f64>,
    pub t: f64,
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v =
        |lo: f64, hi: f64, n: usize| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    Problem {
        xt: v(-0.5, 1.2, 64),
        y: v(0.0, 1.0, 64),
        x0: v(0.0, 1.0, 64),
        aux: v(-1.0, 1.0, 26),
        t: 0.37,
    }
}

/// A network with every parameter (including zero-initialized gates and
/// heads) moved off its initial value, so every path carries gradient.
pub fn perturbed(cfg: NetConfig, seed: u64) -> Network<f64> {
    let mut net = Network::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for p in net.params_mut() {
        *p += rng.random_range(-0.25..0.25);
    }
    net
}

pub fn sample<'a>(p: &'a Problem, xt: &'a [f64], weight_scale: f64) -> LossSample<'a, f64> {
    let sched = BridgeSchedule::default();
    let stats = DataStats {
        var0: 0.05,
        var_t: 0.07,
        cov0t: 0.02,
    };
    let scal = scalings(&sched, &stats, p.t).unwrap();
    LossSample {
        xt,
        y: &p.y,
        x0: &p.x0,
        aux: &p.aux,
        scal,
        weight: loss_weight(&scal).unwrap() * weight_scale,
    }
}

/// Fourth-order central differences of the `f64` loss for every parameter.
pub fn finite_differences(net: &Network<f64>, s: &LossSample<f64>, h: f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.params().len())
        .map(|i| {
            let orig = net.params()[i];
            let mut at = |d: f64| {
                probe.params_mut()[i] = orig + d;
                pred_x_loss(&probe, s).unwrap()
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            probe.params_mut()[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

/// Largest `|g - fd| / max(|g|, |fd|, floor)` over all entries.
pub fn max_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(fd)
        .enumerate()
        .map(|(i, (&a, &b))| ((a - b).abs() / a.abs().max(b.abs()).max(floor), i))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

/// Worst f64 relative error for one fusion mode.
pub fn check_f64(fusion: Fusion, seed: u64) -> f64 {
    let cfg = NetConfig {
        fusion,
        ..NetConfig::micro()
    };
    let net = perturbed(cfg, seed);
    let p = problem(seed + 10);
    let s = sample(&p, &p.xt, 1.0);
    let (loss, grad, _) = pred_x_loss_grad(&net, &s).unwrap();
    assert!(loss.is_finite());
    let fd = finite_differences(&net, &s, 1e-3);
    let gmax = grad.iter().fold(0f64, |m, g| m.max(g.abs()));
    max_rel_err(&grad, &fd, 1e-6 * gmax).0
}

/// Worst relative error of the single-precision gradient against f64 differences.
pub fn check_f32(seed: u64) -> f64 {
    let net = perturbed(NetConfig::micro(), seed);
    let p = problem(seed + 1);
    let s = sample(&p, &p.xt, 1.0);
    let fd = finite_differences(&net, &s, 1e-3);
    let net32 = net.cast::<f32>();
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let (xt, y, x0, aux) = (to32(&p.xt), to32(&p.y), to32(&p.x0), to32(&p.aux));
    let s32 = LossSample {
        xt: &xt,
        y: &y,
        x0: &x0,
        aux: &aux,
        scal: s.scal,
        weight: s.weight,
    };
    let (_, grad32, _) = pred_x_loss_grad(&net32, &s32).unwrap();
    let grad: Vec<f64> = grad32.iter().map(|&g| g as f64).collect();
    let gmax = grad.iter().fold(0f64, |m, g| m.max(g.abs()));
    max_rel_err(&grad, &fd, 1e-6 * gmax).0
}
