//! Closed-form oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

pub mod grad;

use ddbridge::bridge::{BridgeSchedule, ScheduleKind};
use ddbridge::sampler::{heun_step, hybrid_trajectory, Denoiser, SamplerConfig};
use ddbridge::{Result, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `(alpha_t, sigma_t^2)` written out independently of the library.
pub fn alpha_sigma2(s: &BridgeSchedule, t: f64) -> (f64, f64) {
    match s.kind {
        ScheduleKind::Vp => ((-0.5 * s.beta0 * t).exp(), 1.0 - (-s.beta0 * t).exp()),
        ScheduleKind::Ve => (1.0, (t * s.sigma_max_ve / s.t_max).powi(2)),
    }
}

/// Bridge coefficients `(a, b, c)` from the transition-kernel view:
/// `x_t | x_0, y` is Gaussian with these moments.
pub fn closed_form_abc(s: &BridgeSchedule, t: f64) -> (f64, f64, f64) {
    let (at, st2) = alpha_sigma2(s, t);
    let (a_t, s_t2) = alpha_sigma2(s, s.t_max);
    let ratio = (a_t * a_t / s_t2) / (at * at / st2);
    (at / a_t * ratio, at * (1.0 - ratio), st2 * (1.0 - ratio))
}

/// `log p(x_T = y | x_t = x)` for the unconditioned forward process.
pub fn log_kernel(s: &BridgeSchedule, x: f64, y: f64, t: f64) -> f64 {
    let (at, st2) = alpha_sigma2(s, t);
    let (a_t, s_t2) = alpha_sigma2(s, s.t_max);
    let r = a_t / at;
    let var = s_t2 - r * r * st2;
    -0.5 * (y - r * x).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Relative error of the library h-transform against a central difference of
/// `log_kernel`, worst over `n` random triples.
pub fn h_fd_worst(s: &BridgeSchedule, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..n {
        let x: f64 = rng.random_range(-1.5..1.5);
        let y: f64 = rng.random_range(-0.5..1.5);
        let t: f64 = rng.random_range(0.01..0.99);
        let h = s.h_drift_scalar(x, y, t).unwrap();
        let d = 1e-3;
        let fd = (log_kernel(s, x + d, y, t) - log_kernel(s, x - d, y, t)) / (2.0 * d);
        worst = worst.max((h - fd).abs() / fd.abs().max(1e-8));
    }
    worst
}

/// Worst relative error of `score_from_pred` (with the exact `x_0`) against a
/// central difference of the Gaussian bridge log-density.
pub fn score_fd_worst(s: &BridgeSchedule, n: usize, seed: u64) -> f64 {
    use ddbridge::bridge::score_from_pred_scalar;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..n {
        let x0: f64 = rng.random_range(0.0..1.0);
        let y: f64 = rng.random_range(0.0..1.0);
        let t: f64 = rng.random_range(0.01..0.99);
        let (a, b, c) = closed_form_abc(s, t);
        let x = a * y + b * x0 + rng.random_range(-2.0..2.0) * c.sqrt();
        let logq = |v: f64| -0.5 * (v - a * y - b * x0).powi(2) / c;
        let d = 1e-3 * c.sqrt();
        let fd = (logq(x + d) - logq(x - d)) / (2.0 * d);
        let coeffs = s.bridge_coeffs(t).unwrap();
        let sc = score_from_pred_scalar(x, x0, y, &coeffs);
        worst = worst.max((sc - fd).abs() / fd.abs().max(1e-8));
    }
    worst
}

/// Monte-Carlo moments of the pinned forward SDE
/// `dx = [f + g^2 h] dt + g dw` from `x0` at `t = 0`, recorded at `checkpoints`
/// with `n_steps` uniform Euler–Maruyama steps over `[0, T]`.
pub fn pinned_sde_moments(
    s: &BridgeSchedule,
    x0: f64,
    y: f64,
    checkpoints: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = s.t_max / n_steps as f64;
    let last = checkpoints.iter().cloned().fold(0.0, f64::max);
    let mut x = vec![x0; n_paths];
    let mut out = Vec::new();
    let mut k = 0usize;
    let mut next = 0usize;
    let mut sorted: Vec<f64> = checkpoints.to_vec();
    sorted.sort_by(f64::total_cmp);
    while next < sorted.len() {
        let t = k as f64 * dt;
        if (t - sorted[next]).abs() < 0.5 * dt {
            let n = n_paths as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
            out.push((m, v));
            next += 1;
            continue;
        }
        if t > last {
            break;
        }
        let f = s.dlog_alpha(t);
        let g2 = s.g2(t);
        let g = g2.sqrt() * dt.sqrt();
        for v in x.iter_mut() {
            let h = s.h_drift_scalar(*v, y, t.max(s.t_min)).unwrap();
            let xi: f64 = rng.sample(StandardNormal);
            *v += (f * *v + g2 * h) * dt + g * xi;
        }
        k += 1;
    }
    out
}

/// Exact denoiser for the prior `x_0 | y ~ N(m, v)` (voxelwise, constant).
pub struct GaussianOracle {
    pub sched: BridgeSchedule,
    pub m: f64,
    pub v: f64,
}

impl GaussianOracle {
    /// Posterior-mean gain `k` in `E[x_0 | x_t] = m + k (x_t - a y - b m)`,
    /// written without the `0/0` at `t = T`.
    pub fn gain(&self, t: f64) -> f64 {
        let (at, st2) = alpha_sigma2(&self.sched, t);
        let (a_t, s_t2) = alpha_sigma2(&self.sched, self.sched.t_max);
        let r = a_t / at;
        let d = (s_t2 - r * r * st2).max(0.0);
        at * self.v * s_t2 / (at * at * d * self.v + st2 * s_t2)
    }

    /// Law of the bridge state at `t`: `N(a y + b m, b^2 v + c)`.
    pub fn marginal(&self, y: f64, t: f64) -> (f64, f64) {
        let (a, b, c) = closed_form_abc(&self.sched, t);
        (a * y + b * self.m, b * b * self.v + c)
    }
}

impl Denoiser for GaussianOracle {
    fn schedule(&self) -> &BridgeSchedule {
        &self.sched
    }

    fn predict(&self, xt: &Volume, t: f64, y: &Volume) -> Result<Volume> {
        let (a, b, _) = if t >= self.sched.t_max {
            (1.0, 0.0, 0.0)
        } else {
            closed_form_abc(&self.sched, t)
        };
        let k = self.gain(t);
        let data = xt
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&x, &yv)| (self.m + k * (x as f64 - a * yv as f64 - b * self.m)) as f32)
            .collect();
        Volume::from_vec(xt.dims(), data)
    }
}

/// Runs the hybrid sampler over `n_runs` independent voxels and returns
/// `(mean, variance)` of the output.
pub fn hybrid_moments(
    oracle: &GaussianOracle,
    y: f64,
    cfg: &SamplerConfig,
    n_runs: usize,
) -> (f64, f64, bool) {
    let yv = Volume::filled([1, 1, n_runs], y as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = hybrid_trajectory(oracle, &yv, cfg, &mut rng, false)
        .unwrap()
        .final_state;
    let xs: Vec<f64> = out.as_slice().iter().map(|&v| v as f64).collect();
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var, out.is_finite())
}

/// Expected output law of the hybrid sampler under the oracle.
pub fn expected_output(oracle: &GaussianOracle, y: f64, final_denoise: bool) -> (f64, f64) {
    let t = oracle.sched.t_min;
    let (mu, var) = oracle.marginal(y, t);
    if final_denoise {
        let (a, b, _) = closed_form_abc(&oracle.sched, t);
        let k = oracle.gain(t);
        (oracle.m + k * (mu - a * y - b * oracle.m), k * k * var)
    } else {
        (mu, var)
    }
}

/// Heun integration error of the probability-flow ODE from `t0` to `t1` with
/// `n` uniform steps, against the exact affine flow of the Gaussian marginal.
pub fn heun_error(
    oracle: &GaussianOracle,
    y: f64,
    x_start: f64,
    t0: f64,
    t1: f64,
    n: usize,
) -> f64 {
    let yv = Volume::filled([1, 1, 1], y as f32);
    let mut x = Volume::filled([1, 1, 1], x_start as f32);
    for i in 0..n {
        let ta = t0 + (t1 - t0) * i as f64 / n as f64;
        let tb = t0 + (t1 - t0) * (i + 1) as f64 / n as f64;
        x = heun_step(&x, ta, tb, &yv, oracle, false).unwrap();
    }
    let (m0, v0) = oracle.marginal(y, t0);
    let (m1, v1) = oracle.marginal(y, t1);
    let exact = m1 + (v1 / v0).sqrt() * (x_start as f32 as f64 - m0);
    (x.as_slice()[0] as f64 - exact).abs()
}

/// Least-squares slope of `-log(err)` against `log(steps)`.
pub fn loglog_slope(steps: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| -e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Empirical convergence order from errors at doubling step counts.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

pub fn sampler_cfg(
    n_step: usize,
    em_fraction: f64,
    final_denoise: bool,
    seed: u64,
) -> SamplerConfig {
    SamplerConfig {
        n_step,
        em_fraction,
        seed,
        clamp_prediction: false,
        final_denoise,
        ..Default::default()
    }
}
