//! Reverse-time integration of the bridge from `x_T = y` down to `t_min`.
//!
//! Two update rules are combined:
//!
//! - Euler–Maruyama on the reverse SDE
//!   `dx = [f - g^2 (s - h)] dt + g dw`,
//! - Heun on the probability-flow ODE
//!   `dx = [f - g^2 (s/2 - h)] dt`,
//!
//! where `s` is the bridge score obtained from the pred-x denoiser and `h` the
//! h-transform drift. Each interval of the warped time grid starts with a
//! stochastic sub-step and finishes with a Heun step; the last interval is
//! purely deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{score_minus_h_scalar, BridgeSchedule};
use crate::error::{Error, Result};
use crate::network::DenoiserModel;
use crate::util::stable_hash;
use crate::volume::Volume;

/// Offset below `T` where the ODE is started when no stochastic step
/// precedes it (the h-transform is singular at `T`).
pub const ODE_START_OFFSET: f64 = 1e-4;

/// Bounds applied to model predictions before score conversion.
pub const PRED_CLAMP: (f32, f32) = (-0.1, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct SamplerConfig {
    pub n_step: usize,
    pub rho: f64,
    pub em_fraction: f64,
    pub seed: u64,
    /// Clamp denoiser predictions to [`PRED_CLAMP`].
    pub clamp_prediction: bool,
    /// Return `D(x_tmin, t_min)` instead of the raw terminal state.
    pub final_denoise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_step: 100,
            rho: 7.0,
            em_fraction: 0.3,
            seed: 0,
            clamp_prediction: true,
            final_denoise: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_step < 2 {
            return Err(Error::Config(format!("nStep = {} < 2", self.n_step)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!(
                "rho = {} must be positive",
                self.rho
            )));
        }
        if !(0.0..1.0).contains(&self.em_fraction) {
            return Err(Error::Config(format!(
                "emFraction = {} outside [0, 1)",
                self.em_fraction
            )));
        }
        Ok(())
    }
}

/// Anything that predicts the clean endpoint `x_0` from a bridge state.
pub trait Denoiser: Sync {
    fn schedule(&self) -> &BridgeSchedule;
    fn predict(&self, xt: &Volume, t: f64, y: &Volume) -> Result<Volume>;
}

/// A trained model bound to one subject's auxiliary vector.
pub struct Conditioned<'a> {
    pub model: &'a DenoiserModel,
    pub aux: &'a [f32],
}

impl Denoiser for Conditioned<'_> {
    fn schedule(&self) -> &BridgeSchedule {
        &self.model.sched
    }

    fn predict(&self, xt: &Volume, t: f64, y: &Volume) -> Result<Volume> {
        self.model.denoise(xt, t, y, self.aux)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Volume>,
    pub final_state: Volume,
}

/// Warped grid from `t_max` down to `t_min` with intervals shrinking toward `t_min`.
pub fn make_timesteps(cfg: &SamplerConfig, t_min: f64, t_max: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_step;
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (t_max.powf(inv), t_min.powf(inv));
    let mut times: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(cfg.rho))
        .collect();
    times[0] = t_max;
    times[n - 1] = t_min;
    Ok(times)
}

/// Reverse-SDE drift `f(x, t) - g(t)^2 (score - h(x, y, t))` for a given score.
pub fn reverse_drift(
    x: &Volume,
    t: f64,
    y: &Volume,
    score: &Volume,
    sched: &BridgeSchedule,
) -> Result<Volume> {
    x.check_same_shape(score)?;
    let h = sched.h_drift(x, y, t)?;
    let (k, g2) = (sched.dlog_alpha(t), sched.g2(t));
    let data = x
        .as_slice()
        .iter()
        .zip(score.as_slice())
        .zip(h.as_slice())
        .map(|((&xv, &s), &hv)| (k * xv as f64 - g2 * (s as f64 - hv as f64)) as f32)
        .collect();
    Volume::from_vec(x.dims(), data)
}

fn predict_clamped<D: Denoiser + ?Sized>(
    den: &D,
    x: &Volume,
    t: f64,
    y: &Volume,
    clamp: bool,
) -> Result<Volume> {
    let mut p = den.predict(x, t, y)?;
    if clamp {
        p.clamp(PRED_CLAMP.0, PRED_CLAMP.1);
    }
    Ok(p)
}

/// Reverse-SDE drift from a pred-x estimate; finite on `(0, T]`.
fn sde_drift(sched: &BridgeSchedule, x: &Volume, x0hat: &Volume, t: f64) -> Vec<f64> {
    let (alpha, sigma2) = (sched.alpha_at(t), sched.sigma2_at(t));
    let (k, g2) = (sched.dlog_alpha(t), sched.g2(t));
    x.as_slice()
        .iter()
        .zip(x0hat.as_slice())
        .map(|(&xv, &p)| {
            let (xv, p) = (xv as f64, p as f64);
            k * xv - g2 * score_minus_h_scalar(xv, p, alpha, sigma2)
        })
        .collect()
}

/// Probability-flow drift `f - g^2 (s/2 - h)`, written as
/// `f - g^2 (s - h)/2 + g^2 h / 2`. Requires `t < T`.
fn ode_drift(
    sched: &BridgeSchedule,
    x: &Volume,
    x0hat: &Volume,
    y: &Volume,
    t: f64,
) -> Result<Vec<f64>> {
    let (alpha, sigma2) = (sched.alpha_at(t), sched.sigma2_at(t));
    let (k, g2) = (sched.dlog_alpha(t), sched.g2(t));
    let mut out = Vec::with_capacity(x.len());
    for ((&xv, &p), &yv) in x.as_slice().iter().zip(x0hat.as_slice()).zip(y.as_slice()) {
        let (xv, p) = (xv as f64, p as f64);
        let h = sched.h_drift_scalar(xv, yv as f64, t)?;
        out.push(k * xv - 0.5 * g2 * score_minus_h_scalar(xv, p, alpha, sigma2) + 0.5 * g2 * h);
    }
    Ok(out)
}

/// One Euler–Maruyama step of the reverse SDE with externally supplied
/// standard-normal noise `xi`.
pub fn em_step_with_noise<D: Denoiser + ?Sized>(
    x: &Volume,
    t_from: f64,
    t_to: f64,
    y: &Volume,
    den: &D,
    xi: &Volume,
    clamp: bool,
) -> Result<Volume> {
    x.check_same_shape(y)?;
    x.check_same_shape(xi)?;
    if t_to > t_from {
        return Err(Error::Config(format!(
            "EM step must go backward: {t_from} -> {t_to}"
        )));
    }
    if t_to == t_from {
        return Ok(x.clone());
    }
    let sched = den.schedule();
    let x0hat = predict_clamped(den, x, t_from, y, clamp)?;
    let drift = sde_drift(sched, x, &x0hat, t_from);
    let dt = t_to - t_from;
    let diff = sched.g2(t_from).sqrt() * (-dt).sqrt();
    let data = x
        .as_slice()
        .iter()
        .zip(&drift)
        .zip(xi.as_slice())
        .map(|((&xv, &d), &n)| (xv as f64 + d * dt + diff * n as f64) as f32)
        .collect();
    Volume::from_vec(x.dims(), data)
}

pub fn em_step<D: Denoiser + ?Sized>(
    x: &Volume,
    t_from: f64,
    t_to: f64,
    y: &Volume,
    den: &D,
    rng: &mut impl Rng,
    clamp: bool,
) -> Result<Volume> {
    let xi = Volume::from_vec(
        x.dims(),
        (0..x.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect(),
    )?;
    em_step_with_noise(x, t_from, t_to, y, den, &xi, clamp)
}

/// One Heun (trapezoidal predictor–corrector) step of the probability-flow ODE.
pub fn heun_step<D: Denoiser + ?Sized>(
    x: &Volume,
    t_from: f64,
    t_to: f64,
    y: &Volume,
    den: &D,
    clamp: bool,
) -> Result<Volume> {
    x.check_same_shape(y)?;
    if t_to > t_from {
        return Err(Error::Config(format!(
            "Heun step must go backward: {t_from} -> {t_to}"
        )));
    }
    if t_to == t_from {
        return Ok(x.clone());
    }
    let sched = den.schedule();
    let dt = t_to - t_from;
    let p1 = predict_clamped(den, x, t_from, y, clamp)?;
    let d1 = ode_drift(sched, x, &p1, y, t_from)?;
    let pred = Volume::from_vec(
        x.dims(),
        x.as_slice()
            .iter()
            .zip(&d1)
            .map(|(&v, &d)| (v as f64 + d * dt) as f32)
            .collect(),
    )?;
    let p2 = predict_clamped(den, &pred, t_to, y, clamp)?;
    let d2 = ode_drift(sched, &pred, &p2, y, t_to)?;
    Volume::from_vec(
        x.dims(),
        x.as_slice()
            .iter()
            .zip(d1.iter().zip(&d2))
            .map(|(&v, (&a, &b))| (v as f64 + 0.5 * (a + b) * dt) as f32)
            .collect(),
    )
}

/// Full hybrid integration from `x_T = y`, optionally retaining every grid state.
pub fn hybrid_trajectory<D: Denoiser + ?Sized>(
    den: &D,
    y: &Volume,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
    keep_states: bool,
) -> Result<Trajectory> {
    let sched = den.schedule();
    let times = make_timesteps(cfg, sched.t_min, sched.t_max)?;
    let n = times.len();
    let mut x = y.clone();
    let mut states = Vec::new();
    if keep_states {
        states.push(x.clone());
    }
    for i in 0..n - 1 {
        let (t_cur, t_next) = (times[i], times[i + 1]);
        let last = i + 2 == n;
        let mut t_ode = t_cur;
        if !last && cfg.em_fraction > 0.0 {
            let t_mid = t_cur - cfg.em_fraction * (t_cur - t_next);
            x = em_step(&x, t_cur, t_mid, y, den, rng, cfg.clamp_prediction)?;
            t_ode = t_mid;
        }
        t_ode = t_ode.min(sched.t_max - ODE_START_OFFSET).max(t_next);
        x = heun_step(&x, t_ode, t_next, y, den, cfg.clamp_prediction)?;
        if !x.is_finite() {
            return Err(Error::DivergedSampling { step: i, t: t_next });
        }
        if keep_states {
            states.push(x.clone());
        }
    }
    if cfg.final_denoise {
        x = predict_clamped(den, &x, sched.t_min, y, cfg.clamp_prediction)?;
        if !x.is_finite() {
            return Err(Error::DivergedSampling {
                step: n - 1,
                t: sched.t_min,
            });
        }
    }
    Ok(Trajectory {
        times,
        states,
        final_state: x,
    })
}

/// Simulates the function volume for source `y` with the RNG seeded from `cfg.seed`.
pub fn hybrid_sample(
    y: &Volume,
    aux: &[f32],
    model: &DenoiserModel,
    cfg: &SamplerConfig,
) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let den = Conditioned { model, aux };
    Ok(hybrid_trajectory(&den, y, cfg, &mut rng, false)?.final_state)
}

/// Per-subject RNG stream, independent of evaluation order.
pub fn subject_rng(seed: u64, subject_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(seed, subject_id.as_bytes()))
}

/// [`hybrid_sample`] with the stream derived from `(cfg.seed, subject_id)`.
pub fn sample_subject(
    y: &Volume,
    aux: &[f32],
    model: &DenoiserModel,
    cfg: &SamplerConfig,
    subject_id: &str,
) -> Result<Volume> {
    let mut rng = subject_rng(cfg.seed, subject_id);
    let den = Conditioned { model, aux };
    Ok(hybrid_trajectory(&den, y, cfg, &mut rng, false)?.final_state)
}
