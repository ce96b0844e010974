//! Closed-form bridge mathematics.
//!
//! A forward SDE `dx = f(x,t) dt + g(t) dw` with Gaussian transition kernels
//! `x_t | x_0 ~ N(alpha_t x_0, sigma_t^2)` is pinned at `x_T = y` by Doob's
//! h-transform. The resulting bridge has Gaussian marginals
//!
//! ```text
//! x_t | x_0, y ~ N(a_t y + b_t x_0, c_t)
//! a_t = (alpha_t / alpha_T) * SNR_T / SNR_t
//! b_t = alpha_t * (1 - SNR_T / SNR_t)
//! c_t = sigma_t^2 * (1 - SNR_T / SNR_t)
//! ```
//!
//! Everything in this module is a pure function of its arguments. Scalar cores
//! run in `f64`; volume variants apply them voxelwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Upper clamp for the signal-to-noise ratio near `t = 0`.
pub const SNR_CLAMP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Vp,
    Ve,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Vp => "vp",
            ScheduleKind::Ve => "ve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct BridgeSchedule {
    pub kind: ScheduleKind,
    /// VP drift constant.
    pub beta0: f64,
    pub t_min: f64,
    /// Horizon `T`.
    pub t_max: f64,
    /// VE terminal noise scale, `sigma_T` for the VE process.
    pub sigma_max_ve: f64,
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        BridgeSchedule {
            kind: ScheduleKind::Vp,
            beta0: 2.0,
            t_min: 1e-4,
            t_max: 1.0,
            sigma_max_ve: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub sigma: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BridgeCoeffs {
    pub const TERMINAL: BridgeCoeffs = BridgeCoeffs {
        a: 1.0,
        b: 0.0,
        c: 0.0,
    };
}

impl BridgeSchedule {
    pub fn vp(beta0: f64) -> Self {
        BridgeSchedule {
            kind: ScheduleKind::Vp,
            beta0,
            ..Default::default()
        }
    }

    pub fn ve(sigma_max: f64) -> Self {
        BridgeSchedule {
            kind: ScheduleKind::Ve,
            sigma_max_ve: sigma_max,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_max.is_finite()
            && self.t_min > 0.0
            && self.t_min < self.t_max
            && match self.kind {
                ScheduleKind::Vp => self.beta0 > 0.0 && self.beta0.is_finite(),
                ScheduleKind::Ve => self.sigma_max_ve > 0.0 && self.sigma_max_ve.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bridge schedule {self:?}")))
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    #[inline]
    pub(crate) fn alpha_at(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp => (-0.5 * self.beta0 * t).exp(),
            ScheduleKind::Ve => 1.0,
        }
    }

    #[inline]
    pub(crate) fn sigma2_at(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp => -(-self.beta0 * t).exp_m1(),
            ScheduleKind::Ve => {
                let s = t * self.sigma_max_ve / self.t_max;
                s * s
            }
        }
    }

    /// `d log(alpha_t) / dt`; the forward drift is `f(x, t) = dlog_alpha(t) * x`.
    #[inline]
    pub fn dlog_alpha(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp => -0.5 * self.beta0,
            ScheduleKind::Ve => 0.0,
        }
    }

    /// `d sigma_t^2 / dt`.
    #[inline]
    pub fn dsigma2(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp => self.beta0 * (-self.beta0 * t).exp(),
            ScheduleKind::Ve => {
                let k = self.sigma_max_ve / self.t_max;
                2.0 * k * k * t
            }
        }
    }

    /// Squared diffusion coefficient `g(t)^2 = d sigma^2/dt - 2 sigma^2 d log(alpha)/dt`.
    #[inline]
    pub fn g2(&self, t: f64) -> f64 {
        self.dsigma2(t) - 2.0 * self.sigma2_at(t) * self.dlog_alpha(t)
    }

    /// `(alpha_t, sigma_t, SNR_t)`, with SNR clamped at [`SNR_CLAMP`].
    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        self.check_time(t)?;
        let alpha = self.alpha_at(t);
        let s2 = self.sigma2_at(t);
        let snr = if s2 > 0.0 {
            (alpha * alpha / s2).min(SNR_CLAMP)
        } else {
            SNR_CLAMP
        };
        Ok(ScheduleValues {
            alpha,
            sigma: s2.sqrt(),
            snr,
        })
    }

    /// `SNR_T / SNR_t`, evaluated without forming either ratio separately.
    #[inline]
    fn snr_ratio(&self, t: f64) -> f64 {
        let r = self.alpha_at(self.t_max) / self.alpha_at(t);
        r * r * self.sigma2_at(t) / self.sigma2_at(self.t_max)
    }

    pub fn bridge_coeffs(&self, t: f64) -> Result<BridgeCoeffs> {
        self.check_time(t)?;
        if t == self.t_max {
            return Ok(BridgeCoeffs::TERMINAL);
        }
        let ratio = self.snr_ratio(t);
        let alpha = self.alpha_at(t);
        Ok(BridgeCoeffs {
            a: alpha / self.alpha_at(self.t_max) * ratio,
            b: alpha * (1.0 - ratio),
            c: self.sigma2_at(t) * (1.0 - ratio),
        })
    }

    /// Scalar Doob h-transform term `grad_x log p(x_T = y | x_t = x)`.
    pub fn h_drift_scalar(&self, x: f64, y: f64, t: f64) -> Result<f64> {
        if t >= self.t_max {
            return Err(Error::Singular(format!(
                "h-transform at t = {t} >= T = {}",
                self.t_max
            )));
        }
        let r = self.alpha_at(self.t_max) / self.alpha_at(t);
        let var = self.sigma2_at(self.t_max) - r * r * self.sigma2_at(t);
        Ok(r * (y - r * x) / var)
    }

    pub fn h_drift(&self, x: &Volume, y: &Volume, t: f64) -> Result<Volume> {
        x.check_same_shape(y)?;
        if t >= self.t_max {
            return Err(Error::Singular(format!(
                "h-transform at t = {t} >= T = {}",
                self.t_max
            )));
        }
        let r = self.alpha_at(self.t_max) / self.alpha_at(t);
        let var = self.sigma2_at(self.t_max) - r * r * self.sigma2_at(t);
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&xv, &yv)| (r * (yv as f64 - r * xv as f64) / var) as f32)
            .collect();
        Volume::from_vec(x.dims(), data)
    }
}

/// Pooled second-order statistics of the clean target `x_0` and the source `x_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub var0: f64,
    pub var_t: f64,
    pub cov0t: f64,
}

impl Default for DataStats {
    fn default() -> Self {
        DataStats {
            var0: 0.25,
            var_t: 0.25,
            cov0t: 0.0,
        }
    }
}

impl DataStats {
    pub fn validate(&self) -> Result<()> {
        let bound = self.var0 * self.var_t;
        let cov_sq = self.cov0t * self.cov0t;
        if !(self.var0 > 0.0 && self.var_t > 0.0) || cov_sq >= bound || !cov_sq.is_finite() {
            return Err(Error::DegenerateStats { cov_sq, bound });
        }
        Ok(())
    }

    /// Pooled voxel statistics over `(x_0, x_T)` pairs. Falls back to zero
    /// covariance when the estimate would be degenerate.
    pub fn estimate<'a>(pairs: impl IntoIterator<Item = (&'a Volume, &'a Volume)>) -> Result<Self> {
        let (mut n, mut s0, mut st, mut s00, mut stt, mut s0t) =
            (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
        for (x0, xt) in pairs {
            x0.check_same_shape(xt)?;
            for (&a, &b) in x0.as_slice().iter().zip(xt.as_slice()) {
                let (a, b) = (a as f64, b as f64);
                n += 1.0;
                s0 += a;
                st += b;
                s00 += a * a;
                stt += b * b;
                s0t += a * b;
            }
        }
        if n < 2.0 {
            return Ok(DataStats::default());
        }
        let (m0, mt) = (s0 / n, st / n);
        let mut stats = DataStats {
            var0: (s00 / n - m0 * m0).max(1e-12),
            var_t: (stt / n - mt * mt).max(1e-12),
            cov0t: s0t / n - m0 * mt,
        };
        if stats.validate().is_err() {
            stats.cov0t = 0.0;
        }
        stats.validate()?;
        Ok(stats)
    }
}

/// Preconditioning of the denoiser: `D = c_skip x_t + c_out F(c_in x_t, c_noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalings {
    pub c_in: f64,
    pub c_out: f64,
    pub c_skip: f64,
    pub c_noise: f64,
}

pub fn scalings(sched: &BridgeSchedule, stats: &DataStats, t: f64) -> Result<Scalings> {
    stats.validate()?;
    let BridgeCoeffs { a, b, c } = sched.bridge_coeffs(t)?;
    let DataStats { var0, var_t, cov0t } = *stats;
    let c_in = 1.0 / (a * a * var_t + b * b * var0 + 2.0 * a * b * cov0t + c).sqrt();
    Ok(Scalings {
        c_in,
        c_out: (a * a * (var_t * var0 - cov0t * cov0t) + var0 * c).sqrt() * c_in,
        c_skip: (b * var0 + a * cov0t) * c_in * c_in,
        c_noise: 0.25 * t.ln(),
    })
}

/// Training weight `w(t) = 1 / c_out(t)^2`.
pub fn loss_weight(scal: &Scalings) -> Result<f64> {
    if scal.c_out <= 0.0 || !scal.c_out.is_finite() {
        return Err(Error::Singular(format!("c_out = {}", scal.c_out)));
    }
    Ok(1.0 / (scal.c_out * scal.c_out))
}

/// Samples the bridge marginal `a y + b x0 + sqrt(c) noise`, voxelwise.
pub fn forward_marginal_sample(
    coeffs: &BridgeCoeffs,
    x0: &Volume,
    y: &Volume,
    noise: &Volume,
) -> Result<Volume> {
    x0.check_same_shape(y)?;
    x0.check_same_shape(noise)?;
    if *coeffs == BridgeCoeffs::TERMINAL {
        return Ok(y.clone());
    }
    let sc = coeffs.c.max(0.0).sqrt();
    let data = x0
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .zip(noise.as_slice())
        .map(|((&x0v, &yv), &nv)| {
            (coeffs.a * yv as f64 + coeffs.b * x0v as f64 + sc * nv as f64) as f32
        })
        .collect();
    Volume::from_vec(x0.dims(), data)
}

#[inline]
pub fn score_from_pred_scalar(xt: f64, x0hat: f64, y: f64, coeffs: &BridgeCoeffs) -> f64 {
    -(xt - (coeffs.a * y + coeffs.b * x0hat)) / coeffs.c
}

/// Score of the bridge marginal with `x_0` replaced by a prediction.
pub fn score_from_pred(
    xt: &Volume,
    x0hat: &Volume,
    y: &Volume,
    coeffs: &BridgeCoeffs,
) -> Result<Volume> {
    xt.check_same_shape(x0hat)?;
    xt.check_same_shape(y)?;
    if coeffs.c <= 0.0 {
        return Err(Error::Singular(format!(
            "score undefined for bridge variance c = {}",
            coeffs.c
        )));
    }
    let data = xt
        .as_slice()
        .iter()
        .zip(x0hat.as_slice())
        .zip(y.as_slice())
        .map(|((&x, &p), &yv)| score_from_pred_scalar(x as f64, p as f64, yv as f64, coeffs) as f32)
        .collect();
    Volume::from_vec(xt.dims(), data)
}

/// `score - h` for a pred-x estimate, in the cancellation-free form
/// `(alpha_t x0hat - x) / sigma_t^2`. Finite at `t = T`, unlike either term alone.
#[inline]
pub(crate) fn score_minus_h_scalar(x: f64, x0hat: f64, alpha: f64, sigma2: f64) -> f64 {
    (alpha * x0hat - x) / sigma2
}
