//! The denoiser: a 3D patch transformer `F_theta` wrapped in the pred-x
//! preconditioning `D = c_skip x_t + c_out F(c_in x_t, c_noise, aux)`.

pub mod checkpoint;
pub mod embed;
pub mod linalg;
pub mod model;

pub use embed::{patchify, pos_embed, unpatchify};
pub use linalg::Real;
pub use model::{
    param_count, Cache, Fusion, Layout, NetConfig, NetInput, Network, Segment, AUX_DIM,
};

use crate::bridge::{scalings, BridgeSchedule, DataStats, Scalings};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Trained (or freshly initialized) denoiser with its bridge configuration.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub net: Network<f32>,
    pub stats: DataStats,
    pub sched: BridgeSchedule,
}

impl DenoiserModel {
    pub fn init(
        cfg: NetConfig,
        sched: BridgeSchedule,
        stats: DataStats,
        seed: u64,
    ) -> Result<Self> {
        sched.validate()?;
        stats.validate()?;
        Ok(DenoiserModel {
            net: Network::init(cfg, seed)?,
            stats,
            sched,
        })
    }

    pub fn config(&self) -> &NetConfig {
        self.net.config()
    }

    pub fn fusion(&self) -> Fusion {
        self.net.config().fusion
    }

    pub fn scalings(&self, t: f64) -> Result<Scalings> {
        scalings(&self.sched, &self.stats, t)
    }

    fn check_volume(&self, v: &Volume) -> Result<()> {
        let side = self.config().volume_side;
        if v.dims() != [side; 3] {
            return Err(Error::Shape(format!(
                "model expects {side}^3 volumes, got {:?}",
                v.dims()
            )));
        }
        Ok(())
    }

    /// The pred-x output `D_theta(x_t, t, y, aux)`.
    pub fn denoise(&self, xt: &Volume, t: f64, y: &Volume, aux: &[f32]) -> Result<Volume> {
        self.check_volume(xt)?;
        self.check_volume(y)?;
        let s = self.scalings(t)?;
        let c_in = s.c_in as f32;
        let x_scaled: Vec<f32> = xt.as_slice().iter().map(|&v| v * c_in).collect();
        let f = self.net.forward(&NetInput {
            x_scaled: &x_scaled,
            y: y.as_slice(),
            c_noise: s.c_noise,
            aux,
        })?;
        let (cs, co) = (s.c_skip as f32, s.c_out as f32);
        let data = xt
            .as_slice()
            .iter()
            .zip(&f)
            .map(|(&x, &fv)| cs * x + co * fv)
            .collect();
        Volume::from_vec(xt.dims(), data)
    }
}

/// One training example for the weighted pred-x objective.
#[derive(Debug, Clone, Copy)]
pub struct LossSample<'a, T> {
    pub xt: &'a [T],
    pub y: &'a [T],
    pub x0: &'a [T],
    pub aux: &'a [T],
    pub scal: Scalings,
    pub weight: f64,
}

fn pred_x<T: Real>(s: &LossSample<T>, f: &[T]) -> Vec<T> {
    let (cs, co) = (T::of(s.scal.c_skip), T::of(s.scal.c_out));
    s.xt.iter()
        .zip(f)
        .map(|(&x, &fv)| cs * x + co * fv)
        .collect()
}

fn net_input<'a, T: Real>(s: &LossSample<'a, T>, x_scaled: &'a [T]) -> NetInput<'a, T> {
    NetInput {
        x_scaled,
        y: s.y,
        c_noise: s.scal.c_noise,
        aux: s.aux,
    }
}

/// `w(t) * mean((D - x0)^2)` with `D` the pred-x output of `net`.
pub fn pred_x_loss<T: Real>(net: &Network<T>, s: &LossSample<T>) -> Result<T> {
    let c_in = T::of(s.scal.c_in);
    let x_scaled: Vec<T> = s.xt.iter().map(|&v| v * c_in).collect();
    let f = net.forward(&net_input(s, &x_scaled))?;
    Ok(weighted_mse(s, &pred_x(s, &f)))
}

fn weighted_mse<T: Real>(s: &LossSample<T>, d: &[T]) -> T {
    let n = T::of(d.len() as f64);
    let sse = d
        .iter()
        .zip(s.x0)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>();
    T::of(s.weight) * sse / n
}

/// Loss value, its gradient with respect to every parameter, and the pred-x output.
pub fn pred_x_loss_grad<T: Real>(
    net: &Network<T>,
    s: &LossSample<T>,
) -> Result<(T, Vec<T>, Vec<T>)> {
    if s.xt.len() != s.x0.len() {
        return Err(Error::Shape(format!(
            "x_t has {} voxels, x_0 has {}",
            s.xt.len(),
            s.x0.len()
        )));
    }
    let c_in = T::of(s.scal.c_in);
    let x_scaled: Vec<T> = s.xt.iter().map(|&v| v * c_in).collect();
    let (f, cache) = net.forward_recorded(&net_input(s, &x_scaled))?;
    let d = pred_x(s, &f);
    let loss = weighted_mse(s, &d);
    let k = T::of(2.0 * s.weight * s.scal.c_out / d.len() as f64);
    let d_f: Vec<T> = d.iter().zip(s.x0).map(|(&a, &b)| k * (a - b)).collect();
    let grad = net.backward(&cache, &d_f)?;
    Ok((loss, grad, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn denoise_identity_at_init() {
        let cfg = NetConfig::micro();
        let model =
            DenoiserModel::init(cfg, BridgeSchedule::default(), DataStats::default(), 11).unwrap();
        let xt = Volume::from_fn([4; 3], |x, y, z| (x + 2 * y + 3 * z) as f32 * 0.05);
        let y = xt.map(|v| 1.0 - v);
        let aux = [0.1f32; 26];
        for t in [1e-4, 0.3, 0.77, 1.0] {
            let d = model.denoise(&xt, t, &y, &aux).unwrap();
            let cs = model.scalings(t).unwrap().c_skip as f32;
            for (&dv, &xv) in d.as_slice().iter().zip(xt.as_slice()) {
                assert_eq!(dv, cs * xv);
            }
        }
    }

    #[test]
    fn denoise_shape_check() {
        let model = DenoiserModel::init(
            NetConfig::micro(),
            BridgeSchedule::default(),
            DataStats::default(),
            1,
        )
        .unwrap();
        let v = Volume::cube(8);
        assert!(model.denoise(&v, 0.5, &v, &[0.0; 26]).is_err());
    }
}
