//! Weighted pred-x denoising objective, Adam, validation-driven checkpoint
//! selection and local fine-tuning.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{forward_marginal_sample, loss_weight, DataStats};
use crate::data::{
    aux_encode, mask_to_subset, subset_indices, AuxStats, Split, Subject, LOCAL_SUBSET,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, Aggregate};
use crate::network::{pred_x_loss_grad, DenoiserModel, LossSample};
use crate::sampler::SamplerConfig;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Examples averaged per Adam step.
    pub batch_size: usize,
    pub max_iters: usize,
    pub val_every: usize,
    pub val_n_step: usize,
    /// Auxiliary variables fed to the network; all others are encoded as
    /// missing. `None` keeps the full roster.
    pub aux_subset: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 1,
            max_iters: 2000,
            val_every: 1000,
            val_n_step: 30,
            aux_subset: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("train.lr = {} must be positive", self.lr));
        }
        if self.weight_decay != 0.0 {
            return err(format!(
                "train.weightDecay = {} must be 0",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return err("train.batchSize must be at least 1".into());
        }
        if self.val_every == 0 || (self.max_iters > 0 && self.val_every > self.max_iters) {
            return err(format!(
                "train.valEvery = {} must be in [1, maxIters = {}]",
                self.val_every, self.max_iters
            ));
        }
        if self.val_n_step < 2 {
            return err(format!(
                "train.valNStep = {} must be at least 2",
                self.val_n_step
            ));
        }
        if let Some(s) = &self.aux_subset {
            subset_indices(s).map_err(|e| Error::Config(format!("train.auxSubset: {e}")))?;
        }
        Ok(())
    }

    fn subset(&self) -> Result<Option<Vec<usize>>> {
        self.aux_subset
            .as_ref()
            .map(|s| subset_indices(s))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct AdaptConfig {
    pub base_checkpoint: Option<PathBuf>,
    pub local_train_fraction: f64,
    pub aux_subset: Vec<String>,
    pub ft_iters: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            base_checkpoint: None,
            local_train_fraction: 1.0,
            aux_subset: LOCAL_SUBSET.iter().map(|s| s.to_string()).collect(),
            ft_iters: 1000,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.local_train_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "adapt.localTrainFraction = {f} must be in (0, 1]"
            )));
        }
        subset_indices(&self.aux_subset)
            .map_err(|e| Error::Config(format!("adapt.auxSubset: {e}")))?;
        Ok(())
    }
}

/// Network input vector for a subject, with variables outside `subset` missing.
pub fn encode_subject_aux(
    subject: &Subject,
    stats: &AuxStats,
    subset: Option<&[usize]>,
) -> Vec<f32> {
    let raw = match subset {
        Some(s) => mask_to_subset(&subject.aux_raw, s),
        None => subject.aux_raw,
    };
    aux_encode(&raw, stats).to_array().to_vec()
}

/// Per-example loss with its inputs retained for inspection.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub loss: f64,
    pub xt: Volume,
    pub pred: Volume,
    pub weight: f64,
    pub grad: Vec<f32>,
}

/// `w(t) mean((D(x_t, t, y, aux) - x_0)^2)` with `x_t` drawn from the bridge
/// marginal using `noise`, plus the parameter gradient.
pub fn compute_loss(
    model: &DenoiserModel,
    x0: &Volume,
    y: &Volume,
    aux: &[f32],
    t: f64,
    noise: &Volume,
    subject: &str,
) -> Result<LossParts> {
    let coeffs = model.sched.bridge_coeffs(t)?;
    let xt = forward_marginal_sample(&coeffs, x0, y, noise)?;
    let scal = model.scalings(t)?;
    let weight = loss_weight(&scal)?;
    let sample = LossSample {
        xt: xt.as_slice(),
        y: y.as_slice(),
        x0: x0.as_slice(),
        aux,
        scal,
        weight,
    };
    let (loss, grad, pred) = pred_x_loss_grad(&model.net, &sample)?;
    let loss = loss as f64;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            loss,
            t,
            subject: subject.to_string(),
        });
    }
    Ok(LossParts {
        loss,
        pred: Volume::from_vec(x0.dims(), pred)?,
        xt,
        weight,
        grad,
    })
}

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = (params[i] as f64 - lr * mh / (vh.sqrt() + self.eps)) as f32;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogRow {
    pub iter: usize,
    /// Exponential moving average (decay 0.99) of the training loss; NaN
    /// before the first step.
    pub train_loss_ema: f64,
    pub val_mae: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub wall_clock_sec: f64,
}

pub const LOG_HEADER: &str = "iter,trainLossEMA,valMAE,valPSNR,valSSIM,wallClockSec";

/// The metric log as CSV; `with_clock = false` omits the wall-clock column,
/// which is the only non-reproducible field.
pub fn log_csv(rows: &[LogRow], with_clock: bool) -> String {
    let mut s = String::new();
    if with_clock {
        s.push_str(LOG_HEADER);
    } else {
        s.push_str("iter,trainLossEMA,valMAE,valPSNR,valSSIM");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.iter, r.train_loss_ema, r.val_mae, r.val_psnr, r.val_ssim
        );
        if with_clock {
            let _ = write!(s, ",{:.3}", r.wall_clock_sec);
        }
        s.push('\n');
    }
    s
}

/// Loss blow-up that stopped training early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iter: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation MAE (earliest on ties).
    pub best: DenoiserModel,
    pub best_iter: usize,
    pub best_val_mae: f64,
    /// Parameters after the last completed step.
    pub last: DenoiserModel,
    pub log: Vec<LogRow>,
    pub aux_stats: AuxStats,
    pub divergence: Option<Divergence>,
}

fn split_members<'a>(subjects: &'a [Subject], splits: &[Split], which: Split) -> Vec<&'a Subject> {
    subjects
        .iter()
        .zip(splits)
        .filter(|(_, &s)| s == which)
        .map(|(s, _)| s)
        .collect()
}

/// Mean validation metrics of `model` on `val` at the reduced step count.
pub fn validate_model(
    model: &DenoiserModel,
    val: &[&Subject],
    aux: &[Vec<f32>],
    cfg: &TrainConfig,
) -> Result<Aggregate> {
    let scfg = SamplerConfig {
        n_step: cfg.val_n_step,
        seed: cfg.seed,
        ..Default::default()
    };
    Ok(Aggregate::of(&evaluate_model(model, val, aux, &scfg)?))
}

/// Trains from `model` on the `Train` members of `subjects`, validating on the
/// `Val` members. Data statistics and auxiliary normalisation are fitted on
/// the training split first.
pub fn train(
    model: DenoiserModel,
    subjects: &[Subject],
    splits: &[Split],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let train_set = split_members(subjects, splits, Split::Train);
    let stats = DataStats::estimate(train_set.iter().map(|s| (&s.function, &s.structure)))?;
    let aux_stats = AuxStats::fit(train_set.iter().map(|s| &s.aux_raw));
    let model = DenoiserModel { stats, ..model };
    fit(model, subjects, splits, cfg, aux_stats)
}

/// Continues training from `model` with fixed data statistics and the given
/// auxiliary normalisation.
pub fn fit(
    mut model: DenoiserModel,
    subjects: &[Subject],
    splits: &[Split],
    cfg: &TrainConfig,
    aux_stats: AuxStats,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if subjects.len() != splits.len() {
        return Err(Error::Shape(format!(
            "{} subjects vs {} split labels",
            subjects.len(),
            splits.len()
        )));
    }
    let train_set = split_members(subjects, splits, Split::Train);
    let val_set = split_members(subjects, splits, Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs train and val subjects (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let subset = cfg.subset()?;
    let enc = |s: &Subject| encode_subject_aux(s, &aux_stats, subset.as_deref());
    let train_aux: Vec<Vec<f32>> = train_set.iter().map(|s| enc(s)).collect();
    let val_aux: Vec<Vec<f32>> = val_set.iter().map(|s| enc(s)).collect();

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.net.params().len());
    let sched = model.sched;
    let dims = train_set[0].structure.dims();
    let mut ema = f64::NAN;
    let mut log = Vec::new();

    let v0 = validate_model(&model, &val_set, &val_aux, cfg)?;
    let mut best = (model.clone(), 0usize, v0.mae.mean);
    log.push(log_row(0, ema, &v0, &start));

    let mut divergence = None;
    'outer: for iter in 1..=cfg.max_iters {
        let mut acc = vec![0f32; adam.m.len()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..train_set.len());
            let t = rng.random_range(sched.t_min..=sched.t_max);
            let noise = Volume::from_vec(
                dims,
                (0..dims.iter().product::<usize>())
                    .map(|_| rng.sample(StandardNormal))
                    .collect(),
            )?;
            let s = train_set[k];
            match compute_loss(
                &model,
                &s.function,
                &s.structure,
                &train_aux[k],
                t,
                &noise,
                &s.id,
            ) {
                Ok(parts) => {
                    batch_loss += parts.loss;
                    for (a, g) in acc.iter_mut().zip(&parts.grad) {
                        *a += g;
                    }
                }
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    divergence = Some(Divergence {
                        iter,
                        message: e.to_string(),
                    });
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        acc.iter_mut().for_each(|a| *a *= inv);
        adam.update(model.net.params_mut(), &acc, cfg.lr)?;
        let loss = batch_loss / cfg.batch_size as f64;
        ema = if ema.is_nan() {
            loss
        } else {
            0.99 * ema + 0.01 * loss
        };

        if iter % cfg.val_every == 0 || iter == cfg.max_iters {
            let v = validate_model(&model, &val_set, &val_aux, cfg)?;
            if v.mae.mean < best.2 {
                best = (model.clone(), iter, v.mae.mean);
            }
            log.push(log_row(iter, ema, &v, &start));
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_iter: best.1,
        best_val_mae: best.2,
        last: model,
        log,
        aux_stats,
        divergence,
    })
}

fn log_row(iter: usize, ema: f64, v: &Aggregate, start: &Instant) -> LogRow {
    LogRow {
        iter,
        train_loss_ema: ema,
        val_mae: v.mae.mean,
        val_psnr: v.psnr.mean,
        val_ssim: v.ssim.mean,
        wall_clock_sec: start.elapsed().as_secs_f64(),
    }
}

/// Keeps a seeded `fraction` (at least one) of the `Train` members; the rest
/// are dropped from training. Val and test labels are untouched.
pub fn subsample_train(splits: &[Split], fraction: f64, seed: u64) -> Vec<Option<Split>> {
    let mut idx: Vec<usize> = splits
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let keep = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len().max(1));
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_6361_6c));
    let kept: std::collections::BTreeSet<usize> = idx.into_iter().take(keep).collect();
    splits
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s == Split::Train && !kept.contains(&i) {
                None
            } else {
                Some(s)
            }
        })
        .collect()
}

/// Fine-tunes `base` on the local cohort's training split, with auxiliary
/// variables outside `cfg.aux_subset` encoded as missing. The base model's
/// data statistics and auxiliary normalisation are kept.
pub fn local_adapt(
    base: &DenoiserModel,
    base_aux_stats: &AuxStats,
    local: &[Subject],
    splits: &[Split],
    cfg: &AdaptConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let picked = subsample_train(splits, cfg.local_train_fraction, train_cfg.seed);
    let (subjects, labels): (Vec<Subject>, Vec<Split>) = local
        .iter()
        .zip(&picked)
        .filter_map(|(s, p)| p.map(|p| (s.clone(), p)))
        .unzip();
    let tcfg = TrainConfig {
        max_iters: cfg.ft_iters,
        val_every: train_cfg.val_every.min(cfg.ft_iters.max(1)),
        aux_subset: Some(cfg.aux_subset.clone()),
        ..train_cfg.clone()
    };
    fit(base.clone(), &subjects, &labels, &tcfg, *base_aux_stats)
}
