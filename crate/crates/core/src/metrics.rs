//! Image-quality metrics, stratified reports, the one-sided signed-rank test,
//! and the auxiliary-sensitivity and step-count experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{aux_encode, keep_only, var_index, AuxStats, ClassLabel, Subject};
use crate::error::{Error, Result};
use crate::network::DenoiserModel;
use crate::sampler::{sample_subject, SamplerConfig};
use crate::util::mean_sd;
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DATA_RANGE: f64 = 1.0;

pub fn mae_mse(x: &Volume, y: &Volume) -> Result<(f64, f64)> {
    x.check_same_shape(y)?;
    let (mut sa, mut ss) = (0f64, 0f64);
    for (&a, &b) in x.as_slice().iter().zip(y.as_slice()) {
        let d = a as f64 - b as f64;
        sa += d.abs();
        ss += d * d;
    }
    let n = x.len().max(1) as f64;
    Ok((sa / n, ss / n))
}

/// `10 log10(range^2 / mse)`; `+inf` when `mse = 0`.
pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

pub fn psnr(x: &Volume, y: &Volume, range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mae_mse(x, y)?.1, range))
}

/// Inclusive prefix sums over a 3D grid with a zero border.
struct Integral {
    d: [usize; 3],
    s: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let d = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let mut s = vec![0f64; d[0] * d[1] * d[2]];
        let at = |x: usize, y: usize, z: usize| (x * d[1] + y) * d[2] + z;
        for x in 1..d[0] {
            for y in 1..d[1] {
                for z in 1..d[2] {
                    let v = f(((x - 1) * dims[1] + (y - 1)) * dims[2] + (z - 1));
                    s[at(x, y, z)] =
                        v + s[at(x - 1, y, z)] + s[at(x, y - 1, z)] + s[at(x, y, z - 1)]
                            - s[at(x - 1, y - 1, z)]
                            - s[at(x - 1, y, z - 1)]
                            - s[at(x, y - 1, z - 1)]
                            + s[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Integral { d, s }
    }

    /// Sum over the cube `[x, x+w) x [y, y+w) x [z, z+w)`.
    fn cube(&self, x: usize, y: usize, z: usize, w: usize) -> f64 {
        let d = self.d;
        let at = |x: usize, y: usize, z: usize| self.s[(x * d[1] + y) * d[2] + z];
        let (a, b, c) = (x + w, y + w, z + w);
        at(a, b, c) - at(x, b, c) - at(a, y, c) - at(a, b, z)
            + at(x, y, c)
            + at(x, b, z)
            + at(a, y, z)
            - at(x, y, z)
    }
}

/// Mean local SSIM over every fully contained 7^3 uniform window.
pub fn ssim3d(x: &Volume, y: &Volume) -> Result<f64> {
    x.check_same_shape(y)?;
    let dims = x.dims();
    let w = SSIM_WINDOW;
    if dims.iter().any(|&d| d < w) {
        return Err(Error::Shape(format!(
            "volume {dims:?} smaller than the {w}^3 SSIM window"
        )));
    }
    let (xs, ys) = (x.as_slice(), y.as_slice());
    let sx = Integral::new(dims, |i| xs[i] as f64);
    let sy = Integral::new(dims, |i| ys[i] as f64);
    let sxx = Integral::new(dims, |i| xs[i] as f64 * xs[i] as f64);
    let syy = Integral::new(dims, |i| ys[i] as f64 * ys[i] as f64);
    let sxy = Integral::new(dims, |i| xs[i] as f64 * ys[i] as f64);
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = (w * w * w) as f64;
    let (mut total, mut count) = (0f64, 0usize);
    for i in 0..=dims[0] - w {
        for j in 0..=dims[1] - w {
            for k in 0..=dims[2] - w {
                let mx = sx.cube(i, j, k, w) / n;
                let my = sy.cube(i, j, k, w) / n;
                let vx = sxx.cube(i, j, k, w) / n - mx * mx;
                let vy = syy.cube(i, j, k, w) / n - my * my;
                let cxy = sxy.cube(i, j, k, w) / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score_pair(pred: &Volume, truth: &Volume) -> Result<PairMetrics> {
    let (mae, mse) = mae_mse(pred, truth)?;
    Ok(PairMetrics {
        mae,
        mse,
        psnr: psnr_from_mse(mse, DATA_RANGE),
        ssim: ssim3d(pred, truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMode {
    /// Exact for `n <= 20`, normal approximation beyond.
    Auto,
    Exact,
    Normal,
}

/// One-sided signed-rank p-value for the alternative "median difference > 0".
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<f64> {
    wilcoxon_one_sided_with(diffs, WilcoxonMode::Auto)
}

pub fn wilcoxon_one_sided_with(diffs: &[f64], mode: WilcoxonMode) -> Result<f64> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::UndefinedTest("non-finite difference".into()));
    }
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::UndefinedTest("all differences are zero".into()));
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = nz.len();
    // Twice the average ranks, so tied ranks stay integral.
    let mut rank2 = vec![0usize; n];
    let mut tie_term = 0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let r2 = i + j + 2;
        rank2[i..=j].fill(r2);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w2: usize = nz
        .iter()
        .zip(&rank2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
        WilcoxonMode::Auto => n <= 20,
    };
    if exact {
        let total: usize = rank2.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &rank2 {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let tail: f64 = counts[w2..].iter().sum();
        Ok(tail / 2f64.powi(n as i32))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(Error::UndefinedTest(
                "zero variance of the signed-rank statistic".into(),
            ));
        }
        let w = w2 as f64 / 2.0;
        let z = (w - mean - 0.5) / var.sqrt();
        Ok(Normal::standard().sf(z))
    }
}

pub fn age_band(age: Option<f64>) -> &'static str {
    match age {
        None => "unknown",
        Some(a) if a < 65.0 => "<65",
        Some(a) if a < 75.0 => "65-74",
        Some(_) => "75+",
    }
}

pub fn gender_label(g: Option<f64>) -> &'static str {
    match g {
        Some(v) if v >= 0.5 => "M",
        Some(_) => "F",
        None => "unknown",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubjectRow {
    pub id: String,
    pub class: ClassLabel,
    pub age_band: String,
    pub gender: String,
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl SubjectRow {
    pub fn new(subject: &Subject, m: PairMetrics) -> Self {
        SubjectRow {
            id: subject.id.clone(),
            class: subject.class,
            age_band: age_band(subject.age()).into(),
            gender: gender_label(subject.gender()).into(),
            mae: m.mae,
            mse: m.mse,
            psnr: m.psnr,
            ssim: m.ssim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Self {
        let (mean, sd) = mean_sd(v);
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Aggregate {
    pub n: usize,
    pub mae: MeanSd,
    pub mse: MeanSd,
    /// Over finite values only.
    pub psnr: MeanSd,
    pub psnr_infinite: usize,
    pub ssim: MeanSd,
}

impl Aggregate {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a SubjectRow>) -> Self {
        let rows: Vec<&SubjectRow> = rows.into_iter().collect();
        let col = |f: fn(&SubjectRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
        let finite: Vec<f64> = rows
            .iter()
            .map(|r| r.psnr)
            .filter(|p| p.is_finite())
            .collect();
        Aggregate {
            n: rows.len(),
            mae: MeanSd::of(&col(|r| r.mae)),
            mse: MeanSd::of(&col(|r| r.mse)),
            psnr: MeanSd::of(&finite),
            psnr_infinite: rows.len() - finite.len(),
            ssim: MeanSd::of(&col(|r| r.ssim)),
        }
    }
}

/// Per-subject rows plus aggregates overall and per class, age band and gender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricReport {
    pub per_subject: Vec<SubjectRow>,
    pub overall: Aggregate,
    /// Keyed by `class:<label>`, `ageBand:<band>` and `gender:<label>`.
    pub strata: BTreeMap<String, Aggregate>,
}

impl MetricReport {
    /// Rows are sorted by subject id.
    pub fn from_rows(mut rows: Vec<SubjectRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let mut groups: BTreeMap<String, Vec<&SubjectRow>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry(format!("class:{}", r.class.as_str()))
                .or_default()
                .push(r);
            groups
                .entry(format!("ageBand:{}", r.age_band))
                .or_default()
                .push(r);
            groups
                .entry(format!("gender:{}", r.gender))
                .or_default()
                .push(r);
        }
        let strata = groups
            .into_iter()
            .map(|(k, v)| (k, Aggregate::of(v)))
            .collect();
        MetricReport {
            overall: Aggregate::of(&rows),
            strata,
            per_subject: rows,
        }
    }

    /// Strata belonging to one axis (`class`, `ageBand` or `gender`).
    pub fn axis(&self, axis: &str) -> Vec<(&str, &Aggregate)> {
        let prefix = format!("{axis}:");
        self.strata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s, v)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,class,ageBand,gender,mae,mse,psnr,ssim\n");
        for r in &self.per_subject {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.id,
                r.class.as_str(),
                r.age_band,
                r.gender,
                r.mae,
                r.mse,
                fmt_psnr(r.psnr),
                r.ssim
            );
        }
        s
    }

    /// Aggregates only; infinite PSNR values are counted, not averaged.
    pub fn aggregates_json(&self) -> Result<String> {
        #[derive(Serialize)]
        #[serde(rename_all = "camelCase")]
        struct Out<'a> {
            overall: &'a Aggregate,
            strata: &'a BTreeMap<String, Aggregate>,
            note: &'static str,
        }
        Ok(serde_json::to_string_pretty(&Out {
            overall: &self.overall,
            strata: &self.strata,
            note: "psnr mean/sd exclude infinite values (zero MSE); see psnrInfinite",
        })?)
    }
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        p.to_string()
    }
}

/// Simulates every subject (in parallel, with per-subject RNG streams) and
/// scores it against its true function volume.
pub fn evaluate_model(
    model: &DenoiserModel,
    subjects: &[&Subject],
    aux: &[Vec<f32>],
    cfg: &SamplerConfig,
) -> Result<Vec<SubjectRow>> {
    if subjects.len() != aux.len() {
        return Err(Error::Shape(format!(
            "{} subjects vs {} aux vectors",
            subjects.len(),
            aux.len()
        )));
    }
    subjects
        .par_iter()
        .zip(aux.par_iter())
        .map(|(s, a)| {
            let pred = sample_subject(&s.structure, a, model, cfg, &s.id)?;
            Ok(SubjectRow::new(s, score_pair(&pred, &s.function)?))
        })
        .collect()
}

/// Which auxiliary variables keep their true values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuxKeep {
    All,
    Only(String),
}

impl AuxKeep {
    pub fn parse(name: &str) -> Result<Self> {
        if name == "all" {
            Ok(AuxKeep::All)
        } else {
            var_index(name)?;
            Ok(AuxKeep::Only(name.into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuxSensitivity {
    pub variable: String,
    pub baseline: Aggregate,
    pub kept: Aggregate,
    pub delta_mae: f64,
    pub delta_psnr: f64,
    pub delta_ssim: f64,
}

/// Re-simulates with only `keep` at its true value and every other variable at
/// its training mean, and reports the change against the all-variables run.
pub fn aux_sensitivity(
    model: &DenoiserModel,
    subjects: &[&Subject],
    stats: &AuxStats,
    keep: &AuxKeep,
    cfg: &SamplerConfig,
) -> Result<AuxSensitivity> {
    let full: Vec<Vec<f32>> = subjects
        .iter()
        .map(|s| aux_encode(&s.aux_raw, stats).to_array().to_vec())
        .collect();
    let baseline = Aggregate::of(&evaluate_model(model, subjects, &full, cfg)?);
    let (variable, kept) = match keep {
        AuxKeep::All => ("all".to_string(), baseline.clone()),
        AuxKeep::Only(name) => {
            let j = var_index(name)?;
            let aux: Vec<Vec<f32>> = subjects
                .iter()
                .map(|s| {
                    aux_encode(&keep_only(&s.aux_raw, stats, j), stats)
                        .to_array()
                        .to_vec()
                })
                .collect();
            (
                name.clone(),
                Aggregate::of(&evaluate_model(model, subjects, &aux, cfg)?),
            )
        }
    };
    Ok(AuxSensitivity {
        variable,
        delta_mae: kept.mae.mean - baseline.mae.mean,
        delta_psnr: kept.psnr.mean - baseline.psnr.mean,
        delta_ssim: kept.ssim.mean - baseline.ssim.mean,
        baseline,
        kept,
    })
}

pub const DEFAULT_STEP_LIST: [usize; 9] = [10, 20, 30, 50, 80, 100, 120, 150, 180];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    pub n_step: usize,
    pub metrics: Aggregate,
    /// Mean wall-clock seconds per subject.
    pub sec_per_subject: f64,
    /// Median over subjects, less sensitive to scheduling noise.
    pub median_sec_per_subject: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[k - 1] + s[k])
    } else {
        s[k]
    }
}

/// Quality and per-subject runtime at each step count. Subjects run
/// sequentially so the timings are not distorted by contention.
pub fn steps_sweep(
    model: &DenoiserModel,
    subjects: &[&Subject],
    aux: &[Vec<f32>],
    steps: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<SweepRow>> {
    if subjects.len() != aux.len() || subjects.is_empty() {
        return Err(Error::Shape(format!(
            "{} subjects vs {} aux vectors",
            subjects.len(),
            aux.len()
        )));
    }
    steps
        .iter()
        .map(|&n_step| {
            let c = SamplerConfig { n_step, ..*cfg };
            let mut rows = Vec::with_capacity(subjects.len());
            let mut secs = Vec::with_capacity(subjects.len());
            for (s, a) in subjects.iter().zip(aux) {
                let start = Instant::now();
                let pred = sample_subject(&s.structure, a, model, &c, &s.id)?;
                secs.push(start.elapsed().as_secs_f64());
                rows.push(SubjectRow::new(s, score_pair(&pred, &s.function)?));
            }
            Ok(SweepRow {
                n_step,
                metrics: Aggregate::of(&rows),
                sec_per_subject: secs.iter().sum::<f64>() / secs.len() as f64,
                median_sec_per_subject: median(&secs),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "nStep,maeMean,maeSd,mseMean,mseSd,psnrMean,psnrSd,ssimMean,ssimSd,secPerSubject,medianSecPerSubject\n",
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n_step,
            m.mae.mean,
            m.mae.sd,
            m.mse.mean,
            m.mse.sd,
            m.psnr.mean,
            m.psnr.sd,
            m.ssim.mean,
            m.ssim.sd,
            r.sec_per_subject,
            r.median_sec_per_subject
        );
    }
    s
}
