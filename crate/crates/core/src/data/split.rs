//! Propensity-balanced train/val/test partitioning.
//!
//! For each random candidate partition a logistic model predicts train
//! membership from (class, age, gender). The imbalance of a candidate is the
//! largest absolute gap between the integer-percentile curves (1..99) of the
//! propensity scores of any two splits. The candidate with the lowest
//! imbalance wins; ties go to the lower candidate index.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, Subject};
use crate::error::{Error, Result};
use crate::util::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct SplitConfig {
    /// Fractions for train, val, test.
    pub ratios: [f64; 3],
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.6, 0.2, 0.2],
            n_candidates: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ImbalanceMethod {
    Propensity,
    /// The logistic fit diverged; raw confounder percentiles were compared.
    RawConfounders,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SplitAssignment {
    pub ids: Vec<String>,
    pub splits: Vec<Split>,
    pub imbalance: f64,
    pub candidate_index: usize,
    pub candidate_seed: u64,
    pub method: ImbalanceMethod,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|k| self.splits[k])
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}

const N_FEAT: usize = 5;
const IRLS_MAX_ITERS: usize = 100;
const IRLS_TOL: f64 = 1e-8;
const RIDGE: f64 = 1e-6;

/// Rows of `[1, isAD, isFTD, age (standardized), gender]`.
pub fn confounder_matrix(subjects: &[Subject]) -> Vec<[f64; N_FEAT]> {
    let ages: Vec<f64> = subjects
        .iter()
        .map(|s| s.age().unwrap_or(f64::NAN))
        .collect();
    let present: Vec<f64> = ages.iter().copied().filter(|a| a.is_finite()).collect();
    let m = present.iter().sum::<f64>() / present.len().max(1) as f64;
    let sd = (present.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / present.len().max(1) as f64)
        .sqrt();
    subjects
        .iter()
        .zip(&ages)
        .map(|(s, &a)| {
            let z = if a.is_finite() && sd > 0.0 {
                (a - m) / sd
            } else {
                0.0
            };
            [
                1.0,
                (s.class == ClassLabel::AD) as u8 as f64,
                (s.class == ClassLabel::FTD) as u8 as f64,
                z,
                s.gender().unwrap_or(0.5),
            ]
        })
        .collect()
}

fn solve(mut a: [[f64; N_FEAT]; N_FEAT], mut b: [f64; N_FEAT]) -> Option<[f64; N_FEAT]> {
    for col in 0..N_FEAT {
        let piv = (col..N_FEAT).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..N_FEAT {
            let f = a[r][col] / a[col][col];
            for c in col..N_FEAT {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; N_FEAT];
    for r in (0..N_FEAT).rev() {
        let s: f64 = (r + 1..N_FEAT).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Ridge-stabilized logistic regression by IRLS; `None` if it fails to converge.
pub fn fit_logistic(x: &[[f64; N_FEAT]], y: &[f64]) -> Option<[f64; N_FEAT]> {
    let mut beta = [0.0; N_FEAT];
    for _ in 0..IRLS_MAX_ITERS {
        let mut h = [[0.0; N_FEAT]; N_FEAT];
        let mut g = [0.0; N_FEAT];
        for (row, &yi) in x.iter().zip(y) {
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = sigmoid(eta);
            let w = p * (1.0 - p);
            for i in 0..N_FEAT {
                g[i] += row[i] * (yi - p);
                for j in 0..N_FEAT {
                    h[i][j] += w * row[i] * row[j];
                }
            }
        }
        for i in 1..N_FEAT {
            g[i] -= RIDGE * beta[i];
            h[i][i] += RIDGE;
        }
        h[0][0] += 1e-12;
        let delta = solve(h, g)?;
        for i in 0..N_FEAT {
            beta[i] += delta[i];
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return None;
        }
        if delta.iter().all(|d| d.abs() < IRLS_TOL) {
            return Some(beta);
        }
    }
    None
}

/// Linear-interpolation percentile of sorted data at `q` in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn percentile_curve(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    (1..=99).map(|q| percentile(&v, q as f64)).collect()
}

/// Largest gap between the percentile curves of `values` across splits.
fn max_curve_gap(values: &[f64], splits: &[Split]) -> f64 {
    let curves: Vec<Vec<f64>> = Split::ALL
        .iter()
        .map(|&s| {
            values
                .iter()
                .zip(splits)
                .filter(|(_, &sp)| sp == s)
                .map(|(&v, _)| v)
                .collect::<Vec<_>>()
        })
        .filter(|v| !v.is_empty())
        .map(percentile_curve)
        .collect();
    let mut gap = 0f64;
    for a in 0..curves.len() {
        for b in a + 1..curves.len() {
            for (x, y) in curves[a].iter().zip(&curves[b]) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    gap
}

/// Imbalance of one partition over the given confounder rows.
pub fn imbalance(x: &[[f64; N_FEAT]], splits: &[Split]) -> (f64, ImbalanceMethod) {
    let y: Vec<f64> = splits
        .iter()
        .map(|&s| (s == Split::Train) as u8 as f64)
        .collect();
    match fit_logistic(x, &y) {
        Some(beta) => {
            let p: Vec<f64> = x
                .iter()
                .map(|row| sigmoid(row.iter().zip(&beta).map(|(a, b)| a * b).sum()))
                .collect();
            (max_curve_gap(&p, splits), ImbalanceMethod::Propensity)
        }
        None => {
            let gap = (1..N_FEAT)
                .map(|k| max_curve_gap(&x.iter().map(|r| r[k]).collect::<Vec<_>>(), splits))
                .fold(0f64, f64::max);
            (gap, ImbalanceMethod::RawConfounders)
        }
    }
}

fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split.ratios = {ratios:?} must be positive and sum to 1"
        )));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = (n as f64 * ratios[1]).round() as usize;
    if train == 0 || val == 0 || train + val >= n {
        return Err(Error::Config(format!(
            "{n} subjects cannot fill three non-empty splits with ratios {ratios:?}"
        )));
    }
    Ok([train, val, n - train - val])
}

fn candidate(n: usize, counts: [usize; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (k, &i) in order.iter().enumerate() {
        out[i] = if k < counts[0] {
            Split::Train
        } else if k < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn candidate_seed(seed: u64, index: usize) -> u64 {
    stable_hash(seed, &(index as u64).to_le_bytes())
}

/// Every candidate partition with its imbalance, in candidate order.
pub fn evaluate_candidates(
    subjects: &[Subject],
    cfg: &SplitConfig,
) -> Result<Vec<(Vec<Split>, f64, ImbalanceMethod)>> {
    let counts = split_counts(subjects.len(), cfg.ratios)?;
    let x = confounder_matrix(subjects);
    Ok((0..cfg.n_candidates)
        .map(|c| {
            let splits = candidate(subjects.len(), counts, candidate_seed(cfg.seed, c));
            let (imb, method) = imbalance(&x, &splits);
            (splits, imb, method)
        })
        .collect())
}

pub fn propensity_split(subjects: &[Subject], cfg: &SplitConfig) -> Result<SplitAssignment> {
    if cfg.n_candidates == 0 {
        return Err(Error::Config("split.nCandidates must be >= 1".into()));
    }
    let candidates = evaluate_candidates(subjects, cfg)?;
    let mut best = 0;
    for (c, cand) in candidates.iter().enumerate() {
        if cand.1 < candidates[best].1 {
            best = c;
        }
    }
    let (splits, imbalance, method) = candidates.into_iter().nth(best).expect("non-empty");
    Ok(SplitAssignment {
        ids: subjects.iter().map(|s| s.id.clone()).collect(),
        splits,
        imbalance,
        candidate_index: best,
        candidate_seed: candidate_seed(cfg.seed, best),
        method,
    })
}
