//! The 13 auxiliary variables and their 26-feature encoding
//! (standardized values followed by presence flags).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_AUX_VARS: usize = 13;

pub const AUX_NAMES: [&str; N_AUX_VARS] = [
    "age",
    "gender",
    "education",
    "mmse",
    "adas13",
    "apoe4",
    "csf",
    "grayMatter",
    "whiteMatter",
    "hippocampusL",
    "hippocampusR",
    "entorhinalL",
    "entorhinalR",
];

/// Variables available at a local site: demographics and segmentation analogs.
pub const LOCAL_SUBSET: [&str; 9] = [
    "age",
    "gender",
    "csf",
    "grayMatter",
    "whiteMatter",
    "hippocampusL",
    "hippocampusR",
    "entorhinalL",
    "entorhinalR",
];

const MIN_STD: f64 = 1e-8;

pub type AuxRaw = [Option<f64>; N_AUX_VARS];

pub fn var_index(name: &str) -> Result<usize> {
    AUX_NAMES
        .iter()
        .position(|&n| n == name)
        .ok_or_else(|| Error::UnknownVariable(name.to_string()))
}

/// Per-variable mean and population standard deviation over present values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxStats {
    pub mean: [f64; N_AUX_VARS],
    pub std: [f64; N_AUX_VARS],
}

impl AuxStats {
    pub fn fit<'a>(raws: impl IntoIterator<Item = &'a AuxRaw>) -> Self {
        let mut n = [0f64; N_AUX_VARS];
        let mut s = [0f64; N_AUX_VARS];
        let mut ss = [0f64; N_AUX_VARS];
        for raw in raws {
            for (j, v) in raw.iter().enumerate() {
                if let Some(v) = v {
                    n[j] += 1.0;
                    s[j] += v;
                    ss[j] += v * v;
                }
            }
        }
        let mut mean = [0f64; N_AUX_VARS];
        let mut std = [0f64; N_AUX_VARS];
        for j in 0..N_AUX_VARS {
            if n[j] > 0.0 {
                mean[j] = s[j] / n[j];
                std[j] = (ss[j] / n[j] - mean[j] * mean[j]).max(0.0).sqrt();
            }
        }
        AuxStats { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxVector {
    pub values: [f32; N_AUX_VARS],
    pub flags: [f32; N_AUX_VARS],
}

impl AuxVector {
    pub const MISSING: AuxVector = AuxVector {
        values: [0.0; N_AUX_VARS],
        flags: [0.0; N_AUX_VARS],
    };

    /// Network input layout: the 13 values, then the 13 flags.
    pub fn to_array(&self) -> [f32; 2 * N_AUX_VARS] {
        let mut out = [0f32; 2 * N_AUX_VARS];
        out[..N_AUX_VARS].copy_from_slice(&self.values);
        out[N_AUX_VARS..].copy_from_slice(&self.flags);
        out
    }
}

pub fn aux_encode(raw: &AuxRaw, stats: &AuxStats) -> AuxVector {
    let mut v = AuxVector::MISSING;
    for (j, r) in raw.iter().enumerate() {
        if let Some(x) = r {
            v.flags[j] = 1.0;
            if stats.std[j] >= MIN_STD {
                v.values[j] = ((x - stats.mean[j]) / stats.std[j]) as f32;
            }
        }
    }
    v
}

pub fn aux_decode(v: &AuxVector, stats: &AuxStats) -> AuxRaw {
    let mut raw = [None; N_AUX_VARS];
    for j in 0..N_AUX_VARS {
        if v.flags[j] != 0.0 {
            raw[j] = Some(v.values[j] as f64 * stats.std[j] + stats.mean[j]);
        }
    }
    raw
}

/// Marks every variable outside `subset` as missing.
pub fn mask_to_subset(raw: &AuxRaw, subset: &[usize]) -> AuxRaw {
    let mut out = [None; N_AUX_VARS];
    for &j in subset {
        out[j] = raw[j];
    }
    out
}

/// Keeps variable `keep` at its value and sets every other variable to its
/// training mean (present).
pub fn keep_only(raw: &AuxRaw, stats: &AuxStats, keep: usize) -> AuxRaw {
    let mut out = [None; N_AUX_VARS];
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == keep {
            raw[j]
        } else {
            Some(stats.mean[j])
        };
    }
    out
}

pub fn subset_indices(names: &[impl AsRef<str>]) -> Result<Vec<usize>> {
    names.iter().map(|n| var_index(n.as_ref())).collect()
}
