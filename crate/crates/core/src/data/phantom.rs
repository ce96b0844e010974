//! Procedural brain phantoms.
//!
//! Each subject is an ellipsoidal brain with a cortical grey-matter shell,
//! white matter, two ventricles and two hippocampus analogs. Cortical
//! regions are angular caps on the ellipsoid. Disease classes thin the cortex
//! in their regions and reduce function there more strongly:
//!
//! - AD: both temporoparietal caps and the hippocampi,
//! - FTD: the frontal caps, one side dominant.
//!
//! The function volume is a monotone sigmoid of the blurred structure,
//! multiplied by the regional pattern and a global scale driven by MMSE and
//! age, then blurred and perturbed by smooth noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auxiliary::{AuxRaw, N_AUX_VARS};
use super::{ClassLabel, Subject};
use crate::error::{Error, Result};
use crate::util::stable_hash;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Public,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct CohortConfig {
    pub n: usize,
    /// Proportions of CN, AD, FTD.
    pub class_mix: [f64; 3],
    pub volume_side: usize,
    pub seed: u64,
    pub site: Site,
    /// Strength of the MMSE dependence of the global function scale.
    pub aux_coupling: f64,
    pub missing_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n: 60,
            class_mix: [0.4, 0.4, 0.2],
            volume_side: 16,
            seed: 0,
            site: Site::Public,
            aux_coupling: 1.0,
            missing_rate: 0.1,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("data.n = {} < 3", self.n)));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if self.class_mix.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.classMix = {:?} must be nonnegative and sum to 1 (sums to {sum})",
                self.class_mix
            )));
        }
        if self.volume_side < 4 {
            return Err(Error::Config(format!(
                "data.volumeSide = {} < 4",
                self.volume_side
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "data.missingRate = {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if !self.aux_coupling.is_finite() || self.aux_coupling < 0.0 {
            return Err(Error::Config(format!(
                "data.auxCoupling = {} must be >= 0",
                self.aux_coupling
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    FrontalL,
    FrontalR,
    TemporoparietalL,
    TemporoparietalR,
    Occipital,
    Hippocampus,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::FrontalL,
        Region::FrontalR,
        Region::TemporoparietalL,
        Region::TemporoparietalR,
        Region::Occipital,
        Region::Hippocampus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Region::FrontalL => "frontalL",
            Region::FrontalR => "frontalR",
            Region::TemporoparietalL => "temporoparietalL",
            Region::TemporoparietalR => "temporoparietalR",
            Region::Occipital => "occipital",
            Region::Hippocampus => "hippocampus",
        }
    }

    /// Cap direction (x: left to right, y: posterior to anterior, z: inferior to superior).
    fn direction(&self) -> Option<[f64; 3]> {
        let d: [f64; 3] = match self {
            Region::FrontalL => [-0.45, 0.85, 0.25],
            Region::FrontalR => [0.45, 0.85, 0.25],
            Region::TemporoparietalL => [-0.9, -0.35, 0.1],
            Region::TemporoparietalR => [0.9, -0.35, 0.1],
            Region::Occipital => [0.0, -1.0, 0.1],
            Region::Hippocampus => return None,
        };
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        Some([d[0] / n, d[1] / n, d[2] / n])
    }
}

const CAP_COS: f64 = 0.766;
const BRAIN_RADII: [f64; 3] = [0.78, 0.88, 0.70];
const CORTEX: f64 = 0.17;
const HIPPO_CENTER: [f64; 3] = [0.34, -0.12, -0.28];
const HIPPO_RADII: [f64; 3] = [0.10, 0.20, 0.09];
const VENT_CENTER: [f64; 3] = [0.14, 0.0, 0.08];
const VENT_RADII: [f64; 3] = [0.09, 0.28, 0.11];

const I_CSF: f64 = 0.12;
const I_GM: f64 = 0.55;
const I_WM: f64 = 0.85;

/// Subject-specific anatomy and pathology.
#[derive(Debug, Clone)]
struct Anatomy {
    center: [f64; 3],
    radii: [f64; 3],
    cortex: f64,
    vent_scale: f64,
    /// Structural thinning fraction per region (hippocampus: shrinkage).
    atrophy: [f64; 6],
    /// Functional reduction per region.
    hypo: [f64; 6],
}

impl Anatomy {
    fn template() -> Self {
        Anatomy {
            center: [0.0; 3],
            radii: BRAIN_RADII,
            cortex: CORTEX,
            vent_scale: 1.0,
            atrophy: [0.0; 6],
            hypo: [0.0; 6],
        }
    }
}

fn cap_weight(r: Region, dir: [f64; 3]) -> f64 {
    match r.direction() {
        Some(c) => {
            let cos = c[0] * dir[0] + c[1] * dir[1] + c[2] * dir[2];
            ((cos - CAP_COS) / (1.0 - CAP_COS)).clamp(0.0, 1.0)
        }
        None => 0.0,
    }
}

/// Linear ramp from 0 to 1 centred on 0 with total width `w`.
fn ramp(v: f64, w: f64) -> f64 {
    (v / w + 0.5).clamp(0.0, 1.0)
}

fn ellipsoid_radius(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| ((p[k] - c[k]) / r[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-voxel tissue fractions and pattern weights.
struct Tissue {
    csf: Vec<f64>,
    gm: Vec<f64>,
    wm: Vec<f64>,
    hippo_l: Vec<f64>,
    hippo_r: Vec<f64>,
    /// Functional multiplier `1 - sum(hypo * weight)`.
    pattern: Vec<f64>,
    brain: Vec<f64>,
}

fn voxel_coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

fn tissue(a: &Anatomy, n: usize) -> Tissue {
    let len = n * n * n;
    let mut t = Tissue {
        csf: vec![0.0; len],
        gm: vec![0.0; len],
        wm: vec![0.0; len],
        hippo_l: vec![0.0; len],
        hippo_r: vec![0.0; len],
        pattern: vec![1.0; len],
        brain: vec![0.0; len],
    };
    let mean_r = (a.radii[0] + a.radii[1] + a.radii[2]) / 3.0;
    let edge = 2.0 / (n as f64 * mean_r);
    let hippo_shrink = 1.0 - a.atrophy[5];
    let vent_r = VENT_RADII.map(|r| r * a.vent_scale);
    let hip_r = HIPPO_RADII.map(|r| r * hippo_shrink);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let i = (x * n + y) * n + z;
                let u = [voxel_coord(x, n), voxel_coord(y, n), voxel_coord(z, n)];
                let p = [0, 1, 2].map(|k| (u[k] - a.center[k]) / a.radii[k]);
                let rho = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let dir = if rho > 1e-12 {
                    p.map(|v| v / rho)
                } else {
                    [0.0, 0.0, 1.0]
                };
                let caps: Vec<f64> = Region::ALL.iter().map(|&r| cap_weight(r, dir)).collect();
                let thin: f64 = (0..5).map(|k| a.atrophy[k] * caps[k]).sum();
                // Regional thinning pulls the outer boundary inward.
                let outer = 1.0 - a.cortex * thin;
                let inner = 1.0 - a.cortex;
                let brain = ramp(outer - rho, edge);
                let deep = ramp(inner - rho, edge).min(brain);
                let cortex = brain - deep;
                // Normalized space of the brain ellipsoid.
                let q = p;
                let vent = ramp(
                    1.0 - ellipsoid_radius([q[0].abs(), q[1], q[2]], VENT_CENTER, vent_r),
                    edge * 4.0,
                );
                let hl = ramp(
                    1.0 - ellipsoid_radius([-q[0], q[1], q[2]], HIPPO_CENTER, hip_r),
                    edge * 4.0,
                );
                let hr = ramp(1.0 - ellipsoid_radius(q, HIPPO_CENTER, hip_r), edge * 4.0);
                let csf = deep * vent;
                let rest = deep - csf;
                let (hl, hr) = (rest * hl, rest * hr);
                t.csf[i] = csf;
                t.hippo_l[i] = hl;
                t.hippo_r[i] = hr;
                t.gm[i] = cortex + hl + hr;
                t.wm[i] = rest - hl - hr;
                t.brain[i] = brain;
                let outer_band = ((rho - 0.55) / 0.2).clamp(0.0, 1.0);
                let cortical: f64 = (0..5).map(|k| a.hypo[k] * caps[k]).sum::<f64>() * outer_band;
                let hippo = a.hypo[5] * ((hl + hr) / rest.max(1e-9)).min(1.0);
                t.pattern[i] = (1.0 - cortical - hippo).max(0.0);
            }
        }
    }
    t
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(v: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return v.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    let mut cur = v.to_vec();
    let strides = [n * n, n, 1];
    for &stride in &strides {
        let mut out = vec![0.0; cur.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = (i / stride % n) as isize;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let q = (pos + j as isize - r).clamp(0, n as isize - 1) as usize;
                acc += w * cur[base + q * stride];
            }
            *o = acc;
        }
        cur = out;
    }
    cur
}

fn uptake(s: f64) -> f64 {
    0.8 / (1.0 + (-8.0 * (s - 0.4)).exp())
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).unwrap().sample(rng)
}

struct SiteParams {
    age_shift: f64,
    edu_shift: f64,
    seg_scale: f64,
    psf: f64,
    func_scale: f64,
    gamma: f64,
    contrast: f64,
}

fn site_params(site: Site) -> SiteParams {
    match site {
        Site::Public => SiteParams {
            age_shift: 0.0,
            edu_shift: 0.0,
            seg_scale: 1.0,
            psf: 0.6,
            func_scale: 1.0,
            gamma: 1.0,
            contrast: 1.0,
        },
        Site::Local => SiteParams {
            age_shift: -7.0,
            edu_shift: -2.5,
            seg_scale: 1.06,
            psf: 1.1,
            func_scale: 0.88,
            gamma: 1.35,
            contrast: 1.1,
        },
    }
}

/// Generates one subject from its own seed.
pub fn generate_subject(id: &str, class: ClassLabel, cfg: &CohortConfig) -> Subject {
    let seed = stable_hash(cfg.seed, id.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let site = site_params(cfg.site);
    let n = cfg.volume_side;

    let sev = match class {
        ClassLabel::CN => 0.0,
        _ => rng.random_range(0.5..1.0),
    };
    let (age_m, age_s, male_p, edu_m, mmse_m, mmse_s, apoe) = match class {
        ClassLabel::CN => (73.5, 6.0, 0.49, 16.4, 29.0, 1.2, [0.72, 0.25]),
        ClassLabel::AD => (74.4, 7.9, 0.59, 15.4, 23.2, 2.2, [0.31, 0.48]),
        ClassLabel::FTD => (65.4, 9.2, 0.58, 14.8, 24.5, 2.5, [0.70, 0.25]),
    };
    let age = normal(&mut rng, age_m + site.age_shift, age_s).clamp(45.0, 95.0);
    let gender = if rng.random_bool(male_p) { 1.0 } else { 0.0 };
    let education = normal(&mut rng, edu_m + site.edu_shift, 2.8)
        .clamp(4.0, 24.0)
        .round();
    let mmse = normal(&mut rng, mmse_m, mmse_s).clamp(0.0, 30.0).round();
    let adas = (9.3 + 3.6 * (29.0 - mmse) + normal(&mut rng, 0.0, 3.0)).clamp(0.0, 85.0);
    let u: f64 = rng.random();
    let apoe4 = if u < apoe[0] {
        0.0
    } else if u < apoe[0] + apoe[1] {
        1.0
    } else {
        2.0
    };

    let mut a = Anatomy::template();
    let scale = normal(&mut rng, 1.0, 0.03);
    a.radii = BRAIN_RADII.map(|r| r * scale);
    for c in &mut a.center {
        *c = normal(&mut rng, 0.0, 0.02);
    }
    a.cortex = CORTEX * normal(&mut rng, 1.0, 0.05) * (1.0 - 0.003 * (age - 70.0));
    a.vent_scale = (normal(&mut rng, 1.0, 0.08) * (1.0 + 0.012 * (age - 70.0))).max(0.5);
    match class {
        ClassLabel::CN => {}
        ClassLabel::AD => {
            a.atrophy[2] = 0.45 * sev;
            a.atrophy[3] = 0.45 * sev;
            a.atrophy[5] = 0.3 * sev;
            a.hypo[2] = 0.45 * sev;
            a.hypo[3] = 0.45 * sev;
            a.hypo[5] = 0.3 * sev;
        }
        ClassLabel::FTD => {
            let (dom, other) = if rng.random_bool(0.5) { (0, 1) } else { (1, 0) };
            a.atrophy[dom] = 0.5 * sev;
            a.atrophy[other] = 0.2 * sev;
            a.hypo[dom] = 0.5 * sev;
            a.hypo[other] = 0.2 * sev;
        }
    }

    let t = tissue(&a, n);
    let len = n * n * n;
    let struct_raw: Vec<f64> = (0..len)
        .map(|i| I_CSF * t.csf[i] + I_GM * t.gm[i] + I_WM * t.wm[i])
        .collect();
    let mut s_blur = gaussian_blur(&struct_raw, n, 0.5);
    for v in &mut s_blur {
        *v += normal(&mut rng, 0.0, 0.01);
    }

    let g = (1.0 + cfg.aux_coupling * 0.02 * (mmse - 27.0) - 0.002 * (age - 70.0)).clamp(0.5, 1.35);
    let func_clean: Vec<f64> = (0..len)
        .map(|i| g * uptake(s_blur[i].clamp(0.0, 1.0)) * t.pattern[i])
        .collect();
    let mut func = gaussian_blur(&func_clean, n, site.psf);
    let white: Vec<f64> = (0..len).map(|_| normal(&mut rng, 0.0, 0.05)).collect();
    let smooth = gaussian_blur(&white, n, 1.0);
    for (f, e) in func.iter_mut().zip(&smooth) {
        *f = (*f * site.func_scale + e).clamp(0.0, 1.0);
    }
    let structure: Vec<f32> = s_blur
        .iter()
        .map(|&s| (site.contrast * s.clamp(0.0, 1.0).powf(site.gamma)).clamp(0.0, 1.0) as f32)
        .collect();

    let voxel_ml = (2.0 / n as f64).powi(3) * 1000.0;
    let seg = |v: &[f64]| v.iter().sum::<f64>() * voxel_ml * site.seg_scale;
    let thick = |tp: f64| 10.0 * a.cortex * (1.0 - 0.5 * tp - 0.5 * a.atrophy[5]);
    let meas = |rng: &mut ChaCha8Rng, v: f64| v * normal(rng, 1.0, 0.02);
    let segs = [
        seg(&t.csf),
        seg(&t.gm),
        seg(&t.wm),
        seg(&t.hippo_l),
        seg(&t.hippo_r),
        thick(a.atrophy[2]) / site.seg_scale,
        thick(a.atrophy[3]) / site.seg_scale,
    ];
    let mut values = [
        age, gender, education, mmse, adas, apoe4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    for (k, s) in segs.into_iter().enumerate() {
        values[6 + k] = meas(&mut rng, s);
    }
    let mut aux_raw: AuxRaw = [None; N_AUX_VARS];
    for (j, v) in values.into_iter().enumerate() {
        let missing = j >= 2 && rng.random_bool(cfg.missing_rate);
        aux_raw[j] = if missing { None } else { Some(v) };
    }

    let dims = [n; 3];
    Subject {
        id: id.to_string(),
        class,
        structure: Volume::from_vec(dims, structure).expect("structure length"),
        function: Volume::from_vec(dims, func.into_iter().map(|v| v as f32).collect())
            .expect("function length"),
        aux_raw,
        seed,
    }
}

/// Exact class counts by largest remainder, shuffled by the master seed.
fn class_assignment(cfg: &CohortConfig) -> Vec<ClassLabel> {
    let n = cfg.n as f64;
    let mut counts: Vec<usize> = cfg
        .class_mix
        .iter()
        .map(|p| (p * n).floor() as usize)
        .collect();
    let mut rem: Vec<(f64, usize)> = cfg
        .class_mix
        .iter()
        .enumerate()
        .map(|(k, p)| (p * n - (p * n).floor(), k))
        .collect();
    rem.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut left = cfg.n - counts.iter().sum::<usize>();
    for &(r, k) in &rem {
        if left == 0 {
            break;
        }
        if r > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    let mut labels: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(cfg.seed, b"classes"));
    labels.shuffle(&mut rng);
    labels
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{:04}", i + 1)
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Vec<Subject>> {
    cfg.validate()?;
    let labels = class_assignment(cfg);
    Ok(labels
        .par_iter()
        .enumerate()
        .map(|(i, &c)| generate_subject(&subject_id(i), c, cfg))
        .collect())
}

/// Voxels of `region` on the template anatomy whose weight exceeds `min_weight`.
pub fn region_mask(region: Region, side: usize, min_weight: f64) -> Vec<bool> {
    let a = Anatomy::template();
    let t = tissue(&a, side);
    let n = side;
    let mut out = vec![false; n * n * n];
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let i = (x * n + y) * n + z;
                if t.brain[i] <= 0.0 {
                    continue;
                }
                let u = [voxel_coord(x, n), voxel_coord(y, n), voxel_coord(z, n)];
                let p = [0, 1, 2].map(|k| u[k] / a.radii[k]);
                let rho = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let w = match region {
                    Region::Hippocampus => {
                        let q = [p[0].abs(), p[1], p[2]];
                        let d = ellipsoid_radius(q, HIPPO_CENTER, HIPPO_RADII);
                        if d < 1.0 + 4.0 / n as f64 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    r => {
                        let dir = if rho > 1e-12 {
                            p.map(|v| v / rho)
                        } else {
                            [0.0, 0.0, 1.0]
                        };
                        cap_weight(r, dir) * ((rho - 0.55) / 0.2).clamp(0.0, 1.0)
                    }
                };
                out[i] = w > min_weight;
            }
        }
    }
    out
}

/// Template brain support (voxels with any brain fraction).
pub fn brain_mask(side: usize) -> Vec<bool> {
    tissue(&Anatomy::template(), side)
        .brain
        .iter()
        .map(|&b| b > 0.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, mix: [f64; 3]) -> CohortConfig {
        CohortConfig {
            n,
            class_mix: mix,
            volume_side: 8,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small(6, [0.4, 0.4, 0.2]);
        assert_eq!(
            generate_cohort(&cfg).unwrap(),
            generate_cohort(&cfg).unwrap()
        );
    }

    #[test]
    fn pure_cn_mix() {
        let c = generate_cohort(&small(9, [1.0, 0.0, 0.0])).unwrap();
        assert!(c.iter().all(|s| s.class == ClassLabel::CN));
    }

    #[test]
    fn exact_class_counts() {
        let c = generate_cohort(&small(10, [0.5, 0.3, 0.2])).unwrap();
        let count = |l| c.iter().filter(|s| s.class == l).count();
        assert_eq!(
            (
                count(ClassLabel::CN),
                count(ClassLabel::AD),
                count(ClassLabel::FTD)
            ),
            (5, 3, 2)
        );
    }

    #[test]
    fn volumes_in_unit_range() {
        for site in [Site::Public, Site::Local] {
            let cfg = CohortConfig {
                site,
                ..small(6, [0.4, 0.4, 0.2])
            };
            for s in generate_cohort(&cfg).unwrap() {
                for v in [&s.structure, &s.function] {
                    assert!(v.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
                }
                assert!(s.structure.mean() > 0.05);
                assert!(s.function.mean() > 0.05);
            }
        }
    }

    #[test]
    fn age_and_gender_never_missing() {
        let cfg = CohortConfig {
            missing_rate: 0.9,
            ..small(20, [0.4, 0.4, 0.2])
        };
        let c = generate_cohort(&cfg).unwrap();
        assert!(c
            .iter()
            .all(|s| s.aux_raw[0].is_some() && s.aux_raw[1].is_some()));
        assert!(c.iter().any(|s| s.aux_raw[3].is_none()));
    }

    #[test]
    fn invalid_mix_rejected() {
        let cfg = small(10, [0.5, 0.3, 0.1]);
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let v = vec![0.3; 125];
        assert!(gaussian_blur(&v, 5, 1.0)
            .iter()
            .all(|x| (x - 0.3).abs() < 1e-12));
        let mut d = vec![0.0; 9 * 9 * 9];
        d[(4 * 9 + 4) * 9 + 4] = 1.0;
        let b = gaussian_blur(&d, 9, 0.8);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn region_masks_nonempty_and_lateralized() {
        let l = region_mask(Region::TemporoparietalL, 16, 0.1);
        let r = region_mask(Region::TemporoparietalR, 16, 0.1);
        assert!(l.iter().any(|&b| b) && r.iter().any(|&b| b));
        assert!(l.iter().zip(&r).all(|(a, b)| !(*a && *b)));
        assert!(region_mask(Region::Hippocampus, 16, 0.5).iter().any(|&b| b));
    }
}
