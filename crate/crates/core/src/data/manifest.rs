//! Cohort manifest: one JSON object per line, with volume paths relative to
//! the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::auxiliary::{AuxRaw, N_AUX_VARS};
use super::split::Split;
use super::{ClassLabel, Subject};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct AuxRecord {
    pub age: Option<f64>,
    pub gender: Option<f64>,
    pub education: Option<f64>,
    pub mmse: Option<f64>,
    pub adas13: Option<f64>,
    pub apoe4: Option<f64>,
    pub csf: Option<f64>,
    pub gray_matter: Option<f64>,
    pub white_matter: Option<f64>,
    pub hippocampus_l: Option<f64>,
    pub hippocampus_r: Option<f64>,
    pub entorhinal_l: Option<f64>,
    pub entorhinal_r: Option<f64>,
}

impl From<&AuxRaw> for AuxRecord {
    fn from(r: &AuxRaw) -> Self {
        AuxRecord {
            age: r[0],
            gender: r[1],
            education: r[2],
            mmse: r[3],
            adas13: r[4],
            apoe4: r[5],
            csf: r[6],
            gray_matter: r[7],
            white_matter: r[8],
            hippocampus_l: r[9],
            hippocampus_r: r[10],
            entorhinal_l: r[11],
            entorhinal_r: r[12],
        }
    }
}

impl From<&AuxRecord> for AuxRaw {
    fn from(a: &AuxRecord) -> Self {
        let out: [Option<f64>; N_AUX_VARS] = [
            a.age,
            a.gender,
            a.education,
            a.mmse,
            a.adas13,
            a.apoe4,
            a.csf,
            a.gray_matter,
            a.white_matter,
            a.hippocampus_l,
            a.hippocampus_r,
            a.entorhinal_l,
            a.entorhinal_r,
        ];
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ManifestEntry {
    pub id: String,
    pub class: ClassLabel,
    pub structure_path: String,
    pub function_path: String,
    pub aux: AuxRecord,
    pub split: Option<Split>,
    pub seed: u64,
}

/// Writes `volumes/<id>_{structure,function}.vol` and `manifest.jsonl` under `dir`.
pub fn write_cohort(dir: &Path, subjects: &[Subject], splits: Option<&[Split]>) -> Result<PathBuf> {
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for (k, s) in subjects.iter().enumerate() {
        let sp = format!("volumes/{}_structure.vol", s.id);
        let fp = format!("volumes/{}_function.vol", s.id);
        s.structure.write(dir.join(&sp))?;
        s.function.write(dir.join(&fp))?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            class: s.class,
            structure_path: sp,
            function_path: fp,
            aux: AuxRecord::from(&s.aux_raw),
            split: splits.map(|v| v[k]),
            seed: s.seed,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Loads every subject of a manifest with its split label.
pub fn load_cohort(path: &Path) -> Result<(Vec<Subject>, Vec<Option<Split>>)> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(path)?;
    let mut subjects = Vec::with_capacity(entries.len());
    let mut splits = Vec::with_capacity(entries.len());
    for e in entries {
        let structure = Volume::read(base.join(&e.structure_path))?;
        let function = Volume::read(base.join(&e.function_path))?;
        if structure.dims() != function.dims() {
            return Err(Error::Shape(format!(
                "subject {}: structure {:?} vs function {:?}",
                e.id,
                structure.dims(),
                function.dims()
            )));
        }
        subjects.push(Subject {
            aux_raw: AuxRaw::from(&e.aux),
            id: e.id,
            class: e.class,
            structure,
            function,
            seed: e.seed,
        });
        splits.push(e.split);
    }
    Ok((subjects, splits))
}
