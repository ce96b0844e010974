//! Subcommand implementations. Each writes into its own output directory
//! with fixed file names, plus the effective configuration.

use std::fs;
use std::path::{Path, PathBuf};

use ddbridge::bridge::DataStats;
use ddbridge::data::{
    generate_cohort, load_cohort, propensity_split, subset_indices, write_cohort, AuxStats, Split,
    Subject,
};
use ddbridge::metrics::{
    aux_sensitivity, score_pair, steps_sweep, sweep_csv, AuxKeep, AuxSensitivity, MetricReport,
    SubjectRow,
};
use ddbridge::network::{checkpoint, DenoiserModel};
use ddbridge::sampler::sample_subject;
use ddbridge::training::{encode_subject_aux, local_adapt, log_csv, train, TrainOutcome};
use ddbridge::Volume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::{Failure, Kind};

pub const CONFIG_FILE: &str = "effective_config.toml";
pub const CONDITIONING_FILE: &str = "conditioning.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

/// Auxiliary normalisation and masking a checkpoint was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct Conditioning {
    pub aux_stats: AuxStats,
    pub aux_subset: Option<Vec<String>>,
}

impl Conditioning {
    fn encode(&self, s: &Subject) -> Result<Vec<f32>, Failure> {
        let subset = self
            .aux_subset
            .as_ref()
            .map(|v| subset_indices(v))
            .transpose()?;
        Ok(encode_subject_aux(s, &self.aux_stats, subset.as_deref()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub path: String,
}

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml()?)
}

fn json<T: Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::runtime(e.to_string()))
}

fn load_manifest(path: &Path) -> Result<(Vec<Subject>, Vec<Option<Split>>), Failure> {
    if !path.exists() {
        return Err(Failure::new(
            Kind::Manifest,
            format!("{} does not exist", path.display()),
        ));
    }
    load_cohort(path).map_err(|e| Failure::new(Kind::Manifest, e.to_string()))
}

fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, Conditioning), Failure> {
    if !path.is_file() {
        return Err(Failure::new(
            Kind::MissingCheckpoint,
            format!("{} not found", path.display()),
        ));
    }
    let model = checkpoint::load(path)?;
    let cpath = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(CONDITIONING_FILE);
    let text = fs::read_to_string(&cpath)
        .map_err(|e| Failure::new(Kind::MissingCheckpoint, format!("{}: {e}", cpath.display())))?;
    let cond = serde_json::from_str(&text)
        .map_err(|e| Failure::new(Kind::MissingCheckpoint, format!("{}: {e}", cpath.display())))?;
    Ok((model, cond))
}

fn check_side(model: &DenoiserModel, subjects: &[Subject]) -> Result<(), Failure> {
    let side = model.config().volume_side;
    match subjects.iter().find(|s| s.structure.dims() != [side; 3]) {
        Some(s) => Err(Failure::new(
            Kind::Manifest,
            format!(
                "subject {} has volume {:?}, checkpoint expects {side}^3",
                s.id,
                s.structure.dims()
            ),
        )),
        None => Ok(()),
    }
}

fn all_labelled(splits: &[Option<Split>]) -> Result<Vec<Split>, Failure> {
    splits
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                Failure::new(
                    Kind::Manifest,
                    format!("manifest line {} has no split", i + 1),
                )
            })
        })
        .collect()
}

fn selected<'a>(
    cfg: &RunConfig,
    subjects: &'a [Subject],
    splits: &[Option<Split>],
) -> Result<Vec<&'a Subject>, Failure> {
    let picked: Vec<&Subject> = subjects
        .iter()
        .zip(splits)
        .filter(|(_, s)| cfg.eval.split.admits(**s))
        .map(|(s, _)| s)
        .collect();
    if picked.is_empty() {
        return Err(Failure::config(format!(
            "eval.split = {:?} selects no subjects",
            cfg.eval.split
        )));
    }
    Ok(picked)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    prepare_out(out, cfg)?;
    let subjects = generate_cohort(&cfg.cohort())?;
    let assignment = propensity_split(&subjects, &cfg.split())?;
    write_cohort(out, &subjects, Some(&assignment.splits))?;
    write_text(&out.join("split.json"), &json(&assignment)?)
}

fn save_training(out: &Path, outcome: &TrainOutcome, cond: &Conditioning) -> Result<(), Failure> {
    checkpoint::save(&outcome.best, out.join("best.ckpt"))?;
    checkpoint::save(&outcome.last, out.join("last.ckpt"))?;
    write_text(&out.join("metrics.csv"), &log_csv(&outcome.log, true))?;
    write_text(&out.join(CONDITIONING_FILE), &json(cond)?)?;
    #[derive(Serialize)]
    #[serde(rename_all = "camelCase")]
    struct Summary<'a> {
        best_iter: usize,
        best_val_mae: f64,
        divergence: &'a Option<ddbridge::training::Divergence>,
    }
    write_text(
        &out.join("summary.json"),
        &json(&Summary {
            best_iter: outcome.best_iter,
            best_val_mae: outcome.best_val_mae,
            divergence: &outcome.divergence,
        })?,
    )?;
    match &outcome.divergence {
        Some(d) => Err(Failure::new(
            Kind::DivergedTraining,
            format!(
                "{} (best checkpoint from iteration {} kept)",
                d.message, outcome.best_iter
            ),
        )),
        None => Ok(()),
    }
}

pub fn train_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let (subjects, splits) = load_manifest(manifest)?;
    let splits = all_labelled(&splits)?;
    let side = subjects
        .first()
        .and_then(|s| s.structure.side())
        .ok_or_else(|| {
            Failure::new(Kind::Manifest, "empty manifest or non-cubic volumes".into())
        })?;
    let mut cfg = cfg.clone();
    cfg.net.volume_side = side;
    cfg.validate()?;
    prepare_out(out, &cfg)?;
    let model = DenoiserModel::init(cfg.net, cfg.schedule, DataStats::default(), cfg.seed())?;
    let outcome = train(model, &subjects, &splits, &cfg.train)?;
    let cond = Conditioning {
        aux_stats: outcome.aux_stats,
        aux_subset: cfg.train.aux_subset.clone(),
    };
    save_training(out, &outcome, &cond)
}

pub fn adapt_cmd(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let ckpt: PathBuf = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.adapt.base_checkpoint.clone())
        .ok_or_else(|| {
            Failure::new(
                Kind::MissingCheckpoint,
                "pass --checkpoint or set adapt.baseCheckpoint".into(),
            )
        })?;
    let (base, cond) = load_checkpoint(&ckpt)?;
    let (subjects, splits) = load_manifest(manifest)?;
    check_side(&base, &subjects)?;
    let splits = all_labelled(&splits)?;
    let mut cfg = cfg.clone();
    cfg.adapt.base_checkpoint = Some(ckpt);
    prepare_out(out, &cfg)?;
    let outcome = local_adapt(
        &base,
        &cond.aux_stats,
        &subjects,
        &splits,
        &cfg.adapt,
        &cfg.train,
    )?;
    let cond = Conditioning {
        aux_stats: cond.aux_stats,
        aux_subset: Some(cfg.adapt.aux_subset.clone()),
    };
    save_training(out, &outcome, &cond)
}

pub fn sample_cmd(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), Failure> {
    let (model, cond) = load_checkpoint(checkpoint)?;
    let (subjects, splits) = load_manifest(manifest)?;
    check_side(&model, &subjects)?;
    let picked = selected(cfg, &subjects, &splits)?;
    prepare_out(out, cfg)?;
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| io_fail(&vol_dir, e))?;
    let aux = picked
        .iter()
        .map(|s| cond.encode(s))
        .collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<Volume> = picked
        .par_iter()
        .zip(aux.par_iter())
        .map(|(s, a)| sample_subject(&s.structure, a, &model, &cfg.sampler, &s.id))
        .collect::<Result<_, _>>()?;
    let mut lines = String::new();
    for (s, v) in picked.iter().zip(&preds) {
        let rel = format!("volumes/{}_function_sim.vol", s.id);
        v.write(out.join(&rel))?;
        lines.push_str(
            &serde_json::to_string(&SampleEntry {
                id: s.id.clone(),
                path: rel,
            })
            .map_err(|e| Failure::runtime(e.to_string()))?,
        );
        lines.push('\n');
    }
    write_text(&out.join(SAMPLES_FILE), &lines)
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    manifest: &Path,
    predictions: &Path,
    out: &Path,
) -> Result<(), Failure> {
    let (subjects, _) = load_manifest(manifest)?;
    let text = fs::read_to_string(predictions)
        .map_err(|e| Failure::new(Kind::Manifest, format!("{}: {e}", predictions.display())))?;
    let base = predictions.parent().unwrap_or(Path::new("."));
    let entries: Vec<SampleEntry> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                Failure::new(Kind::Manifest, format!("{}: {e}", predictions.display()))
            })
        })
        .collect::<Result<_, _>>()?;
    prepare_out(out, cfg)?;
    let rows: Vec<SubjectRow> = entries
        .par_iter()
        .map(|e| {
            let s = subjects.iter().find(|s| s.id == e.id).ok_or_else(|| {
                Failure::new(
                    Kind::Manifest,
                    format!("prediction for unknown subject {}", e.id),
                )
            })?;
            let pred = Volume::read(base.join(&e.path))?;
            Ok(SubjectRow::new(s, score_pair(&pred, &s.function)?))
        })
        .collect::<Result<_, Failure>>()?;
    let report = MetricReport::from_rows(rows);
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_text(&out.join("metrics.json"), &report.aggregates_json()?)
}

pub fn sweep_cmd(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), Failure> {
    let (model, cond) = load_checkpoint(checkpoint)?;
    let (subjects, splits) = load_manifest(manifest)?;
    check_side(&model, &subjects)?;
    let picked = selected(cfg, &subjects, &splits)?;
    prepare_out(out, cfg)?;
    let aux = picked
        .iter()
        .map(|s| cond.encode(s))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = steps_sweep(&model, &picked, &aux, &cfg.eval.step_list, &cfg.sampler)?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    write_text(&out.join("sweep.json"), &json(&rows)?)
}

pub fn ablate_cmd(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), Failure> {
    let (model, cond) = load_checkpoint(checkpoint)?;
    let (subjects, splits) = load_manifest(manifest)?;
    check_side(&model, &subjects)?;
    let picked = selected(cfg, &subjects, &splits)?;
    let keeps = cfg
        .eval
        .variables
        .iter()
        .map(|v| AuxKeep::parse(v))
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out(out, cfg)?;
    let results: Vec<AuxSensitivity> = keeps
        .iter()
        .map(|k| aux_sensitivity(&model, &picked, &cond.aux_stats, k, &cfg.sampler))
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("variable,deltaMAE,deltaPSNR,deltaSSIM\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.variable, r.delta_mae, r.delta_psnr, r.delta_ssim
        ));
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("ablation.json"), &json(&results)?)
}
