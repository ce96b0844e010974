//! The run configuration file: one TOML table per pipeline stage.

use std::path::Path;

use ddbridge::bridge::BridgeSchedule;
use ddbridge::data::{subset_indices, CohortConfig, Site, Split, SplitConfig, AUX_NAMES};
use ddbridge::metrics::DEFAULT_STEP_LIST;
use ddbridge::network::NetConfig;
use ddbridge::sampler::SamplerConfig;
use ddbridge::training::{AdaptConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct DataSection {
    pub n: usize,
    pub class_mix: [f64; 3],
    pub volume_side: usize,
    pub site: Site,
    pub aux_coupling: f64,
    pub missing_rate: f64,
    pub split_ratios: [f64; 3],
    pub n_candidates: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CohortConfig::default();
        let s = SplitConfig::default();
        DataSection {
            n: c.n,
            class_mix: c.class_mix,
            volume_side: c.volume_side,
            site: c.site,
            aux_coupling: c.aux_coupling,
            missing_rate: c.missing_rate,
            split_ratios: s.ratios,
            n_candidates: s.n_candidates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

impl EvalSplit {
    pub fn admits(self, s: Option<Split>) -> bool {
        match self {
            EvalSplit::All => true,
            EvalSplit::Train => s == Some(Split::Train),
            EvalSplit::Val => s == Some(Split::Val),
            EvalSplit::Test => s == Some(Split::Test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct EvalSection {
    /// Subjects used by `sample`, `sweep-steps` and `ablate-aux`.
    pub split: EvalSplit,
    pub step_list: Vec<usize>,
    /// Variables for the keep-one ablation; `all` gives the baseline itself.
    pub variables: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: EvalSplit::Test,
            step_list: DEFAULT_STEP_LIST.to_vec(),
            variables: AUX_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub schedule: BridgeSchedule,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataSection,
    pub adapt: AdaptConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    /// Applies the command-line seed and propagates a top-level seed into
    /// every section, then validates.
    pub fn resolve(mut self, seed_flag: Option<u64>) -> Result<Self, Failure> {
        if seed_flag.is_some() {
            self.seed = seed_flag;
        }
        let seed = self.seed.unwrap_or(0);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.sampler.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let c = |e: ddbridge::Error| Failure::config(e.to_string());
        self.schedule.validate().map_err(c)?;
        self.net.validate().map_err(c)?;
        self.train.validate().map_err(c)?;
        self.sampler.validate().map_err(c)?;
        self.adapt.validate().map_err(c)?;
        self.cohort().validate().map_err(c)?;
        let r = self.data.split_ratios;
        if r.iter().any(|&v| !(v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Failure::config(format!(
                "data.splitRatios = {r:?} must be positive and sum to 1"
            )));
        }
        if self.data.n_candidates == 0 {
            return Err(Failure::config(
                "data.nCandidates must be at least 1".into(),
            ));
        }
        if self.eval.step_list.iter().any(|&n| n < 2) || self.eval.step_list.is_empty() {
            return Err(Failure::config(format!(
                "eval.stepList = {:?}: need entries >= 2",
                self.eval.step_list
            )));
        }
        for v in &self.eval.variables {
            if v != "all" {
                subset_indices(&[v])
                    .map_err(|e| Failure::config(format!("eval.variables: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn cohort(&self) -> CohortConfig {
        let d = &self.data;
        CohortConfig {
            n: d.n,
            class_mix: d.class_mix,
            volume_side: d.volume_side,
            seed: self.seed(),
            site: d.site,
            aux_coupling: d.aux_coupling,
            missing_rate: d.missing_rate,
        }
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            ratios: self.data.split_ratios,
            n_candidates: self.data.n_candidates,
            seed: self.seed(),
        }
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::runtime(format!("cannot serialise config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearningRate = 1.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn seed_propagates_and_roundtrips() {
        let c: RunConfig = toml::from_str("seed = 5\n[sampler]\nnStep = 40\n").unwrap();
        let c = c.resolve(Some(9)).unwrap();
        assert_eq!((c.train.seed, c.sampler.seed, c.cohort().seed), (9, 9, 9));
        assert_eq!(c.sampler.n_step, 40);
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn class_mix_error_names_the_key() {
        let c: RunConfig = toml::from_str("[data]\nclassMix = [0.3, 0.3, 0.3]\n").unwrap();
        let e = c.resolve(None).unwrap_err();
        assert!(e.message.contains("data.classMix"), "{}", e.message);
        assert_eq!(e.code(), 2);
    }
}
