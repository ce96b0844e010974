//! Synthetic paired cohorts, auxiliary-variable encoding, balanced splits
//! and the cohort manifest.

pub mod auxiliary;
pub mod manifest;
pub mod phantom;
pub mod split;

pub use auxiliary::{
    aux_decode, aux_encode, keep_only, mask_to_subset, subset_indices, var_index, AuxRaw, AuxStats,
    AuxVector, AUX_NAMES, LOCAL_SUBSET, N_AUX_VARS,
};
pub use manifest::{load_cohort, read_manifest, write_cohort, AuxRecord, ManifestEntry};
pub use phantom::{
    brain_mask, gaussian_blur, generate_cohort, generate_subject, region_mask, subject_id,
    CohortConfig, Region, Site,
};
pub use split::{
    confounder_matrix, evaluate_candidates, fit_logistic, imbalance, propensity_split,
    ImbalanceMethod, Split, SplitAssignment, SplitConfig,
};

use serde::{Deserialize, Serialize};

use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    CN,
    AD,
    FTD,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::CN, ClassLabel::AD, ClassLabel::FTD];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::CN => "CN",
            ClassLabel::AD => "AD",
            ClassLabel::FTD => "FTD",
        }
    }
}

/// One paired structure/function subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub class: ClassLabel,
    pub structure: Volume,
    pub function: Volume,
    pub aux_raw: AuxRaw,
    pub seed: u64,
}

impl Subject {
    pub fn age(&self) -> Option<f64> {
        self.aux_raw[0]
    }

    pub fn gender(&self) -> Option<f64> {
        self.aux_raw[1]
    }
}
