//! Episode/triplet data model and preprocessing.
//!
//! An episode is a static vector plus a set of (time, feature, value)
//! observation triplets. Missingness stays representable end to end: hours
//! with no observation simply emit nothing, and no time-series value is ever
//! imputed or interpolated.

pub mod parse;
pub mod preprocess;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlacError};

/// One (time, feature, value) observation. `feature` is a dense index into
/// the cohort vocabulary; `value` is in raw units before normalization and
/// z-units after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationTriplet {
    pub time: f64,
    pub feature: usize,
    pub value: f64,
}

/// One subject: a static vector, an ordered triplet list, and optional
/// held-out metadata (outcomes, planted phenotype) that the learning path
/// never reads.
#[derive(Debug, Clone, Default)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub static_vector: Vec<f64>,
    pub triplets: Vec<ObservationTriplet>,
    pub metadata: BTreeMap<String, String>,
}

/// Kind of a raw static column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

/// Raw static schema: column name -> kind. Column order comes from the
/// static CSV header, not from this map.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ColumnSchema(pub BTreeMap<String, ColumnKind>);

/// One slot of the expanded (post one-hot) static vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticSlot {
    pub name: String,
    /// Source column this slot came from.
    pub source: String,
    /// True for a one-hot category slot (summaries report counts/proportions
    /// instead of mean +- SD).
    pub one_hot: bool,
}

/// Per-feature normalization statistics fitted on one cohort and reusable on
/// another.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Time-series feature -> (mean, std), population convention.
    pub time_series: BTreeMap<String, (f64, f64)>,
    /// Numeric static column -> (mean, std), population convention.
    pub static_numeric: BTreeMap<String, (f64, f64)>,
}

/// Raw static rows as parsed, before one-hot expansion and imputation.
/// Rows are parallel to `CohortDataset::episodes`; `None` is a missing cell.
#[derive(Debug, Clone, Default)]
pub struct RawStaticTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

/// A cohort: episodes plus the vocabulary and schema that give indices and
/// static slots their meaning.
#[derive(Debug, Clone, Default)]
pub struct CohortDataset {
    pub episodes: Vec<EpisodeRecord>,
    /// Ordered feature names; defines |F| and the triplet index mapping.
    pub feature_vocab: Vec<String>,
    /// Expanded static slots (empty until preprocessing).
    pub static_schema: Vec<StaticSlot>,
    /// Fitted normalization statistics (None until preprocessing).
    pub normalization_stats: Option<NormalizationStats>,
    /// Raw static rows (consumed by preprocessing).
    pub raw_static: Option<RawStaticTable>,
}

impl CohortDataset {
    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_vocab.len()
    }

    pub fn static_dim(&self) -> usize {
        self.static_schema.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_vocab.iter().position(|f| f == name)
    }

    /// A copy with metadata removed, handed to the learning loop so that
    /// pseudo-labeling can never read planted truth or outcomes.
    pub fn metadata_stripped(&self) -> CohortDataset {
        let mut out = self.clone();
        for e in &mut out.episodes {
            e.metadata.clear();
        }
        out
    }

    /// Total triplet count across episodes.
    pub fn n_triplets(&self) -> usize {
        self.episodes.iter().map(|e| e.triplets.len()).sum()
    }
}

/// Per-feature allowed value range in raw units; closed interval.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClinicalRangeTable(pub BTreeMap<String, (f64, f64)>);

impl ClinicalRangeTable {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in &self.0 {
            if !(lo < hi) {
                return Err(SlacError::Schema(format!(
                    "range for {name} must have min < max (got [{lo}, {hi}])"
                )));
            }
        }
        Ok(())
    }
}

/// Hours covered by one standardized episode.
pub const HORIZON_HOURS: usize = 120;
