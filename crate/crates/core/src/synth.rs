//! Synthetic cohorts with planted phenotype structure, so downstream tests
//! always have ground truth. Emits the same raw formats as real ingestion,
//! exercising the actual parsers.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    ClinicalRangeTable, CohortDataset, ColumnKind, ColumnSchema, EpisodeRecord,
    ObservationTriplet, RawStaticTable, HORIZON_HOURS,
};
use crate::error::{Result, SlacError};
use crate::util::{mix_seed, rng_for};

/// AR(1) coefficient of the per-feature trajectory noise.
const AR_PHI: f64 = 0.7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_episodes: usize,
    pub n_phenotypes: usize,
    /// One entry per phenotype, summing to 1.
    pub phenotype_proportions: Vec<f64>,
    pub n_ts_features: usize,
    pub n_static_features: usize,
    /// Probability of dropping each (feature, hour) cell, i.i.d.
    pub missingness_rate: f64,
    /// Scale of inter-phenotype mean offsets; 0 removes all signal.
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(SlacError::InvalidConfig("n_episodes must be > 0".into()));
        }
        if self.n_ts_features == 0 || self.n_static_features == 0 {
            return Err(SlacError::InvalidConfig(
                "need at least one time-series and one static feature".into(),
            ));
        }
        if self.n_phenotypes == 0 || self.phenotype_proportions.len() != self.n_phenotypes {
            return Err(SlacError::InvalidConfig(
                "phenotype_proportions must have one entry per phenotype".into(),
            ));
        }
        let sum: f64 = self.phenotype_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.phenotype_proportions.iter().any(|&p| p < 0.0) {
            return Err(SlacError::InvalidConfig(
                "phenotype_proportions must be nonnegative and sum to 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.missingness_rate) {
            return Err(SlacError::InvalidConfig("missingness_rate must be in [0, 1)".into()));
        }
        if self.separation < 0.0 {
            return Err(SlacError::InvalidConfig("separation must be >= 0".into()));
        }
        Ok(())
    }
}

fn pad_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(2)
}

pub fn ts_feature_names(spec: &SynthSpec) -> Vec<String> {
    let w = pad_width(spec.n_ts_features);
    (0..spec.n_ts_features)
        .map(|f| format!("ts_{f:0w$}"))
        .collect()
}

pub fn static_column_names(spec: &SynthSpec) -> Vec<String> {
    let w = pad_width(spec.n_static_features);
    (0..spec.n_static_features)
        .map(|f| format!("s_{f:0w$}"))
        .collect()
}

/// All-numeric schema for the generated static columns.
pub fn schema(spec: &SynthSpec) -> ColumnSchema {
    let mut s = ColumnSchema::default();
    for name in static_column_names(spec) {
        s.0.insert(name, ColumnKind::Numeric);
    }
    s
}

/// Wide clinical ranges that keep every plausibly generated value.
pub fn ranges(spec: &SynthSpec) -> ClinicalRangeTable {
    let bound = 10.0 + 10.0 * spec.separation;
    let mut table = ClinicalRangeTable::default();
    for name in ts_feature_names(spec) {
        table.0.insert(name, (-bound, bound));
    }
    table
}

struct PhenotypeParams {
    /// Per ts feature: (baseline, trend over the horizon).
    trajectories: Vec<(f64, f64)>,
    /// Per static feature: mean of the unit-variance Gaussian.
    static_means: Vec<f64>,
    mortality_prob: f64,
    los_log_mean: f64,
}

fn draw_phenotype_params(spec: &SynthSpec) -> Vec<PhenotypeParams> {
    let mut rng = rng_for(spec.seed, 0xC0_0AB1E);
    (0..spec.n_phenotypes)
        .map(|p| {
            let frac = if spec.n_phenotypes > 1 {
                p as f64 / (spec.n_phenotypes - 1) as f64
            } else {
                0.0
            };
            let trajectories = (0..spec.n_ts_features)
                .map(|_| {
                    let baseline: f64 = rng.sample::<f64, _>(StandardNormal) * spec.separation;
                    let trend: f64 = rng.sample::<f64, _>(StandardNormal) * spec.separation * 0.5;
                    (baseline, trend)
                })
                .collect();
            let static_means = (0..spec.n_static_features)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * spec.separation)
                .collect();
            PhenotypeParams {
                trajectories,
                static_means,
                mortality_prob: 0.05 + 0.3 * frac,
                los_log_mean: 1.2 + 0.9 * frac,
            }
        })
        .collect()
}

/// Largest-remainder apportionment of episode counts, then a seeded shuffle
/// of the phenotype assignment across episode indices.
fn assign_phenotypes(spec: &SynthSpec) -> Vec<usize> {
    let n = spec.n_episodes;
    let exact: Vec<f64> = spec
        .phenotype_proportions
        .iter()
        .map(|p| p * n as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = exact
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e - e.floor()))
        .collect();
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = counts.iter().sum();
    let mut ri = 0;
    while assigned < n {
        counts[rest[ri % rest.len()].0] += 1;
        assigned += 1;
        ri += 1;
    }
    let mut labels = Vec::with_capacity(n);
    for (p, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(p).take(c));
    }
    let order = crate::util::shuffled_indices(n, &mut rng_for(spec.seed, 0xA551_64));
    order.into_iter().map(|i| labels[i]).collect()
}

/// Generate a raw cohort: phenotype-specific linear trends plus AR(1) noise
/// sampled hourly with i.i.d. cell dropout, Gaussian statics, planted truth
/// and outcomes in metadata. Fully deterministic given the spec seed.
pub fn generate(spec: &SynthSpec) -> Result<CohortDataset> {
    spec.validate()?;
    let params = draw_phenotype_params(spec);
    let assignment = assign_phenotypes(spec);
    let vocab = ts_feature_names(spec);
    let static_cols = static_column_names(spec);
    let id_width = spec.n_episodes.saturating_sub(1).to_string().len().max(4);

    let mut episodes = Vec::with_capacity(spec.n_episodes);
    let mut static_rows = Vec::with_capacity(spec.n_episodes);
    for (i, &phenotype) in assignment.iter().enumerate() {
        let mut rng = rng_for(spec.seed, mix_seed(0xE915_0DE, i as u64));
        let p = &params[phenotype];
        let mut triplets = Vec::new();
        for (f, &(baseline, trend)) in p.trajectories.iter().enumerate() {
            let mut ar = rng.sample::<f64, _>(StandardNormal);
            for h in 0..HORIZON_HOURS {
                let time = h as f64 + 0.5;
                let value = baseline + trend * time / HORIZON_HOURS as f64 + ar;
                let keep = rng.gen::<f64>() >= spec.missingness_rate;
                if keep {
                    triplets.push(ObservationTriplet {
                        time,
                        feature: f,
                        value,
                    });
                }
                ar = AR_PHI * ar
                    + (1.0 - AR_PHI * AR_PHI).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        triplets.sort_by(|a, b| {
            a.time
                .partial_cmp(&b.time)
                .unwrap()
                .then(a.feature.cmp(&b.feature))
        });
        let static_row: Vec<Option<String>> = p
            .static_means
            .iter()
            .map(|m| Some((m + rng.sample::<f64, _>(StandardNormal)).to_string()))
            .collect();
        let mortality = rng.gen::<f64>() < p.mortality_prob;
        let los = (p.los_log_mean + 0.4 * rng.sample::<f64, _>(StandardNormal)).exp();
        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert("phenotype".to_string(), phenotype.to_string());
        metadata.insert("mortality".to_string(), u8::from(mortality).to_string());
        metadata.insert("icu_los".to_string(), los.to_string());
        episodes.push(EpisodeRecord {
            episode_id: format!("ep{i:0id_width$}"),
            static_vector: Vec::new(),
            triplets,
            metadata,
        });
        static_rows.push(static_row);
    }
    Ok(CohortDataset {
        episodes,
        feature_vocab: vocab,
        static_schema: Vec::new(),
        normalization_stats: None,
        raw_static: Some(RawStaticTable {
            columns: static_cols,
            rows: static_rows,
        }),
    })
}

/// Planted phenotype labels recovered from episode metadata.
pub fn planted_labels(cohort: &CohortDataset) -> Result<Vec<usize>> {
    cohort
        .episodes
        .iter()
        .map(|e| {
            e.metadata
                .get("phenotype")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| {
                    SlacError::Schema(format!("episode {} has no planted phenotype", e.episode_id))
                })
        })
        .collect()
}

/// Raw-feature baseline vectors: per-episode per-feature mean over observed
/// triplets (0 when a feature was never observed), concatenated with the
/// static vector when present.
pub fn feature_mean_vectors(cohort: &CohortDataset) -> Vec<Vec<f64>> {
    let nf = cohort.n_features();
    cohort
        .episodes
        .iter()
        .map(|e| {
            let mut sums = vec![0.0; nf];
            let mut counts = vec![0usize; nf];
            for t in &e.triplets {
                sums[t.feature] += t.value;
                counts[t.feature] += 1;
            }
            let mut v: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect();
            v.extend_from_slice(&e.static_vector);
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{adjusted_rand_index, kmeans};
    use crate::data::{parse, preprocess};

    fn base_spec() -> SynthSpec {
        SynthSpec {
            n_episodes: 120,
            n_phenotypes: 3,
            phenotype_proportions: vec![0.5, 0.3, 0.2],
            n_ts_features: 4,
            n_static_features: 3,
            missingness_rate: 0.3,
            separation: 3.0,
            seed: 11,
        }
    }

    #[test]
    fn proportions_and_missingness_match_spec() {
        let spec = base_spec();
        let cohort = generate(&spec).unwrap();
        let labels = planted_labels(&cohort).unwrap();
        let n = spec.n_episodes as f64;
        for p in 0..3 {
            let frac = labels.iter().filter(|&&l| l == p).count() as f64 / n;
            assert!(
                (frac - spec.phenotype_proportions[p]).abs() <= 3.0 / n.sqrt(),
                "phenotype {p}: {frac}"
            );
        }
        let total_cells = (spec.n_episodes * spec.n_ts_features * HORIZON_HOURS) as f64;
        let observed: usize = cohort.episodes.iter().map(|e| e.triplets.len()).sum();
        let empirical_missing = 1.0 - observed as f64 / total_cells;
        assert!((empirical_missing - spec.missingness_rate).abs() < 0.02);
    }

    #[test]
    fn zero_missingness_gives_full_grids() {
        let spec = SynthSpec {
            n_episodes: 5,
            missingness_rate: 0.0,
            ..base_spec()
        };
        let cohort = generate(&spec).unwrap();
        for e in &cohort.episodes {
            assert_eq!(e.triplets.len(), spec.n_ts_features * HORIZON_HOURS);
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = base_spec();
        let serialize = |c: &CohortDataset| {
            let mut t = Vec::new();
            let mut s = Vec::new();
            parse::write_triplets(c, &mut t).unwrap();
            parse::write_static_raw(c, &mut s).unwrap();
            (t, s)
        };
        let a = serialize(&generate(&spec).unwrap());
        let b = serialize(&generate(&spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_separation_removes_signal() {
        let spec = SynthSpec {
            separation: 0.0,
            n_episodes: 150,
            ..base_spec()
        };
        let cohort = generate(&spec).unwrap();
        let (processed, _) = preprocess::preprocess_cohort(
            &cohort,
            &schema(&spec),
            &ranges(&spec),
            preprocess::PreprocessOptions::default(),
        )
        .unwrap();
        let points = feature_mean_vectors(&processed);
        let model = kmeans(&points, 3, 10, 5).unwrap();
        let ari = adjusted_rand_index(&model.labels, &planted_labels(&processed).unwrap());
        assert!(ari.abs() < 0.2, "ari {ari} should be near 0");
    }

    #[test]
    fn separated_cohort_recoverable_by_raw_kmeans() {
        let spec = SynthSpec {
            n_episodes: 150,
            missingness_rate: 0.5,
            ..base_spec()
        };
        let cohort = generate(&spec).unwrap();
        let (processed, _) = preprocess::preprocess_cohort(
            &cohort,
            &schema(&spec),
            &ranges(&spec),
            preprocess::PreprocessOptions::default(),
        )
        .unwrap();
        let points = feature_mean_vectors(&processed);
        let model = kmeans(&points, 3, 10, 5).unwrap();
        let ari = adjusted_rand_index(&model.labels, &planted_labels(&processed).unwrap());
        assert!(ari >= 0.9, "ari {ari}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = base_spec();
        spec.n_episodes = 0;
        assert!(generate(&spec).is_err());
        let mut spec = base_spec();
        spec.n_ts_features = 0;
        assert!(generate(&spec).is_err());
        let mut spec = base_spec();
        spec.phenotype_proportions = vec![0.5, 0.4];
        assert!(generate(&spec).is_err());
        let mut spec = base_spec();
        spec.missingness_rate = 1.0;
        assert!(generate(&spec).is_err());
    }
}
