//! Preprocessing: outlier clipping, hourly binning, z-scoring, one-hot
//! expansion, and iterative static imputation.
//!
//! Fixed order: clip (raw units) -> shift episode start to 0 -> hourly bins
//! -> z-score. Time-series values are never imputed; only the static matrix
//! is completed.

use std::collections::BTreeMap;

use log::info;

use super::{
    ClinicalRangeTable, CohortDataset, ColumnKind, ColumnSchema, EpisodeRecord,
    NormalizationStats, ObservationTriplet, RawStaticTable, StaticSlot, HORIZON_HOURS,
};
use crate::error::{Result, SlacError};

/// Sweep count for the round-robin least-squares imputation.
pub const IMPUTE_SWEEPS: usize = 10;

#[derive(Debug, Clone, Default)]
pub struct PreprocessReport {
    pub clipped_per_feature: BTreeMap<String, usize>,
    pub dropped_beyond_horizon: usize,
    pub dropped_empty_episodes: usize,
    pub imputed_static_cells: usize,
}

/// Remove (never clamp) triplets whose value falls outside the closed
/// interval [min, max] for their feature.
pub fn clip_outliers(
    cohort: &CohortDataset,
    ranges: &ClinicalRangeTable,
) -> Result<(CohortDataset, BTreeMap<String, usize>)> {
    ranges.validate()?;
    let missing: Vec<&String> = cohort
        .feature_vocab
        .iter()
        .filter(|f| !ranges.0.contains_key(*f))
        .collect();
    if !missing.is_empty() {
        return Err(SlacError::MissingRange(
            missing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    let bounds: Vec<(f64, f64)> = cohort
        .feature_vocab
        .iter()
        .map(|f| ranges.0[f])
        .collect();
    let mut out = cohort.clone();
    let mut removed: BTreeMap<String, usize> = BTreeMap::new();
    for e in &mut out.episodes {
        e.triplets.retain(|t| {
            let (lo, hi) = bounds[t.feature];
            let keep = t.value >= lo && t.value <= hi;
            if !keep {
                *removed
                    .entry(cohort.feature_vocab[t.feature].clone())
                    .or_insert(0) += 1;
            }
            keep
        });
    }
    Ok((out, removed))
}

/// Shift the episode's time origin so the earliest observation sits at 0.
pub fn shift_time_origin(episode: &EpisodeRecord) -> EpisodeRecord {
    let mut out = episode.clone();
    if let Some(min) = out
        .triplets
        .iter()
        .map(|t| t.time)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
    {
        if min != 0.0 {
            for t in &mut out.triplets {
                t.time -= min;
            }
        }
    }
    out
}

/// Average observations per (feature, hour) bin. Each nonempty bin emits one
/// triplet at the bin midpoint k + 0.5; empty bins emit nothing; observations
/// at or beyond the 120 h horizon are dropped. Returns the dropped count.
pub fn bin_hourly(episode: &EpisodeRecord) -> (EpisodeRecord, usize) {
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    let mut dropped = 0usize;
    for t in &episode.triplets {
        debug_assert!(t.time >= 0.0);
        let hour = t.time.floor() as usize;
        if hour >= HORIZON_HOURS {
            dropped += 1;
            continue;
        }
        let slot = sums.entry((hour, t.feature)).or_insert((0.0, 0));
        slot.0 += t.value;
        slot.1 += 1;
    }
    let mut out = episode.clone();
    out.triplets = sums
        .into_iter()
        .map(|((hour, feature), (sum, count))| ObservationTriplet {
            time: hour as f64 + 0.5,
            feature,
            value: sum / count as f64,
        })
        .collect();
    (out, dropped)
}

fn population_stats(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let values: Vec<f64> = values.collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Fit per-feature (mean, std) over every time-series observation in the
/// cohort, population (1/n) convention. Features with no observations get no
/// entry.
pub fn fit_zscore(cohort: &CohortDataset) -> NormalizationStats {
    let mut stats = NormalizationStats::default();
    for (fi, name) in cohort.feature_vocab.iter().enumerate() {
        let values = cohort
            .episodes
            .iter()
            .flat_map(|e| e.triplets.iter())
            .filter(|t| t.feature == fi)
            .map(|t| t.value);
        if let Some(ms) = population_stats(values) {
            stats.time_series.insert(name.clone(), ms);
        }
    }
    stats
}

/// Replace every time-series value with (v - mean) / std using `stats`.
/// Features with std < 1e-12 map to 0. A feature observed here but absent
/// from the stats is an error (it had no observations in the fitting cohort).
pub fn apply_zscore(cohort: &CohortDataset, stats: &NormalizationStats) -> Result<CohortDataset> {
    let mut per_index: Vec<Option<(f64, f64)>> = vec![None; cohort.n_features()];
    for (fi, name) in cohort.feature_vocab.iter().enumerate() {
        per_index[fi] = stats.time_series.get(name).copied();
    }
    let mut out = cohort.clone();
    for e in &mut out.episodes {
        for t in &mut e.triplets {
            let (mean, std) = per_index[t.feature].ok_or_else(|| {
                SlacError::UnfittedFeature(cohort.feature_vocab[t.feature].clone())
            })?;
            t.value = if std < 1e-12 { 0.0 } else { (t.value - mean) / std };
        }
    }
    out.normalization_stats = Some(stats.clone());
    Ok(out)
}

/// Invert a z-transform: v * std + mean.
pub fn inverse_zscore_value(z: f64, mean: f64, std: f64) -> f64 {
    z * std + mean
}

/// Expand raw static rows into a numeric matrix.
///
/// Numeric columns pass through (missing -> NaN marker for later
/// imputation). A categorical column with c declared categories becomes c
/// binary slots; missing encodes as all zeros.
pub fn one_hot_static(
    raw: &RawStaticTable,
    schema: &ColumnSchema,
) -> Result<(Vec<Vec<f64>>, Vec<StaticSlot>)> {
    let mut slots: Vec<StaticSlot> = Vec::new();
    let mut kinds: Vec<&ColumnKind> = Vec::new();
    for col in &raw.columns {
        let kind = schema
            .0
            .get(col)
            .ok_or_else(|| SlacError::Schema(format!("column {col} not declared in schema")))?;
        kinds.push(kind);
        match kind {
            ColumnKind::Numeric => slots.push(StaticSlot {
                name: col.clone(),
                source: col.clone(),
                one_hot: false,
            }),
            ColumnKind::Categorical { categories } => {
                if categories.is_empty() {
                    return Err(SlacError::Schema(format!(
                        "categorical column {col} declares no categories"
                    )));
                }
                for cat in categories {
                    slots.push(StaticSlot {
                        name: format!("{col}={cat}"),
                        source: col.clone(),
                        one_hot: true,
                    });
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(raw.rows.len());
    for (ri, row) in raw.rows.iter().enumerate() {
        if row.len() != raw.columns.len() {
            return Err(SlacError::Schema(format!(
                "static row {ri} has {} cells, expected {}",
                row.len(),
                raw.columns.len()
            )));
        }
        let mut vec: Vec<f64> = Vec::with_capacity(slots.len());
        for (ci, cell) in row.iter().enumerate() {
            match kinds[ci] {
                ColumnKind::Numeric => match cell {
                    None => vec.push(f64::NAN),
                    Some(s) => {
                        let v: f64 = s.parse().map_err(|_| {
                            SlacError::Schema(format!(
                                "numeric column {} has non-numeric value {s:?}",
                                raw.columns[ci]
                            ))
                        })?;
                        if !v.is_finite() {
                            return Err(SlacError::Schema(format!(
                                "numeric column {} has non-finite value {s:?}",
                                raw.columns[ci]
                            )));
                        }
                        vec.push(v);
                    }
                },
                ColumnKind::Categorical { categories } => match cell {
                    None => vec.extend(std::iter::repeat(0.0).take(categories.len())),
                    Some(s) => {
                        let pos = categories.iter().position(|c| c == s).ok_or_else(|| {
                            SlacError::Schema(format!(
                                "value {s:?} not among declared categories of column {}",
                                raw.columns[ci]
                            ))
                        })?;
                        for k in 0..categories.len() {
                            vec.push(if k == pos { 1.0 } else { 0.0 });
                        }
                    }
                },
            }
        }
        rows.push(vec);
    }
    Ok((rows, slots))
}

/// Fit population (mean, std) per numeric slot over observed (non-NaN)
/// entries, keyed by source column name.
pub fn fit_static_stats(
    rows: &[Vec<f64>],
    slots: &[StaticSlot],
) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut out = BTreeMap::new();
    for (j, slot) in slots.iter().enumerate() {
        if slot.one_hot {
            continue;
        }
        let observed = rows.iter().map(|r| r[j]).filter(|v| !v.is_nan());
        match population_stats(observed) {
            Some(ms) => {
                out.insert(slot.source.clone(), ms);
            }
            None => return Err(SlacError::EmptyStaticColumn(slot.source.clone())),
        }
    }
    Ok(out)
}

/// Z-score observed numeric slots in place using the given per-column stats.
pub fn apply_static_stats(
    rows: &mut [Vec<f64>],
    slots: &[StaticSlot],
    stats: &BTreeMap<String, (f64, f64)>,
) -> Result<()> {
    for (j, slot) in slots.iter().enumerate() {
        if slot.one_hot {
            continue;
        }
        let (mean, std) = *stats
            .get(&slot.source)
            .ok_or_else(|| SlacError::UnfittedFeature(slot.source.clone()))?;
        for row in rows.iter_mut() {
            let v = row[j];
            if !v.is_nan() {
                row[j] = if std < 1e-12 { 0.0 } else { (v - mean) / std };
            }
        }
    }
    Ok(())
}

/// Solve (X^T X + lambda J) beta = X^T y with J zeroing the intercept
/// penalty, by Gaussian elimination with partial pivoting.
fn ridge_solve(xtx: &mut [Vec<f64>], xty: &mut [f64]) -> Vec<f64> {
    let n = xty.len();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if xtx[r][col].abs() > xtx[pivot][col].abs() {
                pivot = r;
            }
        }
        xtx.swap(col, pivot);
        xty.swap(col, pivot);
        let p = xtx[col][col];
        if p.abs() < 1e-300 {
            continue;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = xtx[r][col] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                xtx[r][c] -= f * xtx[col][c];
            }
            xty[r] -= f * xty[col];
        }
    }
    (0..n)
        .map(|i| {
            let p = xtx[i][i];
            if p.abs() < 1e-300 {
                0.0
            } else {
                xty[i] / p
            }
        })
        .collect()
}

/// Fill NaN markers by round-robin least squares: initialize with column
/// means, then for `IMPUTE_SWEEPS` sweeps regress each incomplete column on
/// all others (plus intercept, with a tiny ridge on the slopes) and
/// overwrite its missing entries. Returns the number of imputed cells.
pub fn iterative_impute_static(rows: &mut [Vec<f64>]) -> Result<usize> {
    if rows.is_empty() {
        return Ok(0);
    }
    let p = rows[0].len();
    let n = rows.len();
    let mut missing: Vec<Vec<usize>> = vec![Vec::new(); p]; // per column: missing row ids
    for (ri, row) in rows.iter().enumerate() {
        for (ci, v) in row.iter().enumerate() {
            if v.is_nan() {
                missing[ci].push(ri);
            }
        }
    }
    let imputed_cells: usize = missing.iter().map(Vec::len).sum();
    if imputed_cells == 0 {
        return Ok(0);
    }
    // column means over observed entries
    for ci in 0..p {
        if missing[ci].len() == n {
            return Err(SlacError::EmptyStaticColumn(format!("index {ci}")));
        }
        if missing[ci].is_empty() {
            continue;
        }
        let (mut sum, mut cnt) = (0.0, 0usize);
        for row in rows.iter() {
            if !row[ci].is_nan() {
                sum += row[ci];
                cnt += 1;
            }
        }
        let mean = sum / cnt as f64;
        for &ri in &missing[ci] {
            rows[ri][ci] = mean;
        }
    }
    let lambda = 1e-9;
    for _ in 0..IMPUTE_SWEEPS {
        for ci in 0..p {
            if missing[ci].is_empty() {
                continue;
            }
            // design: intercept + all other columns, fit on rows where ci observed
            let observed_rows: Vec<usize> =
                (0..n).filter(|ri| !missing[ci].contains(ri)).collect();
            let k = p; // intercept + (p - 1) predictors
            let mut xtx = vec![vec![0.0; k]; k];
            let mut xty = vec![0.0; k];
            let mut x_row = vec![0.0; k];
            for &ri in &observed_rows {
                x_row[0] = 1.0;
                let mut idx = 1;
                for cj in 0..p {
                    if cj != ci {
                        x_row[idx] = rows[ri][cj];
                        idx += 1;
                    }
                }
                for a in 0..k {
                    for b in 0..k {
                        xtx[a][b] += x_row[a] * x_row[b];
                    }
                    xty[a] += x_row[a] * rows[ri][ci];
                }
            }
            for a in 1..k {
                xtx[a][a] += lambda;
            }
            let beta = ridge_solve(&mut xtx, &mut xty);
            for &ri in &missing[ci].clone() {
                let mut pred = beta[0];
                let mut idx = 1;
                for cj in 0..p {
                    if cj != ci {
                        pred += beta[idx] * rows[ri][cj];
                        idx += 1;
                    }
                }
                rows[ri][ci] = pred;
            }
        }
    }
    Ok(imputed_cells)
}

/// Options for the full preprocessing pipeline.
#[derive(Debug, Clone, Copy, Default)]
pub struct PreprocessOptions<'a> {
    /// Apply these fitted stats instead of fitting on this cohort (for
    /// cross-cohort application).
    pub stats: Option<&'a NormalizationStats>,
    /// Align to this vocabulary instead of the cohort's own sorted union.
    pub vocab: Option<&'a [String]>,
}

/// The full pipeline: clip -> shift origin -> bin hourly -> z-score, plus
/// one-hot/z-score/impute on statics. Episodes left with no triplets are
/// excluded (missingness in the series stays; only fully empty subjects
/// cannot be encoded).
pub fn preprocess_cohort(
    cohort: &CohortDataset,
    schema: &ColumnSchema,
    ranges: &ClinicalRangeTable,
    opts: PreprocessOptions<'_>,
) -> Result<(CohortDataset, PreprocessReport)> {
    let mut report = PreprocessReport::default();
    let (mut work, clipped) = clip_outliers(cohort, ranges)?;
    report.clipped_per_feature = clipped;

    for e in &mut work.episodes {
        let shifted = shift_time_origin(e);
        let (binned, dropped) = bin_hourly(&shifted);
        report.dropped_beyond_horizon += dropped;
        *e = binned;
    }

    // vocabulary alignment (optional)
    if let Some(vocab) = opts.vocab {
        let target: BTreeMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        for name in &work.feature_vocab {
            if !target.contains_key(name.as_str()) {
                return Err(SlacError::CohortMismatch(format!(
                    "feature {name} absent from the reference vocabulary"
                )));
            }
        }
        let old = work.feature_vocab.clone();
        for e in &mut work.episodes {
            for t in &mut e.triplets {
                t.feature = target[old[t.feature].as_str()];
            }
        }
        work.feature_vocab = vocab.to_vec();
    }

    let mut stats = match opts.stats {
        Some(s) => s.clone(),
        None => fit_zscore(&work),
    };
    work = apply_zscore(&work, &stats)?;

    // statics
    let raw = work
        .raw_static
        .take()
        .ok_or_else(|| SlacError::Schema("cohort has no raw static table to preprocess".into()))?;
    let (mut rows, slots) = one_hot_static(&raw, schema)?;
    let static_stats = match opts.stats {
        Some(s) => s.static_numeric.clone(),
        None => fit_static_stats(&rows, &slots)?,
    };
    apply_static_stats(&mut rows, &slots, &static_stats)?;
    report.imputed_static_cells = iterative_impute_static(&mut rows)?;
    stats.static_numeric = static_stats;

    for (e, row) in work.episodes.iter_mut().zip(rows) {
        e.static_vector = row;
    }
    work.static_schema = slots;
    work.normalization_stats = Some(stats);

    // exclude episodes that ended up with no observations at all
    let before = work.episodes.len();
    work.episodes.retain(|e| !e.triplets.is_empty());
    report.dropped_empty_episodes = before - work.episodes.len();
    if report.dropped_empty_episodes > 0 {
        info!(
            "excluded {} episode(s) with empty triplet sets",
            report.dropped_empty_episodes
        );
    }
    Ok((work, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn episode(triplets: &[(f64, usize, f64)]) -> EpisodeRecord {
        EpisodeRecord {
            episode_id: "e".into(),
            static_vector: vec![],
            triplets: triplets
                .iter()
                .map(|&(time, feature, value)| ObservationTriplet { time, feature, value })
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    fn tiny_cohort(triplets: &[(f64, usize, f64)]) -> CohortDataset {
        CohortDataset {
            episodes: vec![episode(triplets)],
            feature_vocab: vec!["x".into(), "y".into()],
            ..CohortDataset::default()
        }
    }

    #[test]
    fn clip_drops_out_of_range_keeps_boundary() {
        let cohort = tiny_cohort(&[(0.1, 0, 10_000.0), (0.2, 0, 500.0), (0.3, 0, 250.0)]);
        let mut ranges = ClinicalRangeTable::default();
        ranges.0.insert("x".into(), (0.0, 500.0));
        ranges.0.insert("y".into(), (0.0, 1.0));
        let (clipped, removed) = clip_outliers(&cohort, &ranges).unwrap();
        let values: Vec<f64> = clipped.episodes[0].triplets.iter().map(|t| t.value).collect();
        assert_eq!(values, vec![500.0, 250.0]); // boundary retained, 10k dropped
        assert_eq!(removed["x"], 1);

        // no out-of-range values -> identical cohort
        let (again, removed2) = clip_outliers(&clipped, &ranges).unwrap();
        assert!(removed2.is_empty());
        assert_eq!(again.episodes[0].triplets, clipped.episodes[0].triplets);
    }

    #[test]
    fn clip_requires_ranges_for_observed_features() {
        let cohort = tiny_cohort(&[(0.1, 1, 1.0)]);
        let mut ranges = ClinicalRangeTable::default();
        ranges.0.insert("x".into(), (0.0, 1.0));
        let err = clip_outliers(&cohort, &ranges).unwrap_err();
        assert!(err.to_string().contains("y"));
    }

    #[test]
    fn bin_hourly_means_and_horizon() {
        let e = episode(&[(0.2, 0, 10.0), (0.8, 0, 20.0), (121.5, 0, 7.0), (7.3, 1, 4.0)]);
        let (binned, dropped) = bin_hourly(&e);
        assert_eq!(dropped, 1);
        assert_eq!(binned.triplets.len(), 2);
        let first = binned.triplets[0];
        assert_eq!(first.time, 0.5);
        assert_eq!(first.feature, 0);
        assert_abs_diff_eq!(first.value, 15.0);
        // feature observed only in hour 7 -> exactly one output triplet
        let second = binned.triplets[1];
        assert_eq!(second.time, 7.5);
        assert_eq!(second.feature, 1);
    }

    #[test]
    fn bin_hourly_is_idempotent() {
        let e = episode(&[(0.2, 0, 10.0), (0.8, 0, 20.0), (5.9, 1, 3.0)]);
        let (once, _) = bin_hourly(&e);
        let (twice, dropped) = bin_hourly(&once);
        assert_eq!(dropped, 0);
        assert_eq!(once.triplets, twice.triplets);
    }

    #[test]
    fn zscore_population_convention() {
        let cohort = tiny_cohort(&[(0.5, 0, 1.0), (1.5, 0, 2.0), (2.5, 0, 3.0)]);
        let stats = fit_zscore(&cohort);
        let (mean, std) = stats.time_series["x"];
        assert_abs_diff_eq!(mean, 2.0);
        assert_abs_diff_eq!(std, (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        let z = apply_zscore(&cohort, &stats).unwrap();
        assert_abs_diff_eq!(z.episodes[0].triplets[1].value, 0.0);
        // inverse transform recovers raw values
        for (orig, zt) in cohort.episodes[0]
            .triplets
            .iter()
            .zip(&z.episodes[0].triplets)
        {
            assert_abs_diff_eq!(
                inverse_zscore_value(zt.value, mean, std),
                orig.value,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let cohort = tiny_cohort(&[(0.5, 0, 5.0), (1.5, 0, 5.0), (2.5, 0, 5.0)]);
        let stats = fit_zscore(&cohort);
        let z = apply_zscore(&cohort, &stats).unwrap();
        assert!(z.episodes[0].triplets.iter().all(|t| t.value == 0.0));
    }

    #[test]
    fn apply_with_foreign_stats_shifts_by_their_means() {
        let a = tiny_cohort(&[(0.5, 0, 10.0), (1.5, 0, 14.0)]);
        let stats = fit_zscore(&a); // mean 12, std 2
        let b = tiny_cohort(&[(0.5, 0, 12.0)]);
        let zb = apply_zscore(&b, &stats).unwrap();
        assert_abs_diff_eq!(zb.episodes[0].triplets[0].value, 0.0);
        // feature unseen in fitting cohort -> error
        let c = tiny_cohort(&[(0.5, 1, 1.0)]);
        assert!(apply_zscore(&c, &stats).is_err());
    }

    #[test]
    fn one_hot_rules() {
        let raw = RawStaticTable {
            columns: vec!["age".into(), "sex".into()],
            rows: vec![
                vec![Some("40".into()), Some("female".into())],
                vec![None, None],
                vec![Some("61".into()), Some("male".into())],
            ],
        };
        let mut schema = ColumnSchema::default();
        schema.0.insert("age".into(), ColumnKind::Numeric);
        schema.0.insert(
            "sex".into(),
            ColumnKind::Categorical {
                categories: vec!["male".into(), "female".into()],
            },
        );
        let (rows, slots) = one_hot_static(&raw, &schema).unwrap();
        assert_eq!(slots.len(), 3);
        assert_eq!(rows[0][1..], [0.0, 1.0]); // female -> (0, 1)
        assert_eq!(rows[1][1..], [0.0, 0.0]); // missing -> all zeros
        assert!(rows[1][0].is_nan()); // missing numeric -> marker
        assert_eq!(rows[2][1..], [1.0, 0.0]);

        let raw_bad = RawStaticTable {
            columns: vec!["sex".into()],
            rows: vec![vec![Some("other".into())]],
        };
        assert!(one_hot_static(&raw_bad, &schema).is_err());
    }

    #[test]
    fn impute_identity_when_complete() {
        let mut rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let orig = rows.clone();
        let n = iterative_impute_static(&mut rows).unwrap();
        assert_eq!(n, 0);
        assert_eq!(rows, orig);
    }

    #[test]
    fn impute_recovers_exact_linear_relation() {
        // col2 = 2 * col1 exactly; one missing col2 entry
        let mut rows: Vec<Vec<f64>> = (1..=6)
            .map(|i| vec![i as f64, 2.0 * i as f64])
            .collect();
        rows[3][1] = f64::NAN;
        let n = iterative_impute_static(&mut rows).unwrap();
        assert_eq!(n, 1);
        assert!((rows[3][1] - 8.0).abs() < 1e-6, "imputed {}", rows[3][1]);
    }

    #[test]
    fn impute_constant_column_fills_constant() {
        let mut rows = vec![vec![7.0, 1.0], vec![7.0, 2.0], vec![f64::NAN, 3.0]];
        iterative_impute_static(&mut rows).unwrap();
        assert_abs_diff_eq!(rows[2][0], 7.0, epsilon = 1e-9);
    }

    #[test]
    fn impute_rejects_fully_missing_column() {
        let mut rows = vec![vec![f64::NAN, 1.0], vec![f64::NAN, 2.0]];
        assert!(iterative_impute_static(&mut rows).is_err());
    }

    #[test]
    fn shift_origin_moves_min_to_zero() {
        let e = episode(&[(5.0, 0, 1.0), (7.5, 0, 2.0)]);
        let shifted = shift_time_origin(&e);
        assert_eq!(shifted.triplets[0].time, 0.0);
        assert_eq!(shifted.triplets[1].time, 2.5);
    }
}
