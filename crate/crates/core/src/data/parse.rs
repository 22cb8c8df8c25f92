//! File formats: triplet/static/metadata CSV grammars and schema/range JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use super::{
    ClinicalRangeTable, CohortDataset, ColumnSchema, EpisodeRecord, NormalizationStats,
    ObservationTriplet, RawStaticTable, StaticSlot,
};
use crate::error::{Result, SlacError};

fn parse_err(line: u64, msg: impl Into<String>) -> SlacError {
    SlacError::Parse {
        line,
        msg: msg.into(),
    }
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_finite(s: &str, what: &str, line: u64) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{what} is not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what} is not finite: {s:?}")));
    }
    Ok(v)
}

/// Parse the triplet and static CSV streams into a raw cohort.
///
/// Episodes are the union of ids seen in either file, ordered by id. The
/// feature vocabulary is the sorted union of observed feature names.
pub fn parse_cohort<R1: Read, R2: Read>(
    triplet_file: R1,
    static_file: R2,
) -> Result<CohortDataset> {
    // triplets: buffer (id, time, feature name, value) then intern features
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(triplet_file);
    {
        let headers = rdr.headers()?;
        let expected = ["episode_id", "time_hours", "feature", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(parse_err(
                1,
                format!("triplet header must be {:?}, got {:?}", expected.join(","), headers),
            ));
        }
    }
    let mut raw_triplets: Vec<(String, f64, String, f64)> = Vec::new();
    let mut feature_names: BTreeSet<String> = BTreeSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record_line(&record);
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", record.len())));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty episode_id"));
        }
        let time = parse_finite(&record[1], "time_hours", line)?;
        if time < 0.0 {
            return Err(parse_err(line, format!("time_hours must be >= 0, got {time}")));
        }
        let feature = record[2].trim().to_string();
        if feature.is_empty() {
            return Err(parse_err(line, "empty feature name"));
        }
        let value = parse_finite(&record[3], "value", line)?;
        feature_names.insert(feature.clone());
        raw_triplets.push((id, time, feature, value));
    }

    // static rows
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(static_file);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if headers.first().map(String::as_str) != Some("episode_id") {
        return Err(parse_err(1, "static header must start with episode_id"));
    }
    let columns: Vec<String> = headers[1..].to_vec();
    let mut static_rows: BTreeMap<String, Vec<Option<String>>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record_line(&record);
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty episode_id"));
        }
        if static_rows.contains_key(&id) {
            return Err(parse_err(line, format!("duplicate static row for episode {id}")));
        }
        let row: Vec<Option<String>> = record
            .iter()
            .skip(1)
            .map(|cell| {
                let cell = cell.trim();
                if cell.is_empty() {
                    None
                } else {
                    Some(cell.to_string())
                }
            })
            .collect();
        static_rows.insert(id, row);
    }

    let feature_vocab: Vec<String> = feature_names.into_iter().collect();
    let feature_index: BTreeMap<&str, usize> = feature_vocab
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    // episode universe: union of both files, ordered by id
    let mut ids: BTreeSet<String> = static_rows.keys().cloned().collect();
    for (id, _, _, _) in &raw_triplets {
        ids.insert(id.clone());
    }

    let id_index: BTreeMap<&str, usize> =
        ids.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut episodes: Vec<EpisodeRecord> = ids
        .iter()
        .map(|id| EpisodeRecord {
            episode_id: id.clone(),
            ..EpisodeRecord::default()
        })
        .collect();
    for (id, time, feature, value) in raw_triplets {
        let e = &mut episodes[id_index[id.as_str()]];
        e.triplets.push(ObservationTriplet {
            time,
            feature: feature_index[feature.as_str()],
            value,
        });
    }
    let rows: Vec<Vec<Option<String>>> = ids
        .iter()
        .map(|id| {
            static_rows
                .get(id)
                .cloned()
                .unwrap_or_else(|| vec![None; columns.len()])
        })
        .collect();

    Ok(CohortDataset {
        episodes,
        feature_vocab,
        static_schema: Vec::new(),
        normalization_stats: None,
        raw_static: Some(RawStaticTable { columns, rows }),
    })
}

/// Write the triplet CSV for a cohort. f64 values use the shortest
/// round-trip decimal form, so parse(serialize(x)) is bit-exact.
pub fn write_triplets<W: Write>(cohort: &CohortDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode_id", "time_hours", "feature", "value"])?;
    for e in &cohort.episodes {
        for t in &e.triplets {
            w.write_record([
                e.episode_id.as_str(),
                &t.time.to_string(),
                &cohort.feature_vocab[t.feature],
                &t.value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write the raw static CSV (pre one-hot), empty cell = missing.
pub fn write_static_raw<W: Write>(cohort: &CohortDataset, out: W) -> Result<()> {
    let raw = cohort
        .raw_static
        .as_ref()
        .ok_or_else(|| SlacError::Schema("cohort has no raw static table".into()))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode_id".to_string()];
    header.extend(raw.columns.iter().cloned());
    w.write_record(&header)?;
    for (e, row) in cohort.episodes.iter().zip(&raw.rows) {
        let mut rec = vec![e.episode_id.clone()];
        rec.extend(row.iter().map(|c| c.clone().unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write the processed (numeric) static matrix with expanded slot names.
pub fn write_static_numeric<W: Write>(cohort: &CohortDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode_id".to_string()];
    header.extend(cohort.static_schema.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    for e in &cohort.episodes {
        let mut rec = vec![e.episode_id.clone()];
        rec.extend(e.static_vector.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Metadata CSV: long format `episode_id,key,value`.
pub fn write_metadata<W: Write>(cohort: &CohortDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode_id", "key", "value"])?;
    for e in &cohort.episodes {
        for (k, v) in &e.metadata {
            w.write_record([e.episode_id.as_str(), k, v])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_metadata<R: Read>(input: R) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record_line(&record);
        if record.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, got {}", record.len())));
        }
        out.entry(record[0].to_string())
            .or_default()
            .insert(record[1].to_string(), record[2].to_string());
    }
    Ok(out)
}

/// Attach loaded metadata to matching episodes.
pub fn attach_metadata(cohort: &mut CohortDataset, meta: &BTreeMap<String, BTreeMap<String, String>>) {
    for e in &mut cohort.episodes {
        if let Some(kv) = meta.get(&e.episode_id) {
            e.metadata = kv.clone();
        }
    }
}

pub fn read_schema<R: Read>(input: R) -> Result<ColumnSchema> {
    let mut s = String::new();
    let mut input = input;
    input.read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

pub fn read_ranges<R: Read>(input: R) -> Result<ClinicalRangeTable> {
    let mut s = String::new();
    let mut input = input;
    input.read_to_string(&mut s)?;
    let table: ClinicalRangeTable = serde_json::from_str(&s)?;
    table.validate()?;
    Ok(table)
}

/// Serialized companion of a processed cohort: vocabulary, expanded schema,
/// and fitted normalization statistics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProcessedMeta {
    pub feature_vocab: Vec<String>,
    pub static_schema: Vec<StaticSlot>,
    pub normalization_stats: NormalizationStats,
}

/// Reload a processed cohort from triplets + numeric static CSVs and the
/// companion metadata, restoring the fitted vocabulary order (a feature
/// with no surviving observations must keep its index).
pub fn load_processed_cohort<R1: Read, R2: Read>(
    triplet_file: R1,
    static_file: R2,
    meta: &ProcessedMeta,
) -> Result<CohortDataset> {
    let mut cohort = parse_cohort(triplet_file, static_file)?;
    // remap feature indices onto the fitted vocabulary
    let target: BTreeMap<&str, usize> = meta
        .feature_vocab
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let observed = cohort.feature_vocab.clone();
    for name in &observed {
        if !target.contains_key(name.as_str()) {
            return Err(SlacError::CohortMismatch(format!(
                "feature {name} not present in the fitted vocabulary"
            )));
        }
    }
    for e in &mut cohort.episodes {
        for t in &mut e.triplets {
            t.feature = target[observed[t.feature].as_str()];
        }
    }
    cohort.feature_vocab = meta.feature_vocab.clone();
    cohort.static_schema = meta.static_schema.clone();
    cohort.normalization_stats = Some(meta.normalization_stats.clone());
    // the static matrix is already numeric: convert raw cells
    let raw = cohort.raw_static.take().ok_or_else(|| {
        SlacError::Schema("processed static table missing".into())
    })?;
    if raw.columns.len() != meta.static_schema.len()
        || raw
            .columns
            .iter()
            .zip(&meta.static_schema)
            .any(|(c, s)| c != &s.name)
    {
        return Err(SlacError::CohortMismatch(
            "static columns do not match the processed schema".into(),
        ));
    }
    for (i, e) in cohort.episodes.iter_mut().enumerate() {
        let row = &raw.rows[i];
        let mut vec = Vec::with_capacity(row.len());
        for (j, cell) in row.iter().enumerate() {
            let cell = cell.as_ref().ok_or_else(|| {
                SlacError::CohortMismatch(format!(
                    "episode {} has a missing processed static cell in column {}",
                    e.episode_id, raw.columns[j]
                ))
            })?;
            let v: f64 = cell.parse().map_err(|_| {
                SlacError::CohortMismatch(format!(
                    "episode {} column {} is not numeric: {cell:?}",
                    e.episode_id, raw.columns[j]
                ))
            })?;
            vec.push(v);
        }
        e.static_vector = vec;
    }
    Ok(cohort)
}
