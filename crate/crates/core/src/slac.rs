//! The iterative clustering loop: alternate K-means pseudo-label extraction
//! over learned representations with joint encoder/classifier training, plus
//! the hyperparameter sweep harness.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{adjusted_rand_index, kmeans, validity_scores, ValidityScores};
use crate::data::CohortDataset;
use crate::encoder::{EncoderState, ModelConfig};
use crate::error::{Result, SlacError};
use crate::forecast::{pretrain, EarlyStopper, EpochLoss, PretrainResult};
use crate::numeric::adam::{AdamHyper, AdamState};
use crate::numeric::tape::Tape;
use crate::util::{mix_seed, rng_for, shuffled_indices};

const EXTRACT_STREAM: u64 = 0xE87;
const SPLIT_STREAM: u64 = 0x5711;
const EPOCH_STREAM: u64 = 0xEC0C;

/// Consecutive-iteration agreement (ARI) level treated as converged.
pub const AGREEMENT_STOP: f64 = 0.999;
/// Consecutive converged iterations required before stopping early.
pub const AGREEMENT_STREAK: usize = 3;

/// Represent every episode and K-means the representations into
/// pseudo-labels. Returns (labels, representations).
pub fn extract_pseudo_labels(
    cohort: &CohortDataset,
    state: &EncoderState,
    k: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if k < 2 {
        return Err(SlacError::InvalidConfig("cluster count K must be >= 2".into()));
    }
    let reps = state.represent_cohort(cohort)?;
    let model = kmeans(&reps, k, state.config.kmeans_restarts, seed)?;
    Ok((model.labels, reps))
}

/// Stratified 80:20 split by label; every class keeps at least one training
/// member and the validation side is never empty.
fn stratified_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = rng_for(seed, SPLIT_STREAM);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for members in per_class.iter_mut() {
        if members.is_empty() {
            continue;
        }
        let order = shuffled_indices(members.len(), &mut rng);
        let n_val = members.len() / 5;
        for (pos, &o) in order.iter().enumerate() {
            if pos < n_val {
                val.push(members[o]);
            } else {
                train.push(members[o]);
            }
        }
    }
    if val.is_empty() {
        // all classes tiny; surrender one training element
        val.push(train.pop().expect("nonempty cohort"));
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mean cross-entropy of the classifier over the given episodes.
pub fn classifier_loss(
    state: &EncoderState,
    cohort: &CohortDataset,
    indices: &[usize],
    labels: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        let mut tape = Tape::new();
        let nodes = state.represent_node(&mut tape, &cohort.episodes[i], usize::MAX)?;
        let logits = state.classifier_logits_node(&mut tape, nodes.rep);
        let loss = tape.cross_entropy(logits, labels[i]);
        total += tape.scalar(loss);
    }
    Ok(total / indices.len().max(1) as f64)
}

/// Argmax-softmax prediction per episode.
pub fn predict_labels(state: &EncoderState, cohort: &CohortDataset) -> Result<Vec<usize>> {
    cohort
        .episodes
        .iter()
        .map(|e| {
            let mut tape = Tape::new();
            let nodes = state.represent_node(&mut tape, e, usize::MAX)?;
            let logits = state.classifier_logits_node(&mut tape, nodes.rep);
            let row = tape.value(logits);
            let mut best = 0;
            for j in 1..row.cols {
                if row.data[j] > row.data[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Fraction of episodes whose predicted label matches `labels`.
pub fn classifier_accuracy(
    state: &EncoderState,
    cohort: &CohortDataset,
    indices: &[usize],
    labels: &[usize],
) -> Result<f64> {
    let predictions = predict_labels(state, cohort)?;
    let hits = indices
        .iter()
        .filter(|&&i| predictions[i] == labels[i])
        .count();
    Ok(hits as f64 / indices.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainResult {
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochLoss>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// One classification iteration: minimize cross-entropy of
/// softmax(W . representation) over theta AND W with minibatch Adam,
/// stratified 80:20 split, early stopping, best-epoch weights restored.
pub fn train_classifier_iteration(
    cohort: &CohortDataset,
    labels: &[usize],
    state: &mut EncoderState,
    iteration_seed: u64,
) -> Result<ClassifierTrainResult> {
    if labels.len() != cohort.n_episodes() {
        return Err(SlacError::Cluster("labels must cover all episodes".into()));
    }
    let k_used = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if k_used < 2 {
        return Err(SlacError::DegenerateLabels(
            "all pseudo-labels identical; nothing to classify".into(),
        ));
    }
    let config = state.config.clone();
    let (train_idx, val_idx) = stratified_split(labels, iteration_seed);
    let mut adam = AdamState::new(
        &state.params,
        AdamHyper {
            learning_rate: config.learning_rate,
            ..AdamHyper::default()
        },
    );
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params = state.params.clone();
    let mut history = Vec::new();
    for epoch in 0..config.classifier_max_epochs {
        let mut rng = rng_for(iteration_seed, EPOCH_STREAM ^ (epoch as u64) << 16);
        let perm = shuffled_indices(train_idx.len(), &mut rng);
        let mut train_total = 0.0;
        for batch in perm.chunks(config.batch_size) {
            let seed_grad = 1.0 / batch.len() as f64;
            for &pi in batch {
                let i = train_idx[pi];
                let mut tape = Tape::new();
                let nodes = state.represent_node(&mut tape, &cohort.episodes[i], usize::MAX)?;
                let logits = state.classifier_logits_node(&mut tape, nodes.rep);
                let loss = tape.cross_entropy(logits, labels[i]);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(SlacError::Diverged(format!("classifier episode {i}")));
                }
                train_total += value;
                tape.backward(loss, seed_grad, &mut state.params)?;
            }
            adam.step(&mut state.params)?;
        }
        let train_loss = train_total / train_idx.len() as f64;
        let val_loss = classifier_loss(state, cohort, &val_idx, labels)?;
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if stopper.observe(epoch, val_loss) {
            best_params = state.params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    state.params = best_params;
    let train_accuracy = classifier_accuracy(state, cohort, &train_idx, labels)?;
    let val_accuracy = classifier_accuracy(state, cohort, &val_idx, labels)?;
    Ok(ClassifierTrainResult {
        best_val_loss: stopper.best,
        best_epoch: stopper.best_epoch,
        history,
        train_accuracy,
        val_accuracy,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// ARI between this iteration's labels and the previous ones.
    pub agreement: f64,
    pub classifier_val_loss: f64,
    pub scores: ValidityScores,
}

#[derive(Debug)]
pub struct SlacRunResult {
    pub final_labels: Vec<usize>,
    pub state: EncoderState,
    pub records: Vec<IterationRecord>,
    pub final_reps: Vec<Vec<f64>>,
    pub final_scores: ValidityScores,
}

/// The full loop from a pretrained encoder: repeat { train classifier on
/// current pseudo-labels; re-extract pseudo-labels } for
/// `config.iterations`, stopping early once consecutive labelings agree
/// (ARI >= 0.999) three times in a row. `iterations` = 0 degenerates to
/// plain K-means on the pretrained representations.
///
/// Metadata is stripped before anything runs, so pseudo-labeling can never
/// read planted truth or outcomes.
pub fn run_slac(cohort: &CohortDataset, pretrained: EncoderState) -> Result<SlacRunResult> {
    let cohort = cohort.metadata_stripped();
    let mut state = pretrained;
    let config = state.config.clone();
    let k = config.clusters;
    let (mut labels, mut reps) =
        extract_pseudo_labels(&cohort, &state, k, mix_seed(config.seed, EXTRACT_STREAM))?;
    let mut records = Vec::new();
    let mut streak = 0usize;
    if config.iterations > 0 {
        for iteration in 1..=config.iterations {
            let iter_seed = mix_seed(config.seed, 0x17E8_0000 + iteration as u64);
            let trained = train_classifier_iteration(&cohort, &labels, &mut state, iter_seed)?;
            let (new_labels, new_reps) = extract_pseudo_labels(
                &cohort,
                &state,
                k,
                mix_seed(config.seed, EXTRACT_STREAM + iteration as u64),
            )?;
            let agreement = adjusted_rand_index(&labels, &new_labels);
            let scores = validity_scores(&new_reps, &new_labels)?;
            records.push(IterationRecord {
                iteration,
                agreement,
                classifier_val_loss: trained.best_val_loss,
                scores,
            });
            labels = new_labels;
            reps = new_reps;
            streak = if agreement >= AGREEMENT_STOP { streak + 1 } else { 0 };
            if streak >= AGREEMENT_STREAK {
                break;
            }
        }
    }
    let final_scores = validity_scores(&reps, &labels)?;
    Ok(SlacRunResult {
        final_labels: labels,
        state,
        records,
        final_reps: reps,
        final_scores,
    })
}

// ---------------------------------------------------------------------------
// hyperparameter sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub blocks: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub d: usize,
    pub h: usize,
    pub k: usize,
    pub ss: f64,
    pub chs: f64,
    pub dbs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the selected row in `rows`.
    pub selected: usize,
}

impl SweepTable {
    pub fn selected_row(&self) -> &SweepRow {
        &self.rows[self.selected]
    }
}

/// Majority rule over {SS max, CHS max, DBS min}; ties break toward the
/// lexicographically smaller (M, d, h, K).
fn select_row(rows: &[SweepRow]) -> usize {
    let mut wins = vec![0usize; rows.len()];
    let best_ss = rows.iter().map(|r| r.ss).fold(f64::NEG_INFINITY, f64::max);
    let best_chs = rows.iter().map(|r| r.chs).fold(f64::NEG_INFINITY, f64::max);
    let best_dbs = rows.iter().map(|r| r.dbs).fold(f64::INFINITY, f64::min);
    for (i, r) in rows.iter().enumerate() {
        wins[i] += usize::from(r.ss == best_ss);
        wins[i] += usize::from(r.chs == best_chs);
        wins[i] += usize::from(r.dbs == best_dbs);
    }
    let max_wins = *wins.iter().max().unwrap();
    let key = |r: &SweepRow| (r.m, r.d, r.h, r.k);
    (0..rows.len())
        .filter(|&i| wins[i] == max_wins)
        .min_by_key(|&i| key(&rows[i]))
        .unwrap()
}

/// Sweep the grid: one pretraining per (M, d, h) group (the proxy task does
/// not depend on K), then one loop run per K. Invalid (d, h) combinations
/// are skipped with a warning, mirroring sparse published grids. Groups run
/// in parallel with per-group seeds; the table is merged in grid order.
pub fn sweep(
    cohort: &CohortDataset,
    base: &ModelConfig,
    grid: &SweepGrid,
) -> Result<SweepTable> {
    if grid.blocks.is_empty()
        || grid.embed_dims.is_empty()
        || grid.heads.is_empty()
        || grid.clusters.is_empty()
    {
        return Err(SlacError::InvalidConfig("sweep grid must be nonempty".into()));
    }
    let mut groups: Vec<(usize, usize, usize)> = Vec::new();
    for &m in &grid.blocks {
        for &d in &grid.embed_dims {
            for &h in &grid.heads {
                if d % h != 0 {
                    warn!("skipping invalid grid point d={d}, h={h} (not divisible)");
                    continue;
                }
                groups.push((m, d, h));
            }
        }
    }
    if groups.is_empty() {
        return Err(SlacError::InvalidConfig(
            "sweep grid contains no valid (d, h) combination".into(),
        ));
    }
    let group_results: Vec<Result<Vec<SweepRow>>> = groups
        .par_iter()
        .map(|&(m, d, h)| {
            let group_seed = mix_seed(base.seed, mix_seed(m as u64, mix_seed(d as u64, h as u64)));
            let config = ModelConfig {
                blocks: m,
                embed_dim: d,
                heads: h,
                clusters: *grid.clusters.iter().min().unwrap(),
                seed: group_seed,
                ..base.clone()
            };
            let pretrained: PretrainResult = pretrain(cohort, &config)?;
            let mut rows = Vec::new();
            for &k in &grid.clusters {
                let mut run_state = pretrained.state.with_clusters(k)?;
                run_state.config.seed = mix_seed(group_seed, k as u64);
                let result = run_slac(cohort, run_state)?;
                rows.push(SweepRow {
                    m,
                    d,
                    h,
                    k,
                    ss: result.final_scores.silhouette,
                    chs: result.final_scores.calinski_harabasz,
                    dbs: result.final_scores.davies_bouldin,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for group in group_results {
        rows.extend(group?);
    }
    let selected = select_row(&rows);
    Ok(SweepTable { rows, selected })
}

/// Sweep table CSV matching the published column order: `M,d,h,K,SS,CHS,DBS`.
pub fn write_sweep_csv<W: std::io::Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["M", "d", "h", "K", "SS", "CHS", "DBS"])?;
    for r in &table.rows {
        w.write_record([
            r.m.to_string(),
            r.d.to_string(),
            r.h.to_string(),
            r.k.to_string(),
            r.ss.to_string(),
            r.chs.to_string(),
            r.dbs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Labels CSV: `episode_id,cluster`.
pub fn write_labels_csv<W: std::io::Write>(
    cohort: &CohortDataset,
    labels: &[usize],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode_id", "cluster"])?;
    for (e, &l) in cohort.episodes.iter().zip(labels) {
        w.write_record([e.episode_id.as_str(), &l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: std::io::Read>(
    cohort: &CohortDataset,
    input: R,
) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let mut by_id = std::collections::BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let label: usize = record[1].parse().map_err(|_| SlacError::Parse {
            line: record.position().map(|p| p.line()).unwrap_or(0),
            msg: format!("bad cluster index {:?}", &record[1]),
        })?;
        by_id.insert(record[0].to_string(), label);
    }
    cohort
        .episodes
        .iter()
        .map(|e| {
            by_id.get(&e.episode_id).copied().ok_or_else(|| {
                SlacError::CohortMismatch(format!("no label for episode {}", e.episode_id))
            })
        })
        .collect()
}
