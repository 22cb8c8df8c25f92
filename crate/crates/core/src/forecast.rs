//! Self-supervised pretraining: forecast feature values in a 2-hour
//! prediction window from the observation window before it, trained with a
//! masked MSE so unobserved targets contribute nothing.

use serde::{Deserialize, Serialize};

use crate::data::CohortDataset;
use crate::encoder::{EncoderState, ModelConfig};
use crate::error::{Result, SlacError};
use crate::numeric::adam::{AdamHyper, AdamState};
use crate::numeric::tape::{NodeId, Tape};
use crate::util::{rng_for, shuffled_indices};

/// Observation window ends, hours. The last window's prediction interval
/// [118, 120) stays inside the 120-hour horizon.
pub const OBSERVATION_WINDOWS: [f64; 5] = [24.0, 48.0, 72.0, 96.0, 118.0];
pub const PREDICTION_WINDOW_HOURS: f64 = 2.0;

const SPLIT_STREAM: u64 = 0xF0_5EED;
const EPOCH_STREAM: u64 = 0xE9_0C;

/// One forecasting instance: the episode's time-sorted triplet prefix under
/// `window_end` as input, per-feature mean over [window_end, window_end + 2)
/// as target. Only constructed when both windows are nonempty.
#[derive(Debug, Clone)]
pub struct ForecastInstance {
    pub episode_idx: usize,
    pub window_end: f64,
    /// Input is `triplets[..input_len]` of the episode.
    pub input_len: usize,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Build instances for every (episode, window) pair with at least one
/// observation in both windows.
pub fn build_forecast_instances(cohort: &CohortDataset) -> Result<Vec<ForecastInstance>> {
    let nf = cohort.n_features();
    let mut out = Vec::new();
    for (ei, episode) in cohort.episodes.iter().enumerate() {
        if episode
            .triplets
            .windows(2)
            .any(|w| w[0].time > w[1].time)
        {
            return Err(SlacError::Schema(format!(
                "episode {} triplets must be time-sorted before instance construction",
                episode.episode_id
            )));
        }
        for &window_end in &OBSERVATION_WINDOWS {
            let input_len = episode
                .triplets
                .partition_point(|t| t.time < window_end);
            if input_len == 0 {
                continue;
            }
            let mut sums = vec![0.0; nf];
            let mut counts = vec![0usize; nf];
            for t in &episode.triplets[input_len..] {
                if t.time >= window_end + PREDICTION_WINDOW_HOURS {
                    break;
                }
                sums[t.feature] += t.value;
                counts[t.feature] += 1;
            }
            if counts.iter().all(|&c| c == 0) {
                continue;
            }
            let target: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect();
            let mask: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
            out.push(ForecastInstance {
                episode_idx: ei,
                window_end,
                input_len,
                target,
                mask,
            });
        }
    }
    Ok(out)
}

/// Masked MSE over a batch, normalized by instance count:
/// (1/B) sum_k sum_j m_j^k (zhat_j^k - z_j^k)^2.
pub fn masked_mse(preds: &[Vec<f64>], targets: &[Vec<f64>], masks: &[Vec<bool>]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    assert_eq!(preds.len(), masks.len());
    if preds.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        for j in 0..t.len() {
            if m[j] {
                let d = p[j] - t[j];
                total += d * d;
            }
        }
    }
    total / preds.len() as f64
}

/// Forward one instance to its masked SSE node (un-normalized).
pub fn instance_loss_node(
    state: &EncoderState,
    tape: &mut Tape,
    cohort: &CohortDataset,
    instance: &ForecastInstance,
) -> Result<NodeId> {
    let episode = &cohort.episodes[instance.episode_idx];
    let nodes = state.represent_node(tape, episode, instance.input_len)?;
    let z = state.forecast_node(tape, nodes.concat);
    Ok(tape.masked_sse(z, instance.target.clone(), instance.mask.clone()))
}

/// Whole-batch Eq.-style loss on one tape (used by the gradient checks;
/// training accumulates per instance instead to bound memory).
pub fn batch_loss_node(
    state: &EncoderState,
    tape: &mut Tape,
    cohort: &CohortDataset,
    instances: &[ForecastInstance],
) -> Result<NodeId> {
    let terms: Vec<NodeId> = instances
        .iter()
        .map(|inst| instance_loss_node(state, tape, cohort, inst))
        .collect::<Result<_>>()?;
    let sum = tape.add_n(terms);
    Ok(tape.scale(sum, 1.0 / instances.len() as f64))
}

/// Pure evaluation of the batch loss.
pub fn batch_loss(
    state: &EncoderState,
    cohort: &CohortDataset,
    instances: &[ForecastInstance],
) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let node = batch_loss_node(state, &mut tape, cohort, instances)?;
    Ok(tape.scalar(node))
}

/// Loss of the constant predictor that outputs per-feature training means
/// (masked entries only). The trained model has to beat this.
pub fn mean_predictor_loss(
    nf: usize,
    train: &[ForecastInstance],
    eval: &[ForecastInstance],
) -> f64 {
    let mut sums = vec![0.0; nf];
    let mut counts = vec![0usize; nf];
    for inst in train {
        for j in 0..nf {
            if inst.mask[j] {
                sums[j] += inst.target[j];
                counts[j] += 1;
            }
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let preds: Vec<Vec<f64>> = eval.iter().map(|_| means.clone()).collect();
    let targets: Vec<Vec<f64>> = eval.iter().map(|i| i.target.clone()).collect();
    let masks: Vec<Vec<bool>> = eval.iter().map(|i| i.mask.clone()).collect();
    masked_mse(&preds, &targets, &masks)
}

/// Tracks the validation minimum and the patience window.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record an epoch's validation loss; returns true when it is a new
    /// strict minimum.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct PretrainResult {
    pub state: EncoderState,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub n_instances: usize,
}

/// 80:20 instance split, seeded. With `episode_level_split`, whole episodes
/// move to validation until it holds ~20% of instances.
fn split_instances(
    instances: &[ForecastInstance],
    config: &ModelConfig,
) -> (Vec<usize>, Vec<usize>) {
    let n = instances.len();
    let mut rng = rng_for(config.seed, SPLIT_STREAM);
    let val_target = (n / 5).clamp(1, n - 1);
    if config.episode_level_split {
        let mut episodes: Vec<usize> = instances.iter().map(|i| i.episode_idx).collect();
        episodes.sort_unstable();
        episodes.dedup();
        let order = shuffled_indices(episodes.len(), &mut rng);
        let mut val_eps = std::collections::BTreeSet::new();
        let mut val_count = 0usize;
        for &o in &order {
            if val_count >= val_target {
                break;
            }
            val_eps.insert(episodes[o]);
            val_count += instances
                .iter()
                .filter(|i| i.episode_idx == episodes[o])
                .count();
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, inst) in instances.iter().enumerate() {
            if val_eps.contains(&inst.episode_idx) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        if train.is_empty() {
            // degenerate split; fall back to instance level
            let order = shuffled_indices(n, &mut rng);
            return (order[val_target..].to_vec(), order[..val_target].to_vec());
        }
        (train, val)
    } else {
        let order = shuffled_indices(n, &mut rng);
        (order[val_target..].to_vec(), order[..val_target].to_vec())
    }
}

/// One Adam pass over the given instances in `order`, batched; returns the
/// mean per-instance training loss.
fn run_train_epoch(
    state: &mut EncoderState,
    adam: &mut AdamState,
    cohort: &CohortDataset,
    instances: &[ForecastInstance],
    order: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let seed_grad = 1.0 / batch.len() as f64;
        for &idx in batch {
            let mut tape = Tape::new();
            let loss = instance_loss_node(state, &mut tape, cohort, &instances[idx])?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(SlacError::Diverged(format!("instance {idx}")));
            }
            total += value;
            tape.backward(loss, seed_grad, &mut state.params)?;
        }
        adam.step(&mut state.params)?;
    }
    Ok(total / order.len() as f64)
}

fn eval_loss(
    state: &EncoderState,
    cohort: &CohortDataset,
    instances: &[ForecastInstance],
    indices: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &idx in indices {
        let mut tape = Tape::new();
        let node = instance_loss_node(state, &mut tape, cohort, &instances[idx])?;
        total += tape.scalar(node);
    }
    Ok(total / indices.len() as f64)
}

/// Pretrain a fresh encoder on the forecasting proxy task with minibatch
/// Adam, early-stopping on validation loss and restoring the best-epoch
/// weights.
pub fn pretrain(cohort: &CohortDataset, config: &ModelConfig) -> Result<PretrainResult> {
    config.validate()?;
    let instances = build_forecast_instances(cohort)?;
    if instances.len() < 2 {
        return Err(SlacError::TooFewInstances(instances.len()));
    }
    let static_dim = cohort.static_dim();
    let mut state = EncoderState::new(config.clone(), cohort.n_features(), static_dim)?;
    let (train_idx, val_idx) = split_instances(&instances, config);
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
    for epoch in 0..config.pretrain_max_epochs {
        let mut rng = rng_for(config.seed, EPOCH_STREAM ^ (epoch as u64) << 16);
        let perm = shuffled_indices(train_idx.len(), &mut rng);
        let order: Vec<usize> = perm.iter().map(|&i| train_idx[i]).collect();
        let train_loss = run_train_epoch(
            &mut state,
            &mut adam,
            cohort,
            &instances,
            &order,
            config.batch_size,
        )?;
        let val_loss = eval_loss(&state, cohort, &instances, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(SlacError::Diverged(format!("validation at epoch {epoch}")));
        }
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
    Ok(PretrainResult {
        state,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        n_instances: instances.len(),
        history,
    })
}

/// Loss-history CSV: `epoch,train_loss,val_loss`.
pub fn write_loss_history<W: std::io::Write>(history: &[EpochLoss], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preprocess, EpisodeRecord, ObservationTriplet};
    use crate::synth;
    use approx::assert_abs_diff_eq;

    fn episode_with_hours(id: &str, hours: &[usize], feature: usize, nf: usize) -> EpisodeRecord {
        let _ = nf;
        let mut triplets: Vec<ObservationTriplet> = hours
            .iter()
            .map(|&h| ObservationTriplet {
                time: h as f64 + 0.5,
                feature,
                value: h as f64,
            })
            .collect();
        triplets.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        EpisodeRecord {
            episode_id: id.into(),
            static_vector: vec![0.0],
            triplets,
            metadata: Default::default(),
        }
    }

    fn cohort_of(episodes: Vec<EpisodeRecord>, nf: usize) -> CohortDataset {
        CohortDataset {
            episodes,
            feature_vocab: (0..nf).map(|i| format!("f{i}")).collect(),
            ..CohortDataset::default()
        }
    }

    #[test]
    fn window_rules() {
        // observations only in hours 0..=10: every prediction window empty
        let hours: Vec<usize> = (0..=10).collect();
        let cohort = cohort_of(vec![episode_with_hours("a", &hours, 0, 1)], 1);
        assert!(build_forecast_instances(&cohort).unwrap().is_empty());

        // data in every hour -> 5 instances
        let hours: Vec<usize> = (0..120).collect();
        let cohort = cohort_of(vec![episode_with_hours("b", &hours, 0, 1)], 1);
        let instances = build_forecast_instances(&cohort).unwrap();
        assert_eq!(instances.len(), 5);
        // targets are means over the 2-hour window
        let first = &instances[0];
        assert_eq!(first.window_end, 24.0);
        assert!(first.mask[0]);
        assert_abs_diff_eq!(first.target[0], (24.0 + 25.0) / 2.0);
        // inputs never reach window_end (leakage check by construction)
        for inst in &instances {
            let episode = &cohort.episodes[inst.episode_idx];
            assert!(episode.triplets[..inst.input_len]
                .iter()
                .all(|t| t.time < inst.window_end));
            if inst.input_len < episode.triplets.len() {
                assert!(episode.triplets[inst.input_len].time >= inst.window_end);
            }
        }
    }

    #[test]
    fn full_grid_gives_five_instances_per_episode() {
        let spec = synth::SynthSpec {
            n_episodes: 4,
            n_phenotypes: 2,
            phenotype_proportions: vec![0.5, 0.5],
            n_ts_features: 3,
            n_static_features: 2,
            missingness_rate: 0.0,
            separation: 1.0,
            seed: 3,
        };
        let cohort = synth::generate(&spec).unwrap();
        let instances = build_forecast_instances(&cohort).unwrap();
        assert_eq!(instances.len(), 5 * 4);
    }

    #[test]
    fn masked_mse_hand_cases() {
        // all masks zero -> 0
        assert_eq!(
            masked_mse(&[vec![9.0]], &[vec![1.0]], &[vec![false]]),
            0.0
        );
        // one instance, one masked-on feature, error 2 -> 4
        assert_eq!(
            masked_mse(&[vec![3.0]], &[vec![1.0]], &[vec![true]]),
            4.0
        );
        // two instances: errors (1, 1) masks (1, 0), and (3,) mask (1,) -> (1 + 9) / 2
        let preds = vec![vec![2.0, 5.0], vec![4.0, 0.0]];
        let targets = vec![vec![1.0, 4.0], vec![1.0, 0.0]];
        let masks = vec![vec![true, false], vec![true, false]];
        assert_abs_diff_eq!(masked_mse(&preds, &targets, &masks), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn early_stopper_patience_semantics() {
        let mut s = EarlyStopper::new(10);
        s.observe(1, 5.0);
        s.observe(2, 4.0);
        let mut stopped_at = None;
        for epoch in 3..=30 {
            s.observe(epoch, 4.0);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(12)); // exactly 10 non-improving epochs past the minimum
        assert_eq!(s.best_epoch, 2);
        assert_abs_diff_eq!(s.best, 4.0);
    }

    fn small_synth_processed(seed: u64, separation: f64) -> CohortDataset {
        let spec = synth::SynthSpec {
            n_episodes: 24,
            n_phenotypes: 2,
            phenotype_proportions: vec![0.5, 0.5],
            n_ts_features: 3,
            n_static_features: 2,
            missingness_rate: 0.4,
            separation,
            seed,
        };
        let cohort = synth::generate(&spec).unwrap();
        let (processed, _) = preprocess::preprocess_cohort(
            &cohort,
            &synth::schema(&spec),
            &synth::ranges(&spec),
            preprocess::PreprocessOptions::default(),
        )
        .unwrap();
        processed
    }

    #[test]
    fn training_reduces_validation_loss_and_beats_mean_baseline() {
        let cohort = small_synth_processed(7, 2.0);
        let config = ModelConfig {
            pretrain_max_epochs: 15,
            patience: 15,
            learning_rate: 3e-3,
            seed: 7,
            ..ModelConfig::default()
        };
        let result = pretrain(&cohort, &config).unwrap();
        let first = result.history.first().unwrap().val_loss;
        let best = result.best_val_loss;
        assert!(best < first, "no progress: {first} -> {best}");

        // beats the training-mean predictor on the validation split
        let instances = build_forecast_instances(&cohort).unwrap();
        let (train_idx, val_idx) = split_instances(&instances, &config);
        let train: Vec<ForecastInstance> =
            train_idx.iter().map(|&i| instances[i].clone()).collect();
        let val: Vec<ForecastInstance> = val_idx.iter().map(|&i| instances[i].clone()).collect();
        let baseline = mean_predictor_loss(cohort.n_features(), &train, &val);
        assert!(
            best < baseline,
            "trained {best} should beat mean baseline {baseline}"
        );
    }

    #[test]
    fn pretrain_is_deterministic() {
        let cohort = small_synth_processed(9, 1.0);
        let config = ModelConfig {
            pretrain_max_epochs: 4,
            seed: 21,
            ..ModelConfig::default()
        };
        let a = pretrain(&cohort, &config).unwrap();
        let b = pretrain(&cohort, &config).unwrap();
        let hist = |r: &PretrainResult| {
            r.history
                .iter()
                .map(|h| (h.train_loss.to_bits(), h.val_loss.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(hist(&a), hist(&b));
    }

    #[test]
    fn too_few_instances_rejected() {
        let cohort = cohort_of(vec![episode_with_hours("a", &[0, 1], 0, 1)], 1);
        assert!(matches!(
            pretrain(&cohort, &ModelConfig::default()),
            Err(SlacError::TooFewInstances(_))
        ));
    }

    #[test]
    fn truncating_beyond_window_changes_nothing() {
        // leakage check: an instance's loss only reads data before window_end
        let cohort = small_synth_processed(11, 1.0);
        let config = ModelConfig { seed: 3, ..ModelConfig::default() };
        let state = EncoderState::new(config, cohort.n_features(), cohort.static_dim()).unwrap();
        let instances = build_forecast_instances(&cohort).unwrap();
        let inst = instances
            .iter()
            .find(|i| i.window_end == 48.0)
            .expect("a 48h instance exists");
        let full = batch_loss(&state, &cohort, std::slice::from_ref(inst)).unwrap();
        let mut truncated = cohort.clone();
        let e = &mut truncated.episodes[inst.episode_idx];
        e.triplets.truncate(inst.input_len);
        let cut = batch_loss(&state, &truncated, std::slice::from_ref(inst)).unwrap();
        assert_eq!(full.to_bits(), cut.to_bits());
    }
}
