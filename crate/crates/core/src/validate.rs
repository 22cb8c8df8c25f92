//! External validation: stratified cross-validation of a transfer-learned
//! phenotype classifier, cross-cohort application, and the cross-match
//! permutation test on Euclidean distances.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::adjusted_rand_index;
use crate::data::CohortDataset;
use crate::encoder::EncoderState;
use crate::error::{Result, SlacError};
use crate::forecast::EarlyStopper;
use crate::numeric::adam::{AdamHyper, AdamState};
use crate::numeric::mat::{euclidean, Mat};
use crate::numeric::params::ParamSet;
use crate::numeric::tape::Tape;
use crate::util::{mix_seed, rng_for, shuffled_indices};

/// Pool size up to which the minimum-weight perfect matching is exact
/// (subset DP); larger pools use the documented greedy heuristic, applied
/// identically to observed and permuted statistics.
pub const EXACT_MATCHING_MAX: usize = 14;

// ---------------------------------------------------------------------------
// fold plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub test: Vec<usize>,
}

/// Stratified test split followed by stratified k folds over the remainder
/// (round-robin within each shuffled class, so per-fold class counts differ
/// by at most one).
pub fn make_folds(
    labels: &[usize],
    test_fraction: f64,
    k_folds: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k_folds < 2 {
        return Err(SlacError::FoldPlan("need at least 2 folds".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(SlacError::FoldPlan("test_fraction must be in [0, 1)".into()));
    }
    let k_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = rng_for(seed, 0xF0_1D);
    let mut test = Vec::new();
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k_folds];
    for (class, members) in per_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let order = shuffled_indices(members.len(), &mut rng);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        let pool = members.len() - n_test;
        if pool < k_folds {
            return Err(SlacError::FoldPlan(format!(
                "class {class} has only {pool} pool members for {k_folds} folds"
            )));
        }
        for (pos, &o) in order.iter().enumerate() {
            if pos < n_test {
                test.push(members[o]);
            } else {
                fold_members[(pos - n_test) % k_folds].push(members[o]);
            }
        }
    }
    test.sort_unstable();
    for f in &mut fold_members {
        f.sort_unstable();
    }
    let folds = (0..k_folds)
        .map(|f| {
            let validation = fold_members[f].clone();
            let mut train = Vec::new();
            for (g, members) in fold_members.iter().enumerate() {
                if g != f {
                    train.extend_from_slice(members);
                }
            }
            train.sort_unstable();
            Fold { train, validation }
        })
        .collect();
    Ok(FoldPlan { folds, test })
}

// ---------------------------------------------------------------------------
// transfer-learned phenotype classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
}

#[derive(Debug)]
pub struct PhenotypeClassifier {
    /// Pretrained encoder with the best fold's trained head installed.
    pub state: EncoderState,
    pub fold_metrics: Vec<FoldMetrics>,
    pub best_fold: usize,
    pub test_accuracy: f64,
}

struct Head {
    params: ParamSet,
}

impl Head {
    fn new(width: usize, k: usize) -> Self {
        let mut params = ParamSet::default();
        params.push_zeros("w", width, k);
        params.push_zeros("b", 1, k);
        Head { params }
    }

    fn loss_node(&self, tape: &mut Tape, rep: &[f64], label: usize) -> crate::numeric::tape::NodeId {
        let x = tape.constant(Mat::row(rep));
        let w = tape.param(&self.params, 0);
        let b = tape.param(&self.params, 1);
        let xw = tape.matmul(x, w);
        let logits = tape.add_bias(xw, b);
        tape.cross_entropy(logits, label)
    }

    fn loss(&self, rep: &[f64], label: usize) -> f64 {
        let mut tape = Tape::new();
        let node = self.loss_node(&mut tape, rep, label);
        tape.scalar(node)
    }

    fn predict(&self, rep: &[f64]) -> usize {
        let w = self.params.value(0);
        let b = self.params.value(1);
        let k = w.cols;
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..k {
            let mut v = b.data[j];
            for (i, r) in rep.iter().enumerate() {
                v += r * w.at(i, j);
            }
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        best
    }
}

/// Train the affine+softmax head on frozen representations for one fold.
fn train_head_fold(
    reps: &[Vec<f64>],
    labels: &[usize],
    fold: &Fold,
    k: usize,
    config: &crate::encoder::ModelConfig,
    seed: u64,
) -> Result<(Head, FoldMetrics, usize)> {
    let width = reps[0].len();
    let mut head = Head::new(width, k);
    let mut adam = AdamState::new(
        &head.params,
        AdamHyper {
            learning_rate: config.learning_rate,
            ..AdamHyper::default()
        },
    );
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best = head.params.clone();
    for epoch in 0..config.classifier_max_epochs {
        let mut rng = rng_for(seed, 0xF0_7D ^ (epoch as u64) << 16);
        let perm = shuffled_indices(fold.train.len(), &mut rng);
        for batch in perm.chunks(config.batch_size) {
            let seed_grad = 1.0 / batch.len() as f64;
            for &pi in batch {
                let i = fold.train[pi];
                let mut tape = Tape::new();
                let node = head.loss_node(&mut tape, &reps[i], labels[i]);
                tape.backward(node, seed_grad, &mut head.params)?;
            }
            adam.step(&mut head.params)?;
        }
        let val_loss = fold
            .validation
            .iter()
            .map(|&i| head.loss(&reps[i], labels[i]))
            .sum::<f64>()
            / fold.validation.len().max(1) as f64;
        if stopper.observe(epoch, val_loss) {
            best = head.params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    head.params = best;
    let hits = fold
        .validation
        .iter()
        .filter(|&&i| head.predict(&reps[i]) == labels[i])
        .count();
    let metrics = FoldMetrics {
        fold: 0, // filled by the caller
        val_accuracy: hits as f64 / fold.validation.len().max(1) as f64,
        val_loss: stopper.best,
        best_epoch: stopper.best_epoch,
    };
    Ok((head, metrics, width))
}

/// The cross-validation protocol: per fold, transfer the pretrained encoder
/// (frozen), train the affine+softmax head with Adam and early stopping on
/// the validation fold; the best-validation-accuracy fold's head is
/// evaluated once on the held-out test set.
pub fn train_phenotype_classifier(
    cohort: &CohortDataset,
    labels: &[usize],
    pretrained: &EncoderState,
    plan: &FoldPlan,
) -> Result<PhenotypeClassifier> {
    if labels.len() != cohort.n_episodes() {
        return Err(SlacError::Cluster("labels must cover the cohort".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(SlacError::DegenerateLabels("need at least 2 phenotypes".into()));
    }
    let config = &pretrained.config;
    // frozen encoder: representations are computed once
    let reps = pretrained.represent_cohort(cohort)?;
    let results: Vec<Result<(Head, FoldMetrics, usize)>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            train_head_fold(
                &reps,
                labels,
                fold,
                k,
                config,
                mix_seed(config.seed, 0xC5_0000 + f as u64),
            )
        })
        .collect();
    let mut heads = Vec::new();
    let mut fold_metrics = Vec::new();
    for (f, r) in results.into_iter().enumerate() {
        let (head, mut metrics, _) = r?;
        metrics.fold = f;
        fold_metrics.push(metrics);
        heads.push(head);
    }
    let best_fold = fold_metrics
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.val_accuracy
                .partial_cmp(&b.val_accuracy)
                .unwrap()
                .then(ib.cmp(ia)) // ties toward the lower fold index
        })
        .map(|(i, _)| i)
        .unwrap();
    let best_head = &heads[best_fold];
    // install the winning head into a copy of the pretrained encoder
    let mut state = pretrained.with_clusters(k)?;
    let w_idx = state.params.index_of("classifier_w").unwrap();
    let b_idx = state.params.index_of("classifier_b").unwrap();
    state.params.tensors[w_idx].value = best_head.params.value(0).clone();
    state.params.tensors[b_idx].value = best_head.params.value(1).clone();
    let test_hits = plan
        .test
        .iter()
        .filter(|&&i| best_head.predict(&reps[i]) == labels[i])
        .count();
    let test_accuracy = test_hits as f64 / plan.test.len().max(1) as f64;
    Ok(PhenotypeClassifier {
        state,
        fold_metrics,
        best_fold,
        test_accuracy,
    })
}

/// Apply a trained classifier to another cohort. The target must have been
/// preprocessed with the source's normalization stats and match its
/// vocabulary and static width exactly.
pub fn cross_apply(
    state: &EncoderState,
    source_vocab: &[String],
    target: &CohortDataset,
) -> Result<Vec<usize>> {
    if source_vocab != target.feature_vocab.as_slice() {
        let missing: Vec<&String> = source_vocab
            .iter()
            .filter(|f| !target.feature_vocab.contains(f))
            .collect();
        let extra: Vec<&String> = target
            .feature_vocab
            .iter()
            .filter(|f| !source_vocab.contains(f))
            .collect();
        return Err(SlacError::CohortMismatch(format!(
            "feature vocabularies differ (missing from target: {missing:?}; unexpected: {extra:?})"
        )));
    }
    if target.static_dim() != state.static_dim {
        return Err(SlacError::CohortMismatch(format!(
            "static width {} != model width {}",
            target.static_dim(),
            state.static_dim
        )));
    }
    crate::slac::predict_labels(state, target)
}

// ---------------------------------------------------------------------------
// cross-match permutation test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossMatchResult {
    /// Cross-group pair count in the minimum-weight perfect matching.
    pub statistic: usize,
    pub p_value: f64,
    pub n_perm: usize,
    pub null_mean: f64,
    /// Whether the pooled size was odd and one point was dropped.
    pub dropped_one: bool,
    /// True when the exact subset-DP matcher was used.
    pub exact_matching: bool,
}

/// Exact minimum-weight perfect matching over <= EXACT_MATCHING_MAX points
/// by subset DP. Returns index pairs.
fn exact_matching(dist: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = dist.len();
    debug_assert!(n % 2 == 0);
    let full: usize = (1 << n) - 1;
    let mut cost = vec![f64::INFINITY; 1 << n];
    let mut choice: Vec<Option<(usize, usize)>> = vec![None; 1 << n];
    cost[0] = 0.0;
    for mask in 1..=full {
        let ones = (mask as u32).count_ones();
        if ones % 2 != 0 {
            continue;
        }
        let i = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << i);
        let mut j_bits = rest;
        while j_bits != 0 {
            let j = j_bits.trailing_zeros() as usize;
            j_bits &= j_bits - 1;
            let prev = rest & !(1 << j);
            let c = cost[prev] + dist[i][j];
            if c < cost[mask] {
                cost[mask] = c;
                choice[mask] = Some((i, j));
            }
        }
    }
    let mut pairs = Vec::with_capacity(n / 2);
    let mut mask = full;
    while mask != 0 {
        let (i, j) = choice[mask].expect("matching exists");
        pairs.push((i, j));
        mask &= !(1 << i);
        mask &= !(1 << j);
    }
    pairs
}

/// Greedy heuristic: repeatedly match the globally closest unmatched pair.
fn greedy_matching(dist: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = dist.len();
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((dist[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut matched = vec![false; n];
    let mut pairs = Vec::with_capacity(n / 2);
    for (_, i, j) in edges {
        if !matched[i] && !matched[j] {
            matched[i] = true;
            matched[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Cross-match two point sets: pool them, compute a minimum-weight perfect
/// matching of the pooled points (label-blind), and count cross-group
/// pairs. Few cross pairs indicate a distributional difference; the
/// one-sided p comes from `n_perm` random relabelings re-counted on the
/// same matching, with +1 smoothing.
///
/// Points are canonicalized (sorted) first, so the result does not depend
/// on input order. An odd pooled count drops one random point.
pub fn crossmatch_test(
    reps_a: &[Vec<f64>],
    reps_b: &[Vec<f64>],
    n_perm: usize,
    seed: u64,
) -> Result<CrossMatchResult> {
    if reps_a.is_empty() || reps_b.is_empty() {
        return Err(SlacError::Stats("cross-match groups must be nonempty".into()));
    }
    let width = reps_a[0].len();
    if reps_a.iter().chain(reps_b).any(|r| r.len() != width) {
        return Err(SlacError::Stats("cross-match points must share a width".into()));
    }
    // canonical order: sort (point, group) lexicographically
    let mut pooled: Vec<(&Vec<f64>, bool)> = reps_a
        .iter()
        .map(|r| (r, true))
        .chain(reps_b.iter().map(|r| (r, false)))
        .collect();
    pooled.sort_by(|a, b| {
        a.0.partial_cmp(b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut rng = rng_for(seed, 0xC805_5);
    let mut dropped_one = false;
    if pooled.len() % 2 == 1 {
        use rand::Rng;
        let victim = rng.gen_range(0..pooled.len());
        warn!("cross-match pool is odd; dropping one random point (index {victim})");
        pooled.remove(victim);
        dropped_one = true;
    }
    let n = pooled.len();
    let labels: Vec<bool> = pooled.iter().map(|(_, g)| *g).collect();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(pooled[i].0, pooled[j].0);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let exact = n <= EXACT_MATCHING_MAX;
    let pairs = if exact {
        exact_matching(&dist)
    } else {
        greedy_matching(&dist)
    };
    let count_cross =
        |labels: &[bool]| pairs.iter().filter(|&&(i, j)| labels[i] != labels[j]).count();
    let statistic = count_cross(&labels);
    let mut at_or_below = 0usize;
    let mut null_sum = 0usize;
    let mut perm_labels = labels.clone();
    use rand::seq::SliceRandom;
    for _ in 0..n_perm {
        perm_labels.shuffle(&mut rng);
        let s = count_cross(&perm_labels);
        null_sum += s;
        if s <= statistic {
            at_or_below += 1;
        }
    }
    let p_value = (1 + at_or_below) as f64 / (1 + n_perm) as f64;
    Ok(CrossMatchResult {
        statistic,
        p_value,
        n_perm,
        null_mean: null_sum as f64 / n_perm.max(1) as f64,
        dropped_one,
        exact_matching: exact,
    })
}

// ---------------------------------------------------------------------------
// phenotype alignment and reproduction verdict
// ---------------------------------------------------------------------------

/// Hungarian algorithm (shortest augmenting paths with potentials) on a
/// square cost matrix; returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials, standard JV formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn label_centroids(reps: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    let width = reps[0].len();
    let mut sums = vec![vec![0.0; width]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in reps.iter().zip(labels) {
        for (s, v) in sums[l].iter_mut().zip(r) {
            *s += v;
        }
        counts[l] += 1;
    }
    for (c, s) in counts.iter().zip(sums.iter_mut()) {
        if *c == 0 {
            return Err(SlacError::Cluster("empty phenotype".into()));
        }
        s.iter_mut().for_each(|v| *v /= *c as f64);
    }
    Ok(sums)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhenotypeComparison {
    /// For each cohort-A phenotype, the matched cohort-B phenotype.
    pub matching: Vec<usize>,
    pub per_phenotype: Vec<CrossMatchResult>,
    /// All per-phenotype p-values above 0.05.
    pub reproduced: bool,
}

/// Align cluster indices across cohorts by Hungarian assignment on centroid
/// distances, then cross-match each matched phenotype's two member sets.
/// Verdict "reproduced" iff every per-phenotype p > 0.05.
pub fn compare_phenotype_distributions(
    reps_a: &[Vec<f64>],
    labels_a: &[usize],
    reps_b: &[Vec<f64>],
    labels_b: &[usize],
    n_perm: usize,
    seed: u64,
) -> Result<PhenotypeComparison> {
    let ka = labels_a.iter().max().map_or(0, |m| m + 1);
    let kb = labels_b.iter().max().map_or(0, |m| m + 1);
    if ka != kb {
        return Err(SlacError::CohortMismatch(format!(
            "phenotype counts differ: {ka} vs {kb}"
        )));
    }
    let ca = label_centroids(reps_a, labels_a, ka)?;
    let cb = label_centroids(reps_b, labels_b, kb)?;
    let cost: Vec<Vec<f64>> = ca
        .iter()
        .map(|a| cb.iter().map(|b| euclidean(a, b)).collect())
        .collect();
    let matching = hungarian(&cost);
    let mut per_phenotype = Vec::with_capacity(ka);
    for (a_label, &b_label) in matching.iter().enumerate() {
        let members_a: Vec<Vec<f64>> = reps_a
            .iter()
            .zip(labels_a)
            .filter(|(_, &l)| l == a_label)
            .map(|(r, _)| r.clone())
            .collect();
        let members_b: Vec<Vec<f64>> = reps_b
            .iter()
            .zip(labels_b)
            .filter(|(_, &l)| l == b_label)
            .map(|(r, _)| r.clone())
            .collect();
        per_phenotype.push(crossmatch_test(
            &members_a,
            &members_b,
            n_perm,
            mix_seed(seed, 0xCA_0000 + a_label as u64),
        )?);
    }
    let reproduced = per_phenotype.iter().all(|r| r.p_value > 0.05);
    Ok(PhenotypeComparison {
        matching,
        per_phenotype,
        reproduced,
    })
}

/// Agreement of predicted labels with a reference partition, after optimal
/// index alignment (useful when cluster indices are arbitrary).
pub fn aligned_accuracy(predicted: &[usize], reference: &[usize]) -> f64 {
    let kp = predicted.iter().max().map_or(0, |m| m + 1);
    let kr = reference.iter().max().map_or(0, |m| m + 1);
    let k = kp.max(kr);
    let mut overlap = vec![vec![0.0; k]; k];
    for (&p, &r) in predicted.iter().zip(reference) {
        overlap[p][r] += 1.0;
    }
    let max_overlap = predicted.len() as f64;
    let cost: Vec<Vec<f64>> = overlap
        .iter()
        .map(|row| row.iter().map(|&v| max_overlap - v).collect())
        .collect();
    let assignment = hungarian(&cost);
    let hits: f64 = assignment
        .iter()
        .enumerate()
        .map(|(p, &r)| overlap[p][r])
        .sum();
    hits / predicted.len() as f64
}

/// ARI convenience re-export point for report assembly.
pub fn label_agreement(a: &[usize], b: &[usize]) -> f64 {
    adjusted_rand_index(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn fold_plan_partitions_and_stratifies() {
        // 100 subjects, classes 70/20/10
        let labels: Vec<usize> = std::iter::repeat(0)
            .take(70)
            .chain(std::iter::repeat(1).take(20))
            .chain(std::iter::repeat(2).take(10))
            .collect();
        let plan = make_folds(&labels, 0.0, 10, 3).unwrap();
        assert!(plan.test.is_empty());
        let mut seen = vec![false; 100];
        for fold in &plan.folds {
            for &i in &fold.validation {
                assert!(!seen[i], "duplicate assignment of {i}");
                seen[i] = true;
            }
            // each fold holds 7/2/1 of each class
            let count = |c: usize| fold.validation.iter().filter(|&&i| labels[i] == c).count();
            assert_eq!(count(0), 7);
            assert_eq!(count(1), 2);
            assert_eq!(count(2), 1);
            // train = complement of validation within the pool
            assert_eq!(fold.train.len() + fold.validation.len(), 100);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn fold_plan_with_test_split_is_disjoint_and_deterministic() {
        let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
        let a = make_folds(&labels, 0.15, 10, 9).unwrap();
        let b = make_folds(&labels, 0.15, 10, 9).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.folds.len(), b.folds.len());
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.validation, fb.validation);
        }
        // test pool disjoint from folds; union covers everything
        let mut seen = vec![0usize; 120];
        for &i in &a.test {
            seen[i] += 1;
        }
        for fold in &a.folds {
            for &i in &fold.validation {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(a.test.len(), 18); // 15% of each 40-member class = 6 each
    }

    #[test]
    fn fold_plan_rejects_small_classes() {
        let labels: Vec<usize> = (0..25).map(|i| usize::from(i >= 20)).collect();
        let err = make_folds(&labels, 0.0, 10, 1).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn exact_matching_agrees_with_greedy_on_easy_cases_and_beats_it_generally() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let n = 2 * rng.gen_range(2..=6);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let mut dist = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    dist[i][j] = euclidean(&pts[i], &pts[j]);
                }
            }
            let weight = |pairs: &[(usize, usize)]| {
                pairs.iter().map(|&(i, j)| dist[i][j]).sum::<f64>()
            };
            let exact = weight(&exact_matching(&dist));
            let greedy = weight(&greedy_matching(&dist));
            assert!(exact <= greedy + 1e-12, "exact {exact} > greedy {greedy}");
        }
    }

    #[test]
    fn crossmatch_null_mean_matches_theory() {
        // exchangeable labels: E[cross pairs] = n_a * n_b / (N - 1)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let b: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let result = crossmatch_test(&a, &b, 4000, 5).unwrap();
        let theory = (10.0 * 10.0) / 19.0;
        assert!(
            (result.null_mean - theory).abs() < 0.15,
            "null mean {} vs theory {}",
            result.null_mean,
            theory
        );
        assert!(result.p_value > 0.0 && result.p_value <= 1.0);
        assert!(result.statistic <= 10);
    }

    #[test]
    fn crossmatch_power_on_separated_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let b: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![10.0 + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let result = crossmatch_test(&a, &b, 999, 3).unwrap();
        assert_eq!(result.statistic, 0);
        assert!(result.p_value <= 0.01, "p {}", result.p_value);
        assert!(!result.exact_matching);
    }

    #[test]
    fn crossmatch_is_input_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let b: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let r1 = crossmatch_test(&a, &b, 199, 11).unwrap();
        let mut a_rev = a.clone();
        a_rev.reverse();
        let mut b_rev = b.clone();
        b_rev.reverse();
        let r2 = crossmatch_test(&a_rev, &b_rev, 199, 11).unwrap();
        assert_eq!(r1.statistic, r2.statistic);
        assert_eq!(r1.p_value.to_bits(), r2.p_value.to_bits());
        assert!(r1.dropped_one);
    }

    #[test]
    fn crossmatch_rejects_empty_group() {
        assert!(crossmatch_test(&[], &[vec![1.0]], 10, 0).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_up_to_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let k = rng.gen_range(2..=5);
            let cost: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..k).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let assignment = hungarian(&cost);
            let total: f64 = assignment
                .iter()
                .enumerate()
                .map(|(i, &j)| cost[i][j])
                .sum();
            // brute force over permutations
            let mut perm: Vec<usize> = (0..k).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                if c < best {
                    best = c;
                }
            });
            assert_abs_diff_eq!(total, best, epsilon = 1e-9);
            // bijection
            let mut seen = vec![false; k];
            for &j in &assignment {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    fn permute(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, f);
            perm.swap(k, i);
        }
    }

    #[test]
    fn self_comparison_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // one cohort split randomly in half: same distribution by construction
        let mut reps = Vec::new();
        let mut labels = Vec::new();
        for cluster in 0..3usize {
            for _ in 0..40 {
                let center = cluster as f64 * 8.0;
                reps.push(vec![
                    center + rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
                labels.push(cluster);
            }
        }
        let order = crate::util::shuffled_indices(reps.len(), &mut rng_for(3, 1));
        let half = reps.len() / 2;
        let (mut ra, mut la, mut rb, mut lb) = (vec![], vec![], vec![], vec![]);
        for (pos, &i) in order.iter().enumerate() {
            if pos < half {
                ra.push(reps[i].clone());
                la.push(labels[i]);
            } else {
                rb.push(reps[i].clone());
                lb.push(labels[i]);
            }
        }
        let cmp = compare_phenotype_distributions(&ra, &la, &rb, &lb, 199, 21).unwrap();
        assert!(cmp.reproduced, "p-values: {:?}", cmp.per_phenotype.iter().map(|r| r.p_value).collect::<Vec<_>>());
        // matching is the identity here since clusters are far apart
        assert_eq!(cmp.matching, vec![0, 1, 2]);
    }

    #[test]
    fn mismatched_phenotype_counts_rejected() {
        let ra = vec![vec![0.0], vec![1.0]];
        let la = vec![0, 1];
        let rb = vec![vec![0.0], vec![1.0], vec![2.0]];
        let lb = vec![0, 1, 2];
        assert!(compare_phenotype_distributions(&ra, &la, &rb, &lb, 99, 0).is_err());
    }

    #[test]
    fn aligned_accuracy_handles_permuted_indices() {
        let reference = vec![0, 0, 1, 1, 2, 2];
        let predicted = vec![2, 2, 0, 0, 1, 1];
        assert_abs_diff_eq!(aligned_accuracy(&predicted, &reference), 1.0);
        let noisy = vec![2, 2, 0, 1, 1, 1];
        assert_abs_diff_eq!(aligned_accuracy(&noisy, &reference), 5.0 / 6.0);
    }
}
