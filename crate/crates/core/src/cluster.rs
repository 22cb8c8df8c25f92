//! K-means over representations and the internal validity indices used for
//! hyperparameter selection, plus the adjusted Rand index.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlacError};
use crate::numeric::mat::euclidean_sq;

/// Sentinel returned by `calinski_harabasz` when the within-cluster scatter
/// is numerically zero, so sweep tables stay total instead of erroring.
pub const CH_DEGENERATE_SENTINEL: f64 = 1e12;

const MAX_LLOYD_ITERS: usize = 300;

/// Fitted K-means model: centroids, per-point labels, and total
/// within-cluster squared distance.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// k x dim, row per centroid.
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// The three internal validity indices reported for each configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValidityScores {
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = euclidean_sq(point, centroid);
        if d < best_d {
            best_d = d;
            best = c; // strict < keeps ties at the lowest index
        }
    }
    (best, best_d)
}

/// Greedy k-means++ seeding: each new center is drawn from several
/// D^2-weighted candidates and the one minimizing the resulting potential
/// wins.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let n_candidates = 2 + (k as f64).ln().floor() as usize;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut dist_sq: Vec<f64> = points
        .iter()
        .map(|p| euclidean_sq(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist_sq.iter().sum();
        let mut best_candidate = None;
        for _ in 0..n_candidates {
            let idx = if total <= 0.0 {
                // all points coincide with a centroid; pick uniformly
                rng.gen_range(0..n)
            } else {
                let mut target = rng.gen_range(0.0..total);
                let mut chosen = n - 1;
                for (i, &d) in dist_sq.iter().enumerate() {
                    target -= d;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            let potential: f64 = points
                .iter()
                .zip(&dist_sq)
                .map(|(p, &d)| d.min(euclidean_sq(p, &points[idx])))
                .sum();
            match best_candidate {
                Some((_, best)) if potential >= best => {}
                _ => best_candidate = Some((idx, potential)),
            }
        }
        let (idx, _) = best_candidate.unwrap();
        centroids.push(points[idx].clone());
        let latest = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            let d = euclidean_sq(p, latest);
            if d < dist_sq[i] {
                dist_sq[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> ClusterModel {
    let n = points.len();
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let mut labels = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..MAX_LLOYD_ITERS {
        // assignment
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            inertia += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        debug_assert!(
            inertia <= prev_inertia + 1e-9 * (1.0 + prev_inertia.abs()),
            "Lloyd inertia increased: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;

        // empty-cluster repair: steal the point farthest from its centroid
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far_i, _) = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[labels[*i]] > 1)
                    .map(|(i, p)| (i, euclidean_sq(p, &centroids[labels[i]])))
                    .fold((usize::MAX, -1.0), |acc, (i, d)| {
                        if d > acc.1 {
                            (i, d)
                        } else {
                            acc
                        }
                    });
                counts[labels[far_i]] -= 1;
                labels[far_i] = c;
                counts[c] = 1;
                changed = true;
            }
        }

        // update
        let mut sums = vec![vec![0.0; dim]; k];
        for (i, p) in points.iter().enumerate() {
            for (s, v) in sums[labels[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (cc, s) in centroids[c].iter_mut().zip(&sums[c]) {
                *cc = s * inv;
            }
        }
        if !changed {
            break;
        }
    }
    hartigan_refine(points, k, &mut centroids, &mut labels);
    // final assignment against the returned centroids (self-consistency)
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest_centroid(p, &centroids);
        labels[i] = c;
        inertia += d;
    }
    ClusterModel {
        k,
        dim,
        centroids,
        labels,
        inertia,
    }
}

/// Single-point improvement sweeps after Lloyd converges: move a point to
/// another cluster when doing so lowers total inertia, accounting for the
/// centroid shifts. A stable solution under these moves is also stable under
/// Lloyd, so this only sharpens local optima; it never empties a cluster.
fn hartigan_refine(
    points: &[Vec<f64>],
    k: usize,
    centroids: &mut [Vec<f64>],
    labels: &mut [usize],
) {
    let n = points.len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut moved = false;
        for i in 0..n {
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let removal_gain = na / (na - 1.0) * euclidean_sq(&points[i], &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in 0..k {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let insertion_cost = nb / (nb + 1.0) * euclidean_sq(&points[i], &centroids[b]);
                let delta = insertion_cost - removal_gain;
                match best {
                    Some((_, d)) if delta >= d => {}
                    _ => best = Some((b, delta)),
                }
            }
            if let Some((b, delta)) = best {
                if delta < -1e-12 {
                    // incremental centroid updates
                    let na = counts[a] as f64;
                    let nb = counts[b] as f64;
                    for d in 0..points[i].len() {
                        centroids[a][d] = (centroids[a][d] * na - points[i][d]) / (na - 1.0);
                        centroids[b][d] = (centroids[b][d] * nb + points[i][d]) / (nb + 1.0);
                    }
                    counts[a] -= 1;
                    counts[b] += 1;
                    labels[i] = b;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Lloyd iterations from k-means++ seeding, best of `restarts` by inertia
/// (ties resolved toward the earlier restart). Assignment ties go to the
/// lowest cluster index.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 {
        return Err(SlacError::Cluster("k must be >= 1".into()));
    }
    if n < k {
        return Err(SlacError::Cluster(format!("{n} points cannot form {k} clusters")));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(SlacError::Cluster("points must be finite".into()));
    }
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let model = lloyd(points, k, &mut rng);
        if best.as_ref().map_or(true, |b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}

fn cluster_members(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

fn validate_labeling(points: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if points.len() != labels.len() {
        return Err(SlacError::Cluster("labels must cover every point".into()));
    }
    if points.is_empty() {
        return Err(SlacError::Cluster("no points".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let members = cluster_members(labels, k);
    if members.iter().any(Vec::is_empty) {
        return Err(SlacError::Cluster("every cluster index up to max must be nonempty".into()));
    }
    Ok(k)
}

/// Mean silhouette over points: (b - a) / max(a, b) with a the mean
/// intra-cluster distance (excluding self) and b the smallest mean distance
/// to another cluster. Singleton points contribute 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let k = validate_labeling(points, labels)?;
    if k < 2 {
        return Err(SlacError::Cluster("silhouette needs at least 2 clusters".into()));
    }
    let members = cluster_members(labels, k);
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if members[own].len() == 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        for &j in &members[own] {
            if j != i {
                a += euclidean_sq(&points[i], &points[j]).sqrt();
            }
        }
        a /= (members[own].len() - 1) as f64;
        let mut b = f64::INFINITY;
        for (c, m) in members.iter().enumerate() {
            if c == own {
                continue;
            }
            let mean = m
                .iter()
                .map(|&j| euclidean_sq(&points[i], &points[j]).sqrt())
                .sum::<f64>()
                / m.len() as f64;
            if mean < b {
                b = mean;
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// [trace(B)/(k-1)] / [trace(W)/(n-k)] about the global and cluster means.
/// trace(W) < 1e-30 returns `CH_DEGENERATE_SENTINEL`.
pub fn calinski_harabasz(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let k = validate_labeling(points, labels)?;
    let n = points.len();
    if k < 2 || k >= n {
        return Err(SlacError::Cluster(format!(
            "calinski-harabasz needs 2 <= k < n (k={k}, n={n})"
        )));
    }
    let dim = points[0].len();
    let members = cluster_members(labels, k);
    let mut global = vec![0.0; dim];
    for p in points {
        for (g, v) in global.iter_mut().zip(p) {
            *g += v;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let mut trace_b = 0.0;
    let mut trace_w = 0.0;
    for m in &members {
        let mut centroid = vec![0.0; dim];
        for &i in m {
            for (c, v) in centroid.iter_mut().zip(&points[i]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= m.len() as f64);
        trace_b += m.len() as f64 * euclidean_sq(&centroid, &global);
        for &i in m {
            trace_w += euclidean_sq(&points[i], &centroid);
        }
    }
    if trace_w < 1e-30 {
        return Ok(CH_DEGENERATE_SENTINEL);
    }
    Ok((trace_b / (k - 1) as f64) / (trace_w / (n - k) as f64))
}

/// (1/k) sum_i max_{j != i} (s_i + s_j) / d_ij with s the mean member
/// distance to the centroid and d_ij the centroid distance.
pub fn davies_bouldin(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let k = validate_labeling(points, labels)?;
    if k < 2 {
        return Err(SlacError::Cluster("davies-bouldin needs at least 2 clusters".into()));
    }
    let dim = points[0].len();
    let members = cluster_members(labels, k);
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut spread = vec![0.0; k];
    for (c, m) in members.iter().enumerate() {
        for &i in m {
            for (cc, v) in centroids[c].iter_mut().zip(&points[i]) {
                *cc += v;
            }
        }
        centroids[c].iter_mut().for_each(|v| *v /= m.len() as f64);
        spread[c] = m
            .iter()
            .map(|&i| euclidean_sq(&points[i], &centroids[c]).sqrt())
            .sum::<f64>()
            / m.len() as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = euclidean_sq(&centroids[i], &centroids[j]).sqrt();
            if d <= 0.0 {
                return Err(SlacError::Cluster(format!(
                    "clusters {i} and {j} have coincident centroids"
                )));
            }
            let ratio = (spread[i] + spread[j]) / d;
            if ratio > worst {
                worst = ratio;
            }
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// All three indices at once.
pub fn validity_scores(points: &[Vec<f64>], labels: &[usize]) -> Result<ValidityScores> {
    Ok(ValidityScores {
        silhouette: silhouette_score(points, labels)?,
        calinski_harabasz: calinski_harabasz(points, labels)?,
        davies_bouldin: davies_bouldin(points, labels)?,
    })
}

/// Adjusted Rand index between two partitions of the same items.
/// Returns 1.0 when the chance-corrected denominator vanishes (e.g. both
/// partitions are single clusters).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same items");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for i in 0..n {
        table[a[i]][b[i]] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut sum_ij = 0.0;
    let mut row = vec![0u64; ka];
    let mut col = vec![0u64; kb];
    for (i, r) in table.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            sum_ij += choose2(v);
            row[i] += v;
            col[j] += v;
        }
    }
    let sum_a: f64 = row.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = col.iter().map(|&v| choose2(v)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / denom
}
