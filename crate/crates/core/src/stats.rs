//! Cluster characterization: rank tests, hourly summaries with confidence
//! intervals, and PCA projection of learned representations.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::CohortDataset;
use crate::error::{Result, SlacError};

/// 95% normal quantile used for the confidence intervals.
pub const Z95: f64 = 1.96;

// ---------------------------------------------------------------------------
// chi-square upper tail via the regularized incomplete gamma function
// ---------------------------------------------------------------------------

/// Lanczos approximation of ln Gamma(x), x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for (j, &c) in COEFFS.iter().enumerate() {
        ser += c / (x + 1.0 + j as f64);
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion
/// (valid and fast for x < a + 1).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = 1.0;
    loop {
        term *= x / (a + n);
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
        n += 1.0;
        if n > 10_000.0 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by Lentz continued fraction
/// (valid for x >= a + 1).
fn gamma_q_contfrac(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    let mut i = 1.0;
    loop {
        let an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
        i += 1.0;
        if i > 10_000.0 {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper-tail probability of a chi-square distribution with `df` degrees of
/// freedom: P(X > x).
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    assert!(df >= 1, "chi2_sf needs df >= 1");
    if x <= 0.0 {
        return 1.0;
    }
    let a = df as f64 / 2.0;
    let half = x / 2.0;
    if half < a + 1.0 {
        (1.0 - gamma_p_series(a, half)).clamp(0.0, 1.0)
    } else {
        gamma_q_contfrac(a, half).clamp(0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Kruskal-Wallis
// ---------------------------------------------------------------------------

/// Mid-ranks of the pooled sample (ties share the average rank).
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Kruskal-Wallis H with tie correction and a chi-square(groups - 1)
/// p-value. All pooled values identical yields (H = 0, p = 1) by convention.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    if groups.len() < 2 {
        return Err(SlacError::Stats("kruskal-wallis needs at least 2 groups".into()));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(SlacError::Stats("kruskal-wallis groups must be nonempty".into()));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    if n < 3 {
        return Err(SlacError::Stats("kruskal-wallis needs at least 3 observations".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(SlacError::Stats("kruskal-wallis values must be finite".into()));
    }
    let ranks = mid_ranks(&pooled);
    let nf = n as f64;

    // tie correction: 1 - sum(t^3 - t) / (N^3 - N)
    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - tie_sum / (nf * nf * nf - nf);
    if correction <= 0.0 {
        // every pooled value identical
        return Ok((0.0, 1.0));
    }

    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let mean_rank: f64 = ranks[offset..offset + g.len()].iter().sum::<f64>() / g.len() as f64;
        let dev = mean_rank - (nf + 1.0) / 2.0;
        h += g.len() as f64 * dev * dev;
        offset += g.len();
    }
    h *= 12.0 / (nf * (nf + 1.0));
    h /= correction;
    let p = chi2_sf(h, groups.len() - 1);
    Ok((h, p))
}

// ---------------------------------------------------------------------------
// hourly means with confidence intervals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HourlyCi {
    pub cluster: usize,
    pub hour: usize,
    pub mean: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_obs: usize,
}

/// Per (cluster, hour) mean and 95% CI for one feature. Bins with a single
/// subject report the mean with null CI bounds; empty bins stay visibly
/// empty (missingness is reported, never filled).
pub fn hourly_mean_ci(
    cohort: &CohortDataset,
    labels: &[usize],
    feature: &str,
) -> Result<Vec<HourlyCi>> {
    let fi = cohort
        .feature_index(feature)
        .ok_or_else(|| SlacError::Stats(format!("unknown feature {feature}")))?;
    if labels.len() != cohort.n_episodes() {
        return Err(SlacError::Stats("labels must cover the cohort".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let horizon = crate::data::HORIZON_HOURS;
    // per (cluster, hour): subject-level bin means
    let mut cells: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); horizon]; k];
    for (e, &label) in cohort.episodes.iter().zip(labels) {
        let mut bins: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for t in &e.triplets {
            if t.feature == fi {
                let hour = t.time.floor() as usize;
                if hour < horizon {
                    let slot = bins.entry(hour).or_insert((0.0, 0));
                    slot.0 += t.value;
                    slot.1 += 1;
                }
            }
        }
        for (hour, (sum, count)) in bins {
            cells[label][hour].push(sum / count as f64);
        }
    }
    let mut out = Vec::with_capacity(k * horizon);
    for (cluster, hours) in cells.iter().enumerate() {
        for (hour, values) in hours.iter().enumerate() {
            let n_obs = values.len();
            let (mean, ci_low, ci_high) = match n_obs {
                0 => (None, None, None),
                1 => (Some(values[0]), None, None),
                _ => {
                    let m = values.iter().sum::<f64>() / n_obs as f64;
                    let var =
                        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n_obs - 1) as f64;
                    let half = Z95 * var.sqrt() / (n_obs as f64).sqrt();
                    (Some(m), Some(m - half), Some(m + half))
                }
            };
            out.push(HourlyCi {
                cluster,
                hour,
                mean,
                ci_low,
                ci_high,
                n_obs,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let (apj, aqj) = (a[p][j], a[q][j]);
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i][p], v[i][q]);
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    (eigvals, v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaProjection {
    /// n x n_components coordinates.
    pub coordinates: Vec<Vec<f64>>,
    /// Fraction of total variance captured by each kept component,
    /// non-increasing.
    pub explained_variance_ratio: Vec<f64>,
}

/// Project rows onto the top principal components of their covariance.
/// Component sign is fixed so the largest-magnitude loading is positive.
pub fn pca_project(rows: &[Vec<f64>], n_components: usize) -> Result<PcaProjection> {
    let n = rows.len();
    if n < 2 {
        return Err(SlacError::Stats("pca needs at least 2 rows".into()));
    }
    let p = rows[0].len();
    if p < n_components {
        return Err(SlacError::Stats(format!(
            "pca: {p} columns cannot yield {n_components} components"
        )));
    }
    let mut means = vec![0.0; p];
    for r in rows {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; p]; p];
    for r in &centered {
        for i in 0..p {
            for j in i..p {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..p {
        for j in i..p {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    let total_var: f64 = (0..p).map(|i| cov[i][i]).sum();
    if total_var < 1e-30 {
        return Err(SlacError::Stats("pca: data has zero variance".into()));
    }
    let (eigvals, eigvecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut evr = Vec::with_capacity(n_components);
    for &idx in order.iter().take(n_components) {
        let mut comp: Vec<f64> = (0..p).map(|i| eigvecs[i][idx]).collect();
        // sign convention: largest-magnitude loading positive
        let mut max_i = 0;
        for (i, c) in comp.iter().enumerate() {
            if c.abs() > comp[max_i].abs() {
                max_i = i;
            }
        }
        if comp[max_i] < 0.0 {
            comp.iter_mut().for_each(|c| *c = -*c);
        }
        evr.push((eigvals[idx] / total_var).max(0.0));
        components.push(comp);
    }
    let coordinates: Vec<Vec<f64>> = centered
        .iter()
        .map(|r| {
            components
                .iter()
                .map(|c| r.iter().zip(c).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        coordinates,
        explained_variance_ratio: evr,
    })
}

// ---------------------------------------------------------------------------
// characterization report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticSummaryRow {
    pub cluster: usize,
    pub feature: String,
    /// Proportion for one-hot slots, plain mean otherwise.
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    /// Count of set entries, present for one-hot slots.
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: String,
    pub h: Option<f64>,
    pub p: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeSummary {
    /// Per cluster: (deaths, subjects with a mortality flag, rate).
    pub mortality: Vec<(usize, usize, f64)>,
    /// Per cluster: (n, mean, sd) of ICU length of stay.
    pub icu_los: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhenotypeReport {
    pub n_subjects: usize,
    pub cluster_sizes: Vec<usize>,
    pub cluster_proportions: Vec<f64>,
    pub static_summaries: Vec<StaticSummaryRow>,
    pub temporal: Vec<HourlyCi>,
    pub tests: Vec<FeatureTest>,
    pub outcomes: Option<OutcomeSummary>,
    pub alpha: f64,
}

fn mean_sd_sample(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-subject mean of a feature over its observed bins; None when the
/// subject never observed it.
fn subject_feature_means(cohort: &CohortDataset, fi: usize) -> Vec<Option<f64>> {
    cohort
        .episodes
        .iter()
        .map(|e| {
            let (mut sum, mut count) = (0.0, 0usize);
            for t in &e.triplets {
                if t.feature == fi {
                    sum += t.value;
                    count += 1;
                }
            }
            if count == 0 {
                None
            } else {
                Some(sum / count as f64)
            }
        })
        .collect()
}

/// Assemble the full per-cluster report: static summaries, Kruskal-Wallis
/// tests (time-series features reduced to per-subject means over observed
/// bins), hourly series, and outcome summaries when metadata is present.
pub fn characterize(cohort: &CohortDataset, labels: &[usize], alpha: f64) -> Result<PhenotypeReport> {
    if labels.len() != cohort.n_episodes() {
        return Err(SlacError::Stats("labels must cover the cohort".into()));
    }
    let n = cohort.n_episodes();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let proportions: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();

    let mut static_summaries = Vec::new();
    let mut tests = Vec::new();
    for (j, slot) in cohort.static_schema.iter().enumerate() {
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (e, &l) in cohort.episodes.iter().zip(labels) {
            groups[l].push(e.static_vector[j]);
        }
        for (cluster, g) in groups.iter().enumerate() {
            let (mean, sd) = mean_sd_sample(g);
            static_summaries.push(StaticSummaryRow {
                cluster,
                feature: slot.name.clone(),
                mean,
                sd,
                n: g.len(),
                count: slot
                    .one_hot
                    .then(|| g.iter().filter(|&&v| v > 0.5).count()),
            });
        }
        let (h, p) = match kruskal_wallis(&groups) {
            Ok((h, p)) => (Some(h), Some(p)),
            Err(_) => (None, None),
        };
        tests.push(FeatureTest {
            feature: slot.name.clone(),
            h,
            p,
            significant: p.map_or(false, |p| p < alpha),
        });
    }

    let mut temporal = Vec::new();
    for (fi, name) in cohort.feature_vocab.iter().enumerate() {
        temporal.extend(hourly_mean_ci(cohort, labels, name)?);
        // one value per subject: mean over observed bins
        let per_subject = subject_feature_means(cohort, fi);
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
        for (v, &l) in per_subject.iter().zip(labels) {
            if let Some(v) = v {
                groups[l].push(*v);
            }
        }
        let (h, p) = if groups.iter().all(|g| !g.is_empty()) {
            match kruskal_wallis(&groups) {
                Ok((h, p)) => (Some(h), Some(p)),
                Err(_) => (None, None),
            }
        } else {
            (None, None)
        };
        tests.push(FeatureTest {
            feature: name.clone(),
            h,
            p,
            significant: p.map_or(false, |p| p < alpha),
        });
    }

    // outcome summaries from metadata, when present
    let any_mortality = cohort
        .episodes
        .iter()
        .any(|e| e.metadata.contains_key("mortality"));
    let any_los = cohort
        .episodes
        .iter()
        .any(|e| e.metadata.contains_key("icu_los"));
    let outcomes = if any_mortality || any_los {
        let mut mortality = Vec::new();
        let mut icu_los = Vec::new();
        for cluster in 0..k {
            let members: Vec<&crate::data::EpisodeRecord> = cohort
                .episodes
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == cluster)
                .map(|(e, _)| e)
                .collect();
            let flags: Vec<f64> = members
                .iter()
                .filter_map(|e| e.metadata.get("mortality"))
                .filter_map(|v| v.parse::<f64>().ok())
                .collect();
            let deaths = flags.iter().filter(|&&v| v > 0.5).count();
            let rate = if flags.is_empty() {
                f64::NAN
            } else {
                deaths as f64 / flags.len() as f64
            };
            mortality.push((deaths, flags.len(), rate));
            let los: Vec<f64> = members
                .iter()
                .filter_map(|e| e.metadata.get("icu_los"))
                .filter_map(|v| v.parse::<f64>().ok())
                .collect();
            let (mean, sd) = mean_sd_sample(&los);
            icu_los.push((los.len(), mean, sd));
        }
        Some(OutcomeSummary { mortality, icu_los })
    } else {
        None
    };

    Ok(PhenotypeReport {
        n_subjects: n,
        cluster_sizes: sizes,
        cluster_proportions: proportions,
        static_summaries,
        temporal,
        tests,
        outcomes,
        alpha,
    })
}

// ---------------------------------------------------------------------------
// CSV emitters (the plotting surface)
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_static_summary_csv<W: Write>(report: &PhenotypeReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cluster", "feature", "mean", "sd", "n"])?;
    for row in &report.static_summaries {
        w.write_record([
            row.cluster.to_string(),
            row.feature.clone(),
            row.mean.to_string(),
            row.sd.to_string(),
            row.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_temporal_csv<W: Write>(report: &PhenotypeReport, features: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cluster", "feature", "hour", "mean", "ci_low", "ci_high", "n"])?;
    let horizon = crate::data::HORIZON_HOURS;
    for (block, row) in report.temporal.iter().enumerate() {
        let feature = &features[block / horizon / report.cluster_sizes.len()];
        w.write_record([
            row.cluster.to_string(),
            feature.clone(),
            row.hour.to_string(),
            fmt_opt(row.mean),
            fmt_opt(row.ci_low),
            fmt_opt(row.ci_high),
            row.n_obs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tests_csv<W: Write>(report: &PhenotypeReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature", "H", "p"])?;
    for t in &report.tests {
        w.write_record([
            t.feature.clone(),
            fmt_opt(t.h),
            fmt_opt(t.p),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pca_csv<W: Write>(
    episode_ids: &[String],
    projection: &PcaProjection,
    labels: &[usize],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode_id", "pc1", "pc2", "cluster"])?;
    for i in 0..episode_ids.len() {
        w.write_record([
            episode_ids[i].clone(),
            projection.coordinates[i][0].to_string(),
            projection.coordinates[i][1].to_string(),
            labels[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct textbook implementation used as the rank oracle.
    pub(crate) fn kw_oracle(groups: &[Vec<f64>]) -> f64 {
        let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
        let n = pooled.len() as f64;
        // naive mid-ranks
        let rank = |v: f64| {
            let less = pooled.iter().filter(|&&x| x < v).count() as f64;
            let equal = pooled.iter().filter(|&&x| x == v).count() as f64;
            less + (equal + 1.0) / 2.0
        };
        let mut h = 0.0;
        for g in groups {
            let mean_rank = g.iter().map(|&v| rank(v)).sum::<f64>() / g.len() as f64;
            h += g.len() as f64 * (mean_rank - (n + 1.0) / 2.0).powi(2);
        }
        h *= 12.0 / (n * (n + 1.0));
        let mut tie_sum = 0.0;
        let mut seen: Vec<f64> = Vec::new();
        for &v in &pooled {
            if seen.contains(&v) {
                continue;
            }
            seen.push(v);
            let t = pooled.iter().filter(|&&x| x == v).count() as f64;
            tie_sum += t * t * t - t;
        }
        let corr = 1.0 - tie_sum / (n * n * n - n);
        if corr <= 0.0 {
            0.0
        } else {
            h / corr
        }
    }

    /// Adaptive Simpson quadrature of the chi-square density on [0, x].
    /// For df = 1 the substitution t = u^2 removes the t^{-1/2} singularity.
    fn chi2_cdf_quadrature(x: f64, df: usize) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f((a + b) / 2.0) + f(b))
        }
        fn adapt(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = (a + b) / 2.0;
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth > 48 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                adapt(f, a, m, left, tol / 2.0, depth + 1)
                    + adapt(f, m, b, right, tol / 2.0, depth + 1)
            }
        }
        let a = df as f64 / 2.0;
        let log_norm = -a * (2.0f64).ln() - ln_gamma(a);
        if df == 1 {
            let integrand = move |u: f64| 2.0 * (log_norm - u * u / 2.0).exp();
            let hi = x.sqrt();
            adapt(&integrand, 0.0, hi, simpson(&integrand, 0.0, hi), 1e-14, 0)
        } else {
            let pdf = move |t: f64| {
                if t <= 0.0 {
                    0.0
                } else {
                    ((a - 1.0) * t.ln() - t / 2.0 + log_norm).exp()
                }
            };
            adapt(&pdf, 0.0, x, simpson(&pdf, 0.0, x), 1e-14, 0)
        }
    }

    #[test]
    fn kw_hand_case() {
        let groups = vec![
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ];
        let (h, p) = kruskal_wallis(&groups).unwrap();
        assert_abs_diff_eq!(h, 7.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p, (-3.6f64).exp(), epsilon = 1e-10);
        assert!((p - 0.0273).abs() < 1e-4);
    }

    #[test]
    fn kw_identical_groups() {
        let groups = vec![vec![1.0, 2.0, 3.0]; 3];
        let (h, p) = kruskal_wallis(&groups).unwrap();
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kw_all_identical_convention() {
        let groups = vec![vec![5.0, 5.0], vec![5.0, 5.0, 5.0]];
        let (h, p) = kruskal_wallis(&groups).unwrap();
        assert_eq!((h, p), (0.0, 1.0));
    }

    #[test]
    fn kw_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let groups: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..rng.gen_range(3..8)).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let (h1, _) = kruskal_wallis(&groups).unwrap();
            let transformed: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| g.iter().map(|&v| v.exp()).collect())
                .collect();
            let (h2, _) = kruskal_wallis(&transformed).unwrap();
            assert_eq!(h1.to_bits(), h2.to_bits());
        }
    }

    #[test]
    fn kw_matches_rank_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let groups: Vec<Vec<f64>> = (0..rng.gen_range(2..5))
                .map(|_| {
                    (0..rng.gen_range(2..7))
                        .map(|_| (rng.gen_range(0..5) as f64) / 2.0) // ties likely
                        .collect()
                })
                .collect();
            if groups.iter().flatten().count() < 3 {
                continue;
            }
            let (h, _) = kruskal_wallis(&groups).unwrap();
            let oracle = kw_oracle(&groups);
            assert_abs_diff_eq!(h, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn chi2_sf_matches_quadrature() {
        for df in 1..=10usize {
            for &x in &[0.1, 0.5, 1.0, 2.5, 5.0, 7.2, 10.0, 20.0, 35.0, 50.0] {
                let sf = chi2_sf(x, df);
                let oracle = 1.0 - chi2_cdf_quadrature(x, df);
                assert!(
                    (sf - oracle).abs() < 1e-10,
                    "df {df} x {x}: {sf} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn chi2_sf_closed_form_even_df() {
        // df = 2: sf = exp(-x/2)
        for &x in &[0.5, 1.0, 3.6, 10.0] {
            assert_abs_diff_eq!(chi2_sf(x, 2), (-x / 2.0).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn hourly_ci_hand_case() {
        use crate::data::{EpisodeRecord, ObservationTriplet};
        let mut cohort = CohortDataset {
            feature_vocab: vec!["f".into()],
            ..CohortDataset::default()
        };
        for (id, value) in [("a", 0.0), ("b", 2.0)] {
            cohort.episodes.push(EpisodeRecord {
                episode_id: id.into(),
                triplets: vec![ObservationTriplet {
                    time: 3.5,
                    feature: 0,
                    value,
                }],
                ..EpisodeRecord::default()
            });
        }
        let rows = hourly_mean_ci(&cohort, &[0, 0], "f").unwrap();
        let row = rows.iter().find(|r| r.hour == 3).unwrap();
        assert_eq!(row.n_obs, 2);
        assert_abs_diff_eq!(row.mean.unwrap(), 1.0);
        // sample sd = sqrt(2), half width = 1.96 * sqrt(2) / sqrt(2) = 1.96
        assert_abs_diff_eq!(row.ci_low.unwrap(), 1.0 - 1.96, epsilon = 1e-12);
        assert_abs_diff_eq!(row.ci_high.unwrap(), 1.0 + 1.96, epsilon = 1e-12);
        // empty bin visible with null stats
        let empty = rows.iter().find(|r| r.hour == 7).unwrap();
        assert_eq!(empty.n_obs, 0);
        assert!(empty.mean.is_none());
        // equal values -> zero-width CI
        let mut c2 = cohort.clone();
        c2.episodes[1].triplets[0].value = 0.0;
        let rows2 = hourly_mean_ci(&c2, &[0, 0], "f").unwrap();
        let row2 = rows2.iter().find(|r| r.hour == 3).unwrap();
        assert_abs_diff_eq!(row2.ci_low.unwrap(), row2.ci_high.unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn pca_line_and_rank2() {
        // data on a line in 2-D
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let proj = pca_project(&rows, 2).unwrap();
        assert!(proj.explained_variance_ratio[0] >= 1.0 - 1e-9);
        assert!(proj.explained_variance_ratio[1] <= proj.explained_variance_ratio[0]);
        assert!(proj.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);

        // intrinsically 2-D data embedded in 5-D: pairwise distances preserved
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let basis: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 1.0, 0.0, 0.5],
            vec![0.0, 1.0, -1.0, 0.5, 0.0],
        ];
        let latent: Vec<(f64, f64)> = (0..12)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let rows: Vec<Vec<f64>> = latent
            .iter()
            .map(|&(a, b)| (0..5).map(|j| a * basis[0][j] + b * basis[1][j]).collect())
            .collect();
        let proj = pca_project(&rows, 2).unwrap();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let orig = crate::numeric::mat::euclidean(&rows[i], &rows[j]);
                let proj_d = crate::numeric::mat::euclidean(
                    &proj.coordinates[i],
                    &proj.coordinates[j],
                );
                assert_abs_diff_eq!(orig, proj_d, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pca_zero_variance_errors() {
        let rows = vec![vec![1.0, 1.0]; 4];
        assert!(pca_project(&rows, 2).is_err());
    }

    #[test]
    fn characterize_counts_and_proportions() {
        use crate::data::{EpisodeRecord, ObservationTriplet, StaticSlot};
        let mut cohort = CohortDataset {
            feature_vocab: vec!["f".into()],
            static_schema: vec![StaticSlot {
                name: "age".into(),
                source: "age".into(),
                one_hot: false,
            }],
            ..CohortDataset::default()
        };
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= 3)).collect();
        for i in 0..10 {
            cohort.episodes.push(EpisodeRecord {
                episode_id: format!("e{i}"),
                static_vector: vec![i as f64],
                triplets: vec![ObservationTriplet {
                    time: 0.5,
                    feature: 0,
                    value: i as f64,
                }],
                ..EpisodeRecord::default()
            });
        }
        let report = characterize(&cohort, &labels, 0.05).unwrap();
        assert_eq!(report.cluster_sizes, vec![3, 7]);
        assert_abs_diff_eq!(report.cluster_proportions[0], 0.3);
        assert_abs_diff_eq!(report.cluster_proportions[1], 0.7);
        assert!(report.outcomes.is_none());
        assert_eq!(report.tests.len(), 2); // one static slot + one ts feature
    }
}
