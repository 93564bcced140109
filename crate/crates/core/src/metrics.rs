//! Comparison metrics between the multivariate and univariate analyses:
//! coverage, log relative absolute bias, log relative interval length,
//! cluster-bootstrap regressions, and SUCRA rankings.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

const Z_95: f64 = 1.959964;

/// A closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

/// One variate of one replicate: the truth, both point estimates and both
/// intervals, plus the replicate's size covariates for the regressions.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub meta_id: String,
    pub variate_id: String,
    pub mu_true: f64,
    pub est_m: f64,
    pub est_u: f64,
    pub ci_m: Interval,
    pub ci_u: Interval,
    pub n_estimates: usize,
    pub n_variates: usize,
}

/// Which method's interval/estimate a metric refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Multivariate,
    Univariate,
}

/// Why a row was excluded from a log-scale metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Exclusion {
    /// A point estimate coincides exactly with the truth; the log relative
    /// bias is undefined and the row is excluded with this audit flag
    /// rather than clamped.
    ZeroBias,
    /// An interval has zero width.
    ZeroWidth,
}

/// Proportion of rows whose chosen interval contains the truth, with a
/// Wilson 95% interval.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageResult {
    pub proportion: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: usize,
    pub total: usize,
}

fn wilson(covered: usize, total: usize) -> (f64, f64) {
    let n = total as f64;
    let p = covered as f64 / n;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z_95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Coverage of `mu_true` by the chosen side's intervals.
pub fn coverage(rows: &[ComparisonRow], side: Side) -> Result<CoverageResult> {
    if rows.is_empty() {
        return Err(Error::Domain("coverage requires at least one row".into()));
    }
    let covered = rows
        .iter()
        .filter(|r| {
            let ci = match side {
                Side::Multivariate => &r.ci_m,
                Side::Univariate => &r.ci_u,
            };
            ci.contains(r.mu_true)
        })
        .count();
    let total = rows.len();
    let (lower, upper) = wilson(covered, total);
    Ok(CoverageResult { proportion: covered as f64 / total as f64, lower, upper, covered, total })
}

/// ln|μ − μ̂_m| − ln|μ − μ̂_u|; an exact tie with the truth on either side
/// excludes the row.
pub fn log_rel_abs_bias(row: &ComparisonRow) -> std::result::Result<f64, Exclusion> {
    let err_m = (row.mu_true - row.est_m).abs();
    let err_u = (row.mu_true - row.est_u).abs();
    if err_m == 0.0 || err_u == 0.0 {
        return Err(Exclusion::ZeroBias);
    }
    Ok(err_m.ln() - err_u.ln())
}

/// ln(width_m) − ln(width_u); zero-width intervals exclude the row.
pub fn log_rel_length(row: &ComparisonRow) -> std::result::Result<f64, Exclusion> {
    let wm = row.ci_m.width();
    let wu = row.ci_u.width();
    if wm <= 0.0 || wu <= 0.0 {
        return Err(Exclusion::ZeroWidth);
    }
    Ok(wm.ln() - wu.ln())
}

// ---------------------------------------------------------------------------
// SUCRA
// ---------------------------------------------------------------------------

/// Per-draw ranks of the variates by |correlation| magnitude, rank 1 for the
/// largest (ties broken by variate index, which is measure-zero for
/// continuous draws). Input draws are on the Fisher-z scale.
pub fn ranks_by_magnitude(mu_draws: &[Vec<f64>]) -> Vec<Vec<usize>> {
    mu_draws
        .iter()
        .map(|draw| {
            let p = draw.len();
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| {
                let ma = draw[a].tanh().abs();
                let mb = draw[b].tanh().abs();
                mb.partial_cmp(&ma).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            let mut ranks = vec![0usize; p];
            for (rank0, &idx) in order.iter().enumerate() {
                ranks[idx] = rank0 + 1;
            }
            ranks
        })
        .collect()
}

/// Surface under the cumulative ranking curve: 1 when a variate ranks first
/// in every draw, 0 when always last. Each rank row must be a permutation of
/// 1..=p.
pub fn sucra(rank_draws: &[Vec<usize>], p: usize) -> Result<Vec<f64>> {
    if p < 2 {
        return Err(Error::Domain("sucra requires at least 2 variates".into()));
    }
    if rank_draws.is_empty() {
        return Err(Error::Domain("sucra requires at least one rank draw".into()));
    }
    let mut rank_sums = vec![0.0f64; p];
    for (i, row) in rank_draws.iter().enumerate() {
        if row.len() != p {
            return Err(Error::Consistency(format!(
                "rank draw {i} has {} entries, expected {p}",
                row.len()
            )));
        }
        let mut seen = vec![false; p];
        for &rank in row {
            if rank < 1 || rank > p || seen[rank - 1] {
                return Err(Error::Consistency(format!(
                    "rank draw {i} is not a permutation of 1..={p}"
                )));
            }
            seen[rank - 1] = true;
        }
        for (j, &rank) in row.iter().enumerate() {
            rank_sums[j] += rank as f64;
        }
    }
    let s = rank_draws.len() as f64;
    Ok(rank_sums
        .iter()
        .map(|&sum| (p as f64 - sum / s) / (p as f64 - 1.0))
        .collect())
}

// ---------------------------------------------------------------------------
// Cluster bootstrap for means and regression coefficients
// ---------------------------------------------------------------------------

const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Mean of pooled values with a percentile CI from resampling whole clusters
/// with replacement.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapMean {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_values: usize,
    pub n_clusters: usize,
}

/// `values_by_cluster`: one inner vector per cluster (empty clusters are
/// dropped). The mean is over pooled values; the CI resamples clusters.
pub fn cluster_bootstrap_mean(values_by_cluster: &[Vec<f64>], seed: u64) -> Result<BootstrapMean> {
    let clusters: Vec<&Vec<f64>> = values_by_cluster.iter().filter(|c| !c.is_empty()).collect();
    let n_clusters = clusters.len();
    if n_clusters < 2 {
        return Err(Error::Domain(
            "cluster bootstrap requires at least 2 non-empty clusters".into(),
        ));
    }
    let n_values: usize = clusters.iter().map(|c| c.len()).sum();
    let mean = clusters.iter().flat_map(|c| c.iter()).sum::<f64>() / n_values as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..n_clusters {
            let c = clusters[rng.random_range(0..n_clusters)];
            sum += c.iter().sum::<f64>();
            count += c.len();
        }
        if count > 0 {
            means.push(sum / count as f64);
        }
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap means must be finite"));
    let lower = crate::sampler::quantile(&means, 0.025);
    let upper = crate::sampler::quantile(&means, 0.975);
    Ok(BootstrapMean { mean, lower, upper, n_values, n_clusters })
}

/// Which log-scale metric a regression explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Bias,
    Length,
}

/// OLS of a log metric on the total numbers of estimates and variates, with
/// cluster-bootstrap percentile CIs (clusters = meta-analyses).
#[derive(Debug, Clone, Serialize)]
pub struct RegressionResult {
    /// (intercept, per additional estimate, per additional variate).
    pub coef: [f64; 3],
    pub ci: [(f64, f64); 3],
    /// exp of the coefficients: multiplicative change in the relative value.
    pub exp_coef: [f64; 3],
    pub exp_ci: [(f64, f64); 3],
    pub n_rows: usize,
    pub n_clusters: usize,
    pub resamples: usize,
    /// Bootstrap coefficient draws, for fitted-curve confidence bands.
    #[serde(skip)]
    pub coef_samples: Vec<[f64; 3]>,
}

fn ols_3(rows: &[(f64, f64, f64)]) -> Option<[f64; 3]> {
    // normal equations for y ~ 1 + x1 + x2
    let mut xtx = DMatrix::zeros(3, 3);
    let mut xty = DVector::zeros(3);
    for &(y, x1, x2) in rows {
        let x = [1.0, x1, x2];
        for i in 0..3 {
            for j in 0..3 {
                xtx[(i, j)] += x[i] * x[j];
            }
            xty[i] += x[i] * y;
        }
    }
    let chol = xtx.cholesky()?;
    let beta = chol.solve(&xty);
    let out: [f64; 3] = [beta[0], beta[1], beta[2]];
    out.iter().all(|b| b.is_finite()).then_some(out)
}

/// Regress the chosen metric on (n_estimates, n_variates). Rows whose metric
/// is excluded (zero bias / zero width) are skipped; at least 30 clusters of
/// surviving rows are required.
pub fn regress_metric(
    rows: &[ComparisonRow],
    response: Response,
    seed: u64,
) -> Result<RegressionResult> {
    let mut data: Vec<(f64, f64, f64)> = Vec::new();
    let mut cluster_of: Vec<usize> = Vec::new();
    let mut cluster_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for row in rows {
        let value = match response {
            Response::Bias => log_rel_abs_bias(row),
            Response::Length => log_rel_length(row),
        };
        let Ok(y) = value else { continue };
        let next = cluster_ids.len();
        let cid = *cluster_ids.entry(row.meta_id.as_str()).or_insert(next);
        cluster_of.push(cid);
        data.push((y, row.n_estimates as f64, row.n_variates as f64));
    }
    let n_clusters = cluster_ids.len();
    if n_clusters < 30 {
        return Err(Error::Domain(format!(
            "regression requires at least 30 clusters, got {n_clusters}"
        )));
    }
    let coef =
        ols_3(&data).ok_or_else(|| Error::Numerical("rank-deficient regression design".into()))?;

    // group row indices by cluster
    let mut by_cluster: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &cid) in cluster_of.iter().enumerate() {
        by_cluster[cid].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<[f64; 3]> = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut resample_rows: Vec<(f64, f64, f64)> = Vec::with_capacity(data.len());
    for _ in 0..BOOTSTRAP_RESAMPLES {
        resample_rows.clear();
        for _ in 0..n_clusters {
            let cid = rng.random_range(0..n_clusters);
            for &i in &by_cluster[cid] {
                resample_rows.push(data[i]);
            }
        }
        if let Some(beta) = ols_3(&resample_rows) {
            samples.push(beta);
        }
    }
    if samples.len() < BOOTSTRAP_RESAMPLES / 2 {
        return Err(Error::Numerical("most bootstrap resamples were rank-deficient".into()));
    }

    let mut ci = [(0.0, 0.0); 3];
    for k in 0..3 {
        let mut coord: Vec<f64> = samples.iter().map(|b| b[k]).collect();
        coord.sort_by(|a, b| a.partial_cmp(b).expect("coefficients must be finite"));
        ci[k] = (
            crate::sampler::quantile(&coord, 0.025),
            crate::sampler::quantile(&coord, 0.975),
        );
    }
    Ok(RegressionResult {
        coef,
        ci,
        exp_coef: [coef[0].exp(), coef[1].exp(), coef[2].exp()],
        exp_ci: [
            (ci[0].0.exp(), ci[0].1.exp()),
            (ci[1].0.exp(), ci[1].1.exp()),
            (ci[2].0.exp(), ci[2].1.exp()),
        ],
        n_rows: data.len(),
        n_clusters,
        resamples: samples.len(),
        coef_samples: samples,
    })
}

/// Predictor axis for fitted relative-length curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Estimates,
    Variates,
}

/// One point of a fitted curve with a pointwise 95% band.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub value: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Fitted mean relative value (exponentiated) along one predictor, holding
/// the other fixed, with pointwise percentile bands from the bootstrap
/// coefficient draws.
pub fn regression_curve(
    reg: &RegressionResult,
    predictor: Predictor,
    values: &[f64],
    other_value: f64,
) -> Vec<CurvePoint> {
    values
        .iter()
        .map(|&v| {
            let at = |b: &[f64; 3]| match predictor {
                Predictor::Estimates => b[0] + b[1] * v + b[2] * other_value,
                Predictor::Variates => b[0] + b[1] * other_value + b[2] * v,
            };
            let estimate = at(&reg.coef).exp();
            let mut draws: Vec<f64> = reg.coef_samples.iter().map(|b| at(b).exp()).collect();
            draws.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            CurvePoint {
                value: v,
                estimate,
                lower: crate::sampler::quantile(&draws, 0.025),
                upper: crate::sampler::quantile(&draws, 0.975),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Replicate-level evaluation assembly
// ---------------------------------------------------------------------------

/// Outcome of the multivariate fit of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FitStatus {
    Fitted { converged: bool },
    /// No projection dimension fits the estimate budget.
    Infeasible,
    Failed(String),
}

/// Everything the evaluation needs from one simulated replicate.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateOutcome {
    pub meta_id: String,
    pub n_estimates: usize,
    pub n_variates: usize,
    pub mv_status: FitStatus,
    /// Whether the univariate side produced any zero-width interval.
    pub uv_zero_width: bool,
    /// Per-variate comparison rows (empty unless both sides produced output).
    pub rows: Vec<ComparisonRow>,
}

/// Replicate- and pair-level accounting of the paired analysis, mirroring a
/// study-flow diagram: every replicate is analyzed or itemized under an
/// exclusion reason, and per-metric row exclusions are conserved.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationSummary {
    pub replicates_total: usize,
    pub replicates_analyzed: usize,
    pub excluded_mv_infeasible: usize,
    pub excluded_mv_nonconverged: usize,
    pub excluded_mv_failed: usize,
    pub excluded_uv_zero_width: usize,
    pub pairs_total: usize,
    pub bias_rows_used: usize,
    pub bias_rows_excluded_zero: usize,
    pub length_rows_used: usize,
    pub length_rows_excluded_zero: usize,
    pub coverage_multivariate: CoverageResult,
    pub coverage_univariate: CoverageResult,
    pub rel_length: BootstrapMean,
    /// exp of (mean, lower, upper) of the log relative length.
    pub rel_length_exp: (f64, f64, f64),
    pub rel_bias: BootstrapMean,
    pub rel_bias_exp: (f64, f64, f64),
    pub regression_length: Option<RegressionResult>,
    pub regression_bias: Option<RegressionResult>,
    /// Multivariate convergence rate over attempted (feasible) fits.
    pub mv_convergence_rate: f64,
}

/// Aggregate replicate outcomes into the paired evaluation summary.
///
/// A replicate enters the paired analysis only if its multivariate fit
/// converged and its univariate analysis produced no zero-width interval;
/// excluded replicates are itemized. Within analyzed replicates, rows with an
/// exact zero bias (or zero width) are excluded from that metric only.
pub fn evaluate_replicates(outcomes: &[ReplicateOutcome], seed: u64) -> Result<EvaluationSummary> {
    if outcomes.is_empty() {
        return Err(Error::Domain("no replicates to evaluate".into()));
    }
    let mut excluded_mv_infeasible = 0;
    let mut excluded_mv_nonconverged = 0;
    let mut excluded_mv_failed = 0;
    let mut excluded_uv_zero_width = 0;
    let mut attempted = 0usize;
    let mut converged = 0usize;

    let mut analyzed: Vec<&ReplicateOutcome> = Vec::new();
    for o in outcomes {
        let mut usable = true;
        match &o.mv_status {
            FitStatus::Fitted { converged: c } => {
                attempted += 1;
                if *c {
                    converged += 1;
                } else {
                    excluded_mv_nonconverged += 1;
                    usable = false;
                }
            }
            FitStatus::Infeasible => {
                excluded_mv_infeasible += 1;
                usable = false;
            }
            FitStatus::Failed(_) => {
                excluded_mv_failed += 1;
                usable = false;
            }
        }
        // one exclusion category per replicate, so the itemization sums to
        // the total
        if usable && o.uv_zero_width {
            excluded_uv_zero_width += 1;
            usable = false;
        }
        if usable {
            analyzed.push(o);
        }
    }
    if analyzed.is_empty() {
        return Err(Error::Domain("every replicate was excluded".into()));
    }

    let rows: Vec<ComparisonRow> = analyzed.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let pairs_total = rows.len();

    let coverage_multivariate = coverage(&rows, Side::Multivariate)?;
    let coverage_univariate = coverage(&rows, Side::Univariate)?;

    // group metric values by replicate for the cluster bootstrap
    let collect_metric = |f: &dyn Fn(&ComparisonRow) -> std::result::Result<f64, Exclusion>| {
        let mut by_cluster: Vec<Vec<f64>> = Vec::with_capacity(analyzed.len());
        let mut used = 0usize;
        let mut excluded = 0usize;
        for o in &analyzed {
            let mut values = Vec::with_capacity(o.rows.len());
            for row in &o.rows {
                match f(row) {
                    Ok(v) => {
                        values.push(v);
                        used += 1;
                    }
                    Err(_) => excluded += 1,
                }
            }
            by_cluster.push(values);
        }
        (by_cluster, used, excluded)
    };

    let (bias_clusters, bias_used, bias_excluded) = collect_metric(&log_rel_abs_bias);
    let (length_clusters, length_used, length_excluded) = collect_metric(&log_rel_length);

    let rel_bias = cluster_bootstrap_mean(&bias_clusters, seed ^ 0xB1A5)?;
    let rel_length = cluster_bootstrap_mean(&length_clusters, seed ^ 0x1E46)?;

    let n_clusters = analyzed.len();
    let regression_length = if n_clusters >= 30 {
        Some(regress_metric(&rows, Response::Length, seed ^ 0x4E6)?)
    } else {
        None
    };
    let regression_bias = if n_clusters >= 30 {
        Some(regress_metric(&rows, Response::Bias, seed ^ 0xB1A)?)
    } else {
        None
    };

    Ok(EvaluationSummary {
        replicates_total: outcomes.len(),
        replicates_analyzed: analyzed.len(),
        excluded_mv_infeasible,
        excluded_mv_nonconverged,
        excluded_mv_failed,
        excluded_uv_zero_width,
        pairs_total,
        bias_rows_used: bias_used,
        bias_rows_excluded_zero: bias_excluded,
        length_rows_used: length_used,
        length_rows_excluded_zero: length_excluded,
        coverage_multivariate,
        coverage_univariate,
        rel_length_exp: (rel_length.mean.exp(), rel_length.lower.exp(), rel_length.upper.exp()),
        rel_length,
        rel_bias_exp: (rel_bias.mean.exp(), rel_bias.lower.exp(), rel_bias.upper.exp()),
        rel_bias,
        regression_length,
        regression_bias,
        mv_convergence_rate: if attempted > 0 {
            converged as f64 / attempted as f64
        } else {
            0.0
        },
    })
}
