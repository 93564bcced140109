//! Per-variate random-effects meta-analysis with REML heterogeneity
//! estimation, the comparator for the multivariate model.
//!
//! For each variate, the k contributing studies' estimates are pooled with
//! inverse-variance weights 1/(v_i + τ²), where the between-study variance
//! τ² maximizes the restricted likelihood
//!
//! ```text
//! ll(τ²) = -½ Σ ln(v_i + τ²) - ½ ln Σ (v_i + τ²)⁻¹ - ½ Σ w_i (y_i - ŷ)²
//! ```
//!
//! Heterogeneity is additionally summarized by the Q-based I² statistic.
//! Variates observed by a single study are reported with τ² = 0 and flagged
//! rather than dropped: in sparse data singletons are common, and dropping
//! them would corrupt coverage accounting downstream.

use std::io::Write;

use serde::Serialize;

use crate::dataset::MetaDataset;
use crate::error::{Error, Result};

const Z_95: f64 = 1.959964;

/// Per-variate analysis flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnivariateFlag {
    Ok,
    /// Only one study contributed; τ² is undefined and set to 0.
    Singleton,
    /// The confidence interval collapsed to a point; unusable downstream.
    ZeroWidth,
}

impl UnivariateFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnivariateFlag::Ok => "ok",
            UnivariateFlag::Singleton => "singleton",
            UnivariateFlag::ZeroWidth => "zero_width",
        }
    }
}

/// One variate's pooled result.
#[derive(Debug, Clone, Serialize)]
pub struct VariateResult {
    pub variate_id: String,
    /// Number of contributing studies.
    pub k: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub tau2: f64,
    /// Q-based heterogeneity proportion; `None` for singletons.
    pub i2: Option<f64>,
    pub flag: UnivariateFlag,
}

/// Pooled estimate with its 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledEstimate {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn check_inputs(y: &[f64], v: &[f64], min_k: usize, what: &str) -> Result<()> {
    if y.len() != v.len() {
        return Err(Error::Consistency(format!(
            "{what}: y and v have different lengths ({} vs {})",
            y.len(),
            v.len()
        )));
    }
    if y.len() < min_k {
        return Err(Error::Domain(format!(
            "{what} requires at least {min_k} studies, got {}",
            y.len()
        )));
    }
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("{what}: variances must be positive and finite")));
    }
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("{what}: estimates must be finite")));
    }
    Ok(())
}

/// REML log-likelihood of the random-effects model at a given τ².
fn reml_loglik(y: &[f64], v: &[f64], tau2: f64) -> f64 {
    let weights: Vec<f64> = v.iter().map(|&vi| 1.0 / (vi + tau2)).collect();
    let w_sum: f64 = weights.iter().sum();
    let pooled: f64 = weights.iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>() / w_sum;
    let mut ll = 0.0;
    for (i, &wi) in weights.iter().enumerate() {
        ll += -0.5 * (v[i] + tau2).ln() - 0.5 * wi * (y[i] - pooled) * (y[i] - pooled);
    }
    ll - 0.5 * w_sum.ln()
}

const GOLDEN: f64 = 0.6180339887498949; // (sqrt(5) - 1) / 2

/// Golden-section maximization of a unimodal function on [lo, hi].
fn golden_section_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// REML estimate of the between-study variance τ².
///
/// Golden-section search on [0, 10·var(y)] followed by a derivative-sign
/// bisection polish; the boundary candidate τ² = 0 wins ties, so homogeneous
/// inputs return exactly 0.
pub fn reml_tau2(y: &[f64], v: &[f64]) -> Result<f64> {
    check_inputs(y, v, 2, "reml_tau2")?;
    let k = y.len() as f64;
    let mean = y.iter().sum::<f64>() / k;
    let var_y = y.iter().map(|yi| (yi - mean) * (yi - mean)).sum::<f64>() / (k - 1.0);
    if var_y == 0.0 {
        return Ok(0.0);
    }
    let upper = 10.0 * var_y;
    let objective = |t: f64| reml_loglik(y, v, t);
    let tol = 1e-12 * upper.max(1.0);
    let mut best = golden_section_max(&objective, 0.0, upper, tol);

    // derivative-sign bisection polish around the golden-section answer
    let h = (1e-8 * upper).max(1e-14);
    let slope = |t: f64| objective(t + h) - objective((t - h).max(0.0));
    let (mut a, mut b) = ((best - 64.0 * h).max(0.0), (best + 64.0 * h).min(upper));
    if slope(a) > 0.0 && slope(b) < 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if slope(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-13 * upper.max(1.0) {
                break;
            }
        }
        best = 0.5 * (a + b);
    }

    // boundary wins ties: no heterogeneity means exactly zero
    if objective(0.0) >= objective(best) {
        return Ok(0.0);
    }
    Ok(best)
}

/// Inverse-variance pooling at a fixed τ²: w_i = 1/(v_i + τ²).
pub fn pool(y: &[f64], v: &[f64], tau2: f64) -> Result<PooledEstimate> {
    check_inputs(y, v, 1, "pool")?;
    if !(tau2 >= 0.0) || !tau2.is_finite() {
        return Err(Error::Domain(format!("tau2 must be non-negative and finite, got {tau2}")));
    }
    let weights: Vec<f64> = v.iter().map(|&vi| 1.0 / (vi + tau2)).collect();
    let w_sum: f64 = weights.iter().sum();
    let estimate = weights.iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>() / w_sum;
    let se = w_sum.sqrt().recip();
    Ok(PooledEstimate {
        estimate,
        se,
        ci_low: estimate - Z_95 * se,
        ci_high: estimate + Z_95 * se,
    })
}

/// Q-based heterogeneity proportion I² = max(0, (Q − df)/Q); 0 when Q = 0.
pub fn i_squared(y: &[f64], v: &[f64]) -> Result<f64> {
    check_inputs(y, v, 2, "i_squared")?;
    let weights: Vec<f64> = v.iter().map(|&vi| 1.0 / vi).collect();
    let w_sum: f64 = weights.iter().sum();
    let pooled: f64 = weights.iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>() / w_sum;
    let q: f64 = weights.iter().zip(y).map(|(w, yi)| w * (yi - pooled) * (yi - pooled)).sum();
    let df = (y.len() - 1) as f64;
    if q <= 0.0 {
        return Ok(0.0);
    }
    Ok(((q - df) / q).max(0.0))
}

/// Analyze every variate of the dataset separately. Never errors: problem
/// variates are flagged instead.
pub fn analyze_univariate(dataset: &MetaDataset) -> Vec<VariateResult> {
    dataset
        .variates()
        .iter()
        .map(|variate_id| {
            let mut y = Vec::new();
            let mut v = Vec::new();
            for study in dataset.studies() {
                if let Some(e) =
                    study.estimates().iter().find(|e| &e.variate_id == variate_id)
                {
                    y.push(e.y);
                    v.push(e.se * e.se);
                }
            }
            let k = y.len();
            if k == 1 {
                // singleton: CI from the sampling standard error alone
                let se = v[0].sqrt();
                return VariateResult {
                    variate_id: variate_id.clone(),
                    k,
                    estimate: y[0],
                    se,
                    ci_low: y[0] - Z_95 * se,
                    ci_high: y[0] + Z_95 * se,
                    tau2: 0.0,
                    i2: None,
                    flag: UnivariateFlag::Singleton,
                };
            }
            let tau2 = reml_tau2(&y, &v).expect("validated inputs");
            let pooled = pool(&y, &v, tau2).expect("validated inputs");
            let i2 = i_squared(&y, &v).expect("validated inputs");
            let flag = if pooled.ci_high - pooled.ci_low <= 0.0 {
                UnivariateFlag::ZeroWidth
            } else {
                UnivariateFlag::Ok
            };
            VariateResult {
                variate_id: variate_id.clone(),
                k,
                estimate: pooled.estimate,
                se: pooled.se,
                ci_low: pooled.ci_low,
                ci_high: pooled.ci_high,
                tau2,
                i2: Some(i2),
                flag,
            }
        })
        .collect()
}

/// REML estimate of a single between-study variance shared by every variate
/// (the meta-regression convention: variate as a categorical covariate with
/// common residual heterogeneity).
///
/// The restricted likelihood extends the per-variate objective to the p-mean
/// fixed-effects design: with w_i = 1/(v_i + τ²) and per-variate weighted
/// means ŷ,
///
/// ```text
/// ll(τ²) = -½ [ Σ ln(v_i + τ²) + Σ_variates ln Σ_{i∈variate} w_i
///               + Σ w_i (y_i - ŷ_variate(i))² ]
/// ```
pub fn reml_tau2_common(dataset: &MetaDataset) -> Result<f64> {
    let mut y = Vec::with_capacity(dataset.n());
    let mut v = Vec::with_capacity(dataset.n());
    let mut variate_of = Vec::with_capacity(dataset.n());
    for study in dataset.studies() {
        for e in study.estimates() {
            y.push(e.y);
            v.push(e.se * e.se);
            variate_of.push(
                dataset.variate_index(&e.variate_id).expect("dataset variates are complete"),
            );
        }
    }
    if y.len() <= dataset.p() {
        return Err(Error::Domain(
            "common-tau2 REML needs more estimates than variates".into(),
        ));
    }
    let p = dataset.p();

    let objective = |tau2: f64| -> f64 {
        let mut log_terms = 0.0;
        let mut w_sums = vec![0.0f64; p];
        let mut wy_sums = vec![0.0f64; p];
        for i in 0..y.len() {
            let w = 1.0 / (v[i] + tau2);
            log_terms += (v[i] + tau2).ln();
            w_sums[variate_of[i]] += w;
            wy_sums[variate_of[i]] += w * y[i];
        }
        let mut quad = 0.0;
        for i in 0..y.len() {
            let j = variate_of[i];
            let resid = y[i] - wy_sums[j] / w_sums[j];
            quad += resid * resid / (v[i] + tau2);
        }
        let log_det: f64 = w_sums.iter().map(|&w| w.ln()).sum();
        -0.5 * (log_terms + log_det + quad)
    };

    let grand = y.iter().sum::<f64>() / y.len() as f64;
    let var_y =
        y.iter().map(|yi| (yi - grand) * (yi - grand)).sum::<f64>() / (y.len() as f64 - 1.0);
    if var_y == 0.0 {
        return Ok(0.0);
    }
    let upper = 10.0 * var_y;
    let tol = 1e-12 * upper.max(1.0);
    let best = golden_section_max(&objective, 0.0, upper, tol);
    if objective(0.0) >= objective(best) {
        return Ok(0.0);
    }
    Ok(best)
}

/// Analyze every variate under the shared-τ² convention. Each variate keeps
/// its inverse-variance pooled mean but all weights use the common τ̂², and
/// singleton intervals include the heterogeneity term √(v + τ̂²).
pub fn analyze_univariate_common_tau(dataset: &MetaDataset) -> Result<Vec<VariateResult>> {
    let tau2 = reml_tau2_common(dataset)?;
    Ok(dataset
        .variates()
        .iter()
        .map(|variate_id| {
            let mut y = Vec::new();
            let mut v = Vec::new();
            for study in dataset.studies() {
                if let Some(e) =
                    study.estimates().iter().find(|e| &e.variate_id == variate_id)
                {
                    y.push(e.y);
                    v.push(e.se * e.se);
                }
            }
            let k = y.len();
            let pooled = pool(&y, &v, tau2).expect("validated inputs");
            let i2 = if k >= 2 { Some(i_squared(&y, &v).expect("validated")) } else { None };
            let flag = if pooled.ci_high - pooled.ci_low <= 0.0 {
                UnivariateFlag::ZeroWidth
            } else if k == 1 {
                UnivariateFlag::Singleton
            } else {
                UnivariateFlag::Ok
            };
            VariateResult {
                variate_id: variate_id.clone(),
                k,
                estimate: pooled.estimate,
                se: pooled.se,
                ci_low: pooled.ci_low,
                ci_high: pooled.ci_high,
                tau2,
                i2,
                flag,
            }
        })
        .collect())
}

/// Write results as CSV:
/// `variate_id,k,estimate,se,ci_low,ci_high,tau2,i2,flag`. Singletons leave
/// the i2 column empty.
pub fn write_univariate_csv<W: Write>(results: &[VariateResult], mut writer: W) -> Result<()> {
    writeln!(writer, "variate_id,k,estimate,se,ci_low,ci_high,tau2,i2,flag")?;
    for r in results {
        let i2 = r.i2.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{}",
            r.variate_id,
            r.k,
            r.estimate,
            r.se,
            r.ci_low,
            r.ci_high,
            r.tau2,
            i2,
            r.flag.as_str()
        )?;
    }
    Ok(())
}

/// Parse a CSV produced by [`write_univariate_csv`].
pub fn parse_univariate_csv<R: std::io::BufRead>(reader: R) -> Result<Vec<VariateResult>> {
    let mut lines = reader.lines().enumerate();
    let header = lines
        .next()
        .ok_or(Error::Parse { line: 1, message: "empty univariate file".into() })?
        .1
        .map_err(Error::Io)?;
    if header != "variate_id,k,estimate,se,ci_low,ci_high,tau2,i2,flag" {
        return Err(Error::Parse { line: 1, message: format!("unexpected header '{header}'") });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(Error::Io)?;
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("'{s}' is not a decimal literal"),
            })
        };
        let flag = match fields[8] {
            "ok" => UnivariateFlag::Ok,
            "singleton" => UnivariateFlag::Singleton,
            "zero_width" => UnivariateFlag::ZeroWidth,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown flag '{other}'"),
                })
            }
        };
        out.push(VariateResult {
            variate_id: fields[0].to_string(),
            k: fields[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("'{}' is not an integer", fields[1]),
            })?,
            estimate: parse_f(fields[2])?,
            se: parse_f(fields[3])?,
            ci_low: parse_f(fields[4])?,
            ci_high: parse_f(fields[5])?,
            tau2: parse_f(fields[6])?,
            i2: if fields[7].is_empty() { None } else { Some(parse_f(fields[7])?) },
            flag,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Estimate, MetaDataset, Study};

    /// Brute-force oracle: dense grid over [0, upper], then golden-section
    /// refinement between the neighbors of the best grid point.
    fn grid_oracle(y: &[f64], v: &[f64], grid: usize) -> f64 {
        let k = y.len() as f64;
        let mean = y.iter().sum::<f64>() / k;
        let var_y = y.iter().map(|yi| (yi - mean) * (yi - mean)).sum::<f64>() / (k - 1.0);
        if var_y == 0.0 {
            return 0.0;
        }
        let upper = 10.0 * var_y;
        let f = |t: f64| reml_loglik(y, v, t);
        let mut best_i = 0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..=grid {
            let t = upper * i as f64 / grid as f64;
            let val = f(t);
            if val > best_val {
                best_val = val;
                best_i = i;
            }
        }
        let lo = upper * best_i.saturating_sub(1) as f64 / grid as f64;
        let hi = upper * (best_i + 1).min(grid) as f64 / grid as f64;
        let refined = golden_section_max(&f, lo, hi, 1e-13 * upper.max(1.0));
        if f(0.0) >= f(refined) {
            0.0
        } else {
            refined
        }
    }

    #[test]
    fn homogeneous_data_gives_zero() {
        let y = [0.4, 0.4, 0.4];
        let v = [0.1, 0.2, 0.05];
        assert_eq!(reml_tau2(&y, &v).unwrap(), 0.0);
    }

    #[test]
    fn two_study_closed_form() {
        // equal variances 0.1, y = (0, 1): the REML maximum is at
        // (v + τ²) = (y₁ − ȳ)² + (y₂ − ȳ)² · ... = 0.5, so τ² = 0.4
        let tau2 = reml_tau2(&[0.0, 1.0], &[0.1, 0.1]).unwrap();
        assert!((tau2 - 0.4).abs() < 1e-8, "tau2 = {tau2}");
        let oracle = grid_oracle(&[0.0, 1.0], &[0.1, 0.1], 100_000);
        assert!((tau2 - oracle).abs() < 1e-8);
    }

    #[test]
    fn wide_spread_gives_positive_tau2() {
        let y = [-2.0, 0.0, 2.0, 4.0];
        let v = [0.01, 0.01, 0.01, 0.01];
        let tau2 = reml_tau2(&y, &v).unwrap();
        assert!(tau2 > 1.0, "tau2 = {tau2}");
        let oracle = grid_oracle(&y, &v, 100_000);
        assert!((tau2 - oracle).abs() < 1e-6);
    }

    #[test]
    fn matches_grid_oracle_on_random_problems() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let k = 2 + (trial % 5);
            let y: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let v: Vec<f64> = (0..k).map(|_| 0.01 + rng.random::<f64>() * 0.3).collect();
            let est = reml_tau2(&y, &v).unwrap();
            let oracle = grid_oracle(&y, &v, 20_000);
            assert!(
                (est - oracle).abs() < 1e-6,
                "trial {trial}: est {est} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn local_max_certificate() {
        let y = [0.1, 0.6, -0.3, 0.9];
        let v = [0.05, 0.1, 0.2, 0.08];
        let tau2 = reml_tau2(&y, &v).unwrap();
        let at = reml_loglik(&y, &v, tau2);
        for delta in [1e-4, -1e-4] {
            let t = tau2 * (1.0 + delta);
            if t >= 0.0 {
                assert!(at >= reml_loglik(&y, &v, t), "not a local max at {tau2}");
            }
        }
    }

    #[test]
    fn reml_preconditions() {
        assert!(reml_tau2(&[0.1], &[0.1]).is_err());
        assert!(reml_tau2(&[0.1, 0.2], &[0.1, 0.0]).is_err());
        assert!(reml_tau2(&[f64::NAN, 0.2], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn pool_hand_computations() {
        // k = 1
        let p = pool(&[0.5], &[0.04], 0.02).unwrap();
        assert!((p.estimate - 0.5).abs() < 1e-15);
        assert!((p.se - (0.06f64).sqrt()).abs() < 1e-12);

        // equal variances, τ² = 0: arithmetic mean
        let p = pool(&[0.1, 0.5, 0.9], &[0.2, 0.2, 0.2], 0.0).unwrap();
        assert!((p.estimate - 0.5).abs() < 1e-14);

        // y = (0, 1), v = (0.1, 0.4): weights (10, 2.5)
        let p = pool(&[0.0, 1.0], &[0.1, 0.4], 0.0).unwrap();
        assert!((p.estimate - 0.2).abs() < 1e-14);
        assert!((p.se - (0.08f64).sqrt()).abs() < 1e-12);
        assert!((p.ci_low - (0.2 - Z_95 * (0.08f64).sqrt())).abs() < 1e-12);
        // CI symmetric about the estimate
        assert!(((p.ci_low + p.ci_high) / 2.0 - p.estimate).abs() < 1e-12);
    }

    #[test]
    fn i_squared_hand_computation() {
        // identical estimates: Q = 0 → 0 by convention
        assert_eq!(i_squared(&[0.3, 0.3], &[0.1, 0.1]).unwrap(), 0.0);
        // y = (0, 1), v = (0.05, 0.05): Q = 10, I² = 0.9
        let i2 = i_squared(&[0.0, 1.0], &[0.05, 0.05]).unwrap();
        assert!((i2 - 0.9).abs() < 1e-12, "i2 = {i2}");
        // Q below df clamps to 0
        let i2 = i_squared(&[0.0, 0.01], &[1.0, 1.0]).unwrap();
        assert_eq!(i2, 0.0);
    }

    #[test]
    fn i_squared_scale_invariance() {
        // scaling residuals by c and variances by c² leaves I² unchanged
        let y = [0.1, 0.9, -0.4];
        let v = [0.04, 0.09, 0.02];
        let base = i_squared(&y, &v).unwrap();
        let c = 3.7;
        let y2: Vec<f64> = y.iter().map(|yi| yi * c).collect();
        let v2: Vec<f64> = v.iter().map(|vi| vi * c * c).collect();
        let scaled = i_squared(&y2, &v2).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    fn metadata(rows: &[(&str, &str, f64, f64)]) -> MetaDataset {
        let mut by_study: std::collections::BTreeMap<&str, Vec<Estimate>> = Default::default();
        for &(s, vid, y, se) in rows {
            by_study.entry(s).or_default().push(Estimate {
                variate_id: vid.into(),
                y,
                se,
            });
        }
        MetaDataset::new(
            by_study.into_iter().map(|(s, es)| Study::new(s, es).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn analyze_flags_singletons() {
        let ds = metadata(&[
            ("s1", "a", 0.2, 0.1),
            ("s2", "a", 0.3, 0.1),
            ("s1", "b", 0.5, 0.2),
        ]);
        let results = analyze_univariate(&ds);
        assert_eq!(results.len(), 2);
        let a = &results[0];
        assert_eq!(a.k, 2);
        assert_eq!(a.flag, UnivariateFlag::Ok);
        assert!(a.i2.is_some());
        let b = &results[1];
        assert_eq!(b.k, 1);
        assert_eq!(b.flag, UnivariateFlag::Singleton);
        assert_eq!(b.tau2, 0.0);
        assert!(b.i2.is_none());
        assert!((b.ci_high - (0.5 + Z_95 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn analyze_dense_dataset_k_equals_m() {
        let ds = metadata(&[
            ("s1", "a", 0.2, 0.1),
            ("s1", "b", 0.1, 0.1),
            ("s2", "a", 0.25, 0.15),
            ("s2", "b", 0.15, 0.12),
            ("s3", "a", 0.3, 0.2),
            ("s3", "b", 0.4, 0.3),
        ]);
        let results = analyze_univariate(&ds);
        for r in &results {
            assert_eq!(r.k, 3);
            assert_eq!(r.flag, UnivariateFlag::Ok);
            assert!(r.ci_high > r.ci_low);
        }
    }

    #[test]
    fn common_tau2_matches_per_variate_on_symmetric_data() {
        // one variate only: the common estimate IS the per-variate estimate
        let ds = metadata(&[
            ("s1", "a", 0.0, 0.3162277660168379),
            ("s2", "a", 1.0, 0.3162277660168379),
        ]);
        let common = reml_tau2_common(&ds).unwrap();
        let per = reml_tau2(&[0.0, 1.0], &[0.1, 0.1]).unwrap();
        // golden section alone resolves the flat maximum to ~sqrt(eps)
        assert!((common - per).abs() < 1e-6, "common {common} vs per-variate {per}");
    }

    #[test]
    fn common_tau2_pools_information_across_variates() {
        // heterogeneity visible in both variates; the common estimate uses
        // all residuals
        let ds = metadata(&[
            ("s1", "a", -0.5, 0.1),
            ("s2", "a", 0.5, 0.1),
            ("s1", "b", 0.8, 0.1),
            ("s2", "b", -0.2, 0.1),
            ("s3", "b", 0.9, 0.1),
        ]);
        let tau2 = reml_tau2_common(&ds).unwrap();
        assert!(tau2 > 0.05, "tau2 = {tau2}");
        let results = analyze_univariate_common_tau(&ds).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.tau2, results[0].tau2, "every variate shares the estimate");
        }
    }

    #[test]
    fn common_tau_singleton_interval_includes_heterogeneity() {
        let ds = metadata(&[
            ("s1", "a", -1.0, 0.1),
            ("s2", "a", 1.0, 0.1),
            ("s3", "a", -1.2, 0.1),
            ("s4", "a", 1.1, 0.1),
            ("s1", "b", 0.5, 0.1),
        ]);
        let tau2 = reml_tau2_common(&ds).unwrap();
        assert!(tau2 > 0.1);
        let results = analyze_univariate_common_tau(&ds).unwrap();
        let b = results.iter().find(|r| r.variate_id == "b").unwrap();
        assert_eq!(b.flag, UnivariateFlag::Singleton);
        let expect_se = (0.01 + tau2).sqrt();
        assert!((b.se - expect_se).abs() < 1e-12);
        // strictly wider than the sampling-only interval the per-variate
        // convention reports
        let per = analyze_univariate(&ds);
        let b_per = per.iter().find(|r| r.variate_id == "b").unwrap();
        assert!(b.ci_high - b.ci_low > b_per.ci_high - b_per.ci_low);
    }

    #[test]
    fn csv_round_trip() {
        let ds = metadata(&[
            ("s1", "a", 0.2, 0.1),
            ("s2", "a", 0.3, 0.1),
            ("s1", "b", 0.5, 0.2),
        ]);
        let results = analyze_univariate(&ds);
        let mut buf = Vec::new();
        write_univariate_csv(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("variate_id,k,estimate,se,ci_low,ci_high,tau2,i2,flag\n"));
        let parsed = parse_univariate_csv(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(parsed.len(), results.len());
        for (a, b) in parsed.iter().zip(&results) {
            assert_eq!(a.variate_id, b.variate_id);
            assert_eq!(a.k, b.k);
            assert_eq!(a.flag, b.flag);
            assert!((a.estimate - b.estimate).abs() < 1e-15);
            assert_eq!(a.i2.is_some(), b.i2.is_some());
        }
    }
}
