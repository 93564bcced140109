//! Convergence diagnostics and posterior summaries.

use crate::error::{Error, Result};

/// Split-R̂: each chain is halved (the middle draw of an odd-length chain is
/// dropped), then the classic between/within variance ratio is computed over
/// the split halves. Values near 1 indicate mixing; degenerate inputs with
/// zero within-chain variance report +∞.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Domain("split_rhat requires at least 2 chains".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::Domain(format!(
            "split_rhat requires at least 4 draws per chain, got {n}"
        )));
    }
    let half = n / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[n - half..n]);
    }

    let m = halves.len() as f64;
    let len = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / len).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / (len - 1.0))
        .collect();

    let w = vars.iter().sum::<f64>() / m;
    if w <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let grand = means.iter().sum::<f64>() / m;
    let b = len * means.iter().map(|&x| (x - grand) * (x - grand)).sum::<f64>() / (m - 1.0);
    let var_plus = (len - 1.0) / len * w + b / len;
    Ok((var_plus / w).sqrt())
}

/// Split-R̂ for every coordinate of multivariate chains (`chains × draws × dim`).
pub fn split_rhat_all(chains: &[Vec<Vec<f64>>], dim: usize) -> Result<Vec<f64>> {
    (0..dim)
        .map(|k| {
            let per_chain: Vec<Vec<f64>> =
                chains.iter().map(|c| c.iter().map(|d| d[k]).collect()).collect();
            let views: Vec<&[f64]> = per_chain.iter().map(|v| v.as_slice()).collect();
            split_rhat(&views)
        })
        .collect()
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" rule). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Summary of one parameter's pooled draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean, standard deviation and equal-tailed interval at `level`, computed
/// after applying the optional elementwise transform to each draw (a
/// monotone transform therefore commutes with the interval endpoints).
pub fn summarize(
    draws: &[f64],
    level: f64,
    transform: Option<&dyn Fn(f64) -> f64>,
) -> Result<ParamSummary> {
    if draws.is_empty() {
        return Err(Error::Domain("summarize requires at least one draw".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    let mut values: Vec<f64> = match transform {
        Some(f) => draws.iter().map(|&x| f(x)).collect(),
        None => draws.to_vec(),
    };
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    values.sort_by(|a, b| a.partial_cmp(b).expect("draws must not contain NaN"));
    let alpha = 1.0 - level;
    Ok(ParamSummary {
        mean,
        sd,
        lower: quantile(&values, alpha / 2.0),
        upper: quantile(&values, 1.0 - alpha / 2.0),
    })
}
