//! Parameter counting, the sparsity test, and projection-dimension selection.

use crate::error::{Error, Result};

/// The competing model families whose parameter counts decide feasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Common within-study correlation matrix plus a full between-study
    /// covariance: p² + p parameters.
    Riley,
    /// Per-variate additional variances plus a common correlation matrix:
    /// p(p + 3)/2 parameters.
    LinChu,
    /// Low-dimensional covariance via a q×p projection: p + q(q + 1)/2
    /// parameters (the mean vector plus a symmetric q×q covariance).
    LowDim,
}

/// Number of parameters the given model estimates for `p` variates.
///
/// `q` is required for [`ModelKind::LowDim`] and must satisfy `1 <= q < p`;
/// it is ignored for the other families.
pub fn param_count(model: ModelKind, p: usize, q: Option<usize>) -> Result<usize> {
    if p < 1 {
        return Err(Error::Domain("param_count requires p >= 1".into()));
    }
    match model {
        ModelKind::Riley => Ok(p * p + p),
        ModelKind::LinChu => Ok(p * (p + 3) / 2),
        ModelKind::LowDim => {
            let q = q.ok_or_else(|| {
                Error::Domain("param_count for the low-dimensional model requires q".into())
            })?;
            if q < 1 || q >= p {
                return Err(Error::Domain(format!(
                    "low-dimensional model requires 1 <= q < p, got q = {q}, p = {p}"
                )));
            }
            Ok(p + q * (q + 1) / 2)
        }
    }
}

/// Whether a problem with `n` total estimates of `p` variates is sparse,
/// i.e. too small for the full model: `n < p² + p`.
pub fn is_sparse(n: usize, p: usize) -> bool {
    n < p * p + p
}

/// Largest q in `[1, min(q_max, p - 1)]` whose parameter count fits within
/// the `n` available estimates.
pub fn select_q(n: usize, p: usize, q_max: usize) -> Result<usize> {
    if q_max < 1 {
        return Err(Error::Domain("select_q requires q_max >= 1".into()));
    }
    let upper = q_max.min(p.saturating_sub(1));
    let mut best = None;
    for q in 1..=upper {
        if param_count(ModelKind::LowDim, p, Some(q))? <= n {
            best = Some(q);
        } else {
            break; // counts are increasing in q
        }
    }
    best.ok_or(Error::Infeasible { n, p, q_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_values_at_23_predictors() {
        assert_eq!(param_count(ModelKind::Riley, 23, None).unwrap(), 552);
        assert_eq!(param_count(ModelKind::LinChu, 23, None).unwrap(), 299);
        assert_eq!(param_count(ModelKind::LowDim, 23, Some(4)).unwrap(), 33);
    }

    #[test]
    fn lowdim_validates_q() {
        assert!(param_count(ModelKind::LowDim, 23, None).is_err());
        assert!(param_count(ModelKind::LowDim, 5, Some(0)).is_err());
        assert!(param_count(ModelKind::LowDim, 5, Some(5)).is_err());
        assert!(param_count(ModelKind::LowDim, 1, Some(1)).is_err());
    }

    #[test]
    fn sparsity_boundary() {
        assert!(is_sparse(38, 23)); // 38 < 552
        assert!(!is_sparse(6, 2)); // boundary 6 = 2² + 2 is not strict
        assert!(is_sparse(5, 2));
    }

    #[test]
    fn select_q_knee_sized_problem() {
        // 23 + 5·6/2 = 38 <= 38, while q = 6 would need 44.
        assert_eq!(select_q(38, 23, 10).unwrap(), 5);
    }

    #[test]
    fn select_q_edges() {
        assert_eq!(select_q(24, 23, 10).unwrap(), 1); // n = p + 1
        assert!(matches!(
            select_q(23, 23, 10),
            Err(Error::Infeasible { n: 23, p: 23, .. })
        ));
        let msg = select_q(23, 23, 10).unwrap_err().to_string();
        assert!(msg.contains("23"), "message should name n and p: {msg}");
        // q_max caps the answer
        assert_eq!(select_q(10_000, 23, 4).unwrap(), 4);
        // q < p caps the answer
        assert_eq!(select_q(10_000, 3, 10).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn lowdim_count_increasing_in_q(p in 3usize..40, q in 1usize..20) {
            prop_assume!(q + 1 < p);
            let a = param_count(ModelKind::LowDim, p, Some(q)).unwrap();
            let b = param_count(ModelKind::LowDim, p, Some(q + 1)).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn select_q_is_tight(p in 2usize..40, n in 1usize..2000, q_max in 1usize..12) {
            match select_q(n, p, q_max) {
                Ok(q) => {
                    prop_assert!(q >= 1 && q <= q_max && q < p);
                    prop_assert!(param_count(ModelKind::LowDim, p, Some(q)).unwrap() <= n);
                    // one more q either violates the budget or the bounds
                    if q + 1 <= q_max.min(p - 1) {
                        prop_assert!(
                            param_count(ModelKind::LowDim, p, Some(q + 1)).unwrap() > n
                        );
                    }
                }
                Err(_) => {
                    // not even q = 1 fits
                    if p >= 2 {
                        prop_assert!(p + 1 > n);
                    }
                }
            }
        }

        #[test]
        fn sparsity_monotone(n in 1usize..5000, p in 1usize..60) {
            if is_sparse(n, p) {
                if n > 1 {
                    prop_assert!(is_sparse(n - 1, p));
                }
                prop_assert!(is_sparse(n, p + 1));
            }
        }
    }
}
