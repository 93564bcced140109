//! Fisher's z transform and its companions.
//!
//! Correlation coefficients are mapped to the z scale (atanh) before pooling,
//! which stabilizes their sampling variance; results are mapped back with
//! tanh. The large-sample standard error of a transformed sample correlation
//! from `n` units is `1/sqrt(n - 3)`.

use crate::error::{Error, Result};

/// Fisher's z transform of a correlation coefficient: `atanh(r)`.
pub fn fisher_z(r: f64) -> Result<f64> {
    if !r.is_finite() || r.abs() >= 1.0 {
        return Err(Error::Domain(format!(
            "fisher_z requires |r| < 1, got {r}"
        )));
    }
    Ok(r.atanh())
}

/// Inverse of [`fisher_z`]: `tanh(z)`, always in (-1, 1).
pub fn inv_fisher_z(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Domain(format!(
            "inv_fisher_z requires a finite argument, got {z}"
        )));
    }
    Ok(z.tanh())
}

/// Standard error of a z-transformed sample correlation from `n_units` units.
pub fn fisher_z_se(n_units: u64) -> Result<f64> {
    if n_units < 4 {
        return Err(Error::Domain(format!(
            "fisher_z_se requires at least 4 units, got {n_units}"
        )));
    }
    Ok(1.0 / ((n_units - 3) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Series evaluation of atanh: sum of r^(2k+1)/(2k+1). Independent of the
    /// implementation path, which calls the intrinsic.
    fn atanh_series(r: f64) -> f64 {
        let mut term = r;
        let mut sum = 0.0;
        let mut k = 0u32;
        loop {
            let contrib = term / (2 * k + 1) as f64;
            let next = sum + contrib;
            if next == sum {
                return sum;
            }
            sum = next;
            term *= r * r;
            k += 1;
        }
    }

    #[test]
    fn zero_is_fixed_point() {
        assert_eq!(fisher_z(0.0).unwrap(), 0.0);
        assert_eq!(inv_fisher_z(0.0).unwrap(), 0.0);
    }

    #[test]
    fn matches_series_oracle() {
        for &r in &[0.5, -0.5, 0.1, 0.9, -0.73, 0.25] {
            let expect = atanh_series(r);
            assert!((fisher_z(r).unwrap() - expect).abs() < 1e-14, "r={r}");
        }
        // frozen value from the series oracle at r = 0.5
        assert!((fisher_z(0.5).unwrap() - 0.5493061443340549).abs() < 1e-12);
    }

    #[test]
    fn boundary_behaviour() {
        assert!(fisher_z(0.99999).unwrap().is_finite());
        assert!(fisher_z(0.99999).unwrap() > 6.0);
        assert!(fisher_z(1.0).is_err());
        assert!(fisher_z(-1.0).is_err());
        assert!(fisher_z(f64::NAN).is_err());
        assert!(inv_fisher_z(f64::INFINITY).is_err());
    }

    #[test]
    fn inv_matches_tanh_oracle() {
        // tanh(10) via exp: (e^20 - 1) / (e^20 + 1)
        let e20 = (20.0f64).exp();
        let expect = (e20 - 1.0) / (e20 + 1.0);
        assert!((inv_fisher_z(10.0).unwrap() - expect).abs() < 1e-15);
        assert!((inv_fisher_z(10.0).unwrap() - 0.9999999958776927).abs() < 1e-12);
        assert!((inv_fisher_z(0.5493061443340549).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn strictly_increasing_and_odd() {
        let mut prev = f64::NEG_INFINITY;
        for i in -99..=99 {
            let r = i as f64 / 100.0;
            let z = fisher_z(r).unwrap();
            assert!(z > prev);
            assert!((z + fisher_z(-r).unwrap()).abs() < 1e-13);
            prev = z;
        }
    }

    #[test]
    fn round_trip_grid() {
        // 1000 uniform r in (-0.999, 0.999)
        for i in 0..1000 {
            let r = -0.999 + 1.998 * (i as f64 + 0.5) / 1000.0;
            let back = inv_fisher_z(fisher_z(r).unwrap()).unwrap();
            assert!((back - r).abs() < 1e-12, "r={r} back={back}");
        }
    }

    #[test]
    fn se_values() {
        assert_eq!(fisher_z_se(4).unwrap(), 1.0);
        assert!((fisher_z_se(50).unwrap() - 0.14586499149789456).abs() < 1e-12);
        assert!(fisher_z_se(3).is_err());
        assert!(fisher_z_se(0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_prop(r in -0.999f64..0.999) {
            let back = inv_fisher_z(fisher_z(r).unwrap()).unwrap();
            prop_assert!((back - r).abs() < 1e-12);
        }

        // beyond |z| ~ 18.7, tanh rounds to ±1.0 in f64
        #[test]
        fn inv_in_open_interval_before_saturation(z in -18.0f64..18.0) {
            let r = inv_fisher_z(z).unwrap();
            prop_assert!(r > -1.0 && r < 1.0);
        }
    }
}
