//! Central finite-difference oracle for gradient verification.
//!
//! `f` must be a pure scalar function of the flat input values (typically:
//! rebuild a fresh tape, run the op under test, reduce to a scalar). The
//! analytic gradient is compared element by element against
//! (f(x+h) − f(x−h)) / 2h.

use crate::error::Result;

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs)?;
        xs[i] = orig - h;
        let fm = f(&xs)?;
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Worst relative error between two gradient vectors. The denominator is
/// floored so near-zero pairs compare absolutely rather than blowing up.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_known_derivative() {
        // f(x) = sum(x²) → df/dx_i = 2x_i
        let x = [0.5, -1.25, 2.0];
        let g = fd_gradient(|v| Ok(v.iter().map(|x| x * x).sum()), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_err_floors_small_denominators() {
        assert!(max_rel_err(&[0.0], &[1e-9]) < 1e-4);
        assert!(max_rel_err(&[1.0], &[1.1]) > 0.05);
    }
}
