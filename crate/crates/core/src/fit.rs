//! Least-squares line fits used for convergence slopes and scaling laws.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope; zero when the fit has no spare degrees of freedom.
    pub slope_stderr: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci95: f64,
    pub points: usize,
}

impl LineFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Ordinary least squares `y ≈ a + b x`. Returns `None` for fewer than two
/// points or a degenerate abscissa.
pub fn line_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let sxx: f64 = x[..n].iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x[..n]
        .iter()
        .zip(&y[..n])
        .map(|(a, b)| (a - mx) * (b - my))
        .sum();
    let syy: f64 = y[..n].iter().map(|b| (b - my) * (b - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x[..n]
        .iter()
        .zip(&y[..n])
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let (slope_stderr, slope_ci95) = if n > 2 {
        let se = (sse / (nf - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, nf - 2.0)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(f64::NAN);
        (se, t * se)
    } else {
        (0.0, 0.0)
    };
    Some(LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
        slope_ci95,
        points: n,
    })
}

/// Fit of `ln y` against `ln x`; points with nonpositive values are skipped.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    line_fit(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r2() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = line_fit(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(f.slope_ci95.abs() < 1e-12);
    }

    #[test]
    fn power_law_slope() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((loglog_fit(&x, &y).unwrap().slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_fit_reports_interval() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.1, 1.9, 3.2, 3.9, 5.1];
        let f = line_fit(&x, &y).unwrap();
        assert!(f.slope_ci95 > 0.0 && f.r2 < 1.0 && f.r2 > 0.98);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(line_fit(&[1.0], &[1.0]).is_none());
        assert!(line_fit(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }
}
