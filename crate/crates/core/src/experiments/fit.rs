use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares line `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope (0 for two points).
    pub slope_se: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::InsufficientData(format!("line fit needs >= 2 matching points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("line fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_se = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LineFit { slope, intercept, r2, slope_se })
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData("rank correlation needs >= 2 matching points".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let m = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let vx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulusBranch {
    /// `|ln D|^-theta`.
    Log,
    /// The linear `t` term dominates.
    T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusFit {
    /// Exponent of `error ~ |ln D|^-theta`.
    pub theta: f64,
    /// 95% band on `theta`.
    pub theta_band: [f64; 2],
    pub r2_log: f64,
    /// Exponent of `error ~ D^p`.
    pub power: f64,
    pub r2_power: f64,
    pub branch: ModulusBranch,
    pub no_degradation: bool,
    pub points: usize,
}

/// Fits `ln error = c - theta ln|ln D|` and, for model selection,
/// `ln error = c + p ln D`, over the points with `D < e^-2`.
pub fn fit_modulus(curve: &[(f64, f64)]) -> Result<ModulusFit> {
    let cut = (-2.0f64).exp();
    let pts: Vec<(f64, f64)> = curve.iter().copied().filter(|&(d, e)| d > 0.0 && d < cut && e > 0.0).collect();
    if pts.len() < 5 {
        return Err(Error::InsufficientData(format!("{} usable points with D < e^-2, need 5", pts.len())));
    }
    let le: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let lld: Vec<f64> = pts.iter().map(|p| p.0.ln().abs().ln()).collect();
    let ld: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let log_fit = fit_line(&lld, &le)?;
    let pow_fit = fit_line(&ld, &le)?;
    let theta = -log_fit.slope;
    let band = 1.96 * log_fit.slope_se;
    let spread = le.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - le.iter().cloned().fold(f64::INFINITY, f64::min);
    let no_degradation = spread < 1e-9 || theta.abs() < 1e-6;
    let branch = if pow_fit.r2 > log_fit.r2 && pow_fit.slope > 0.5 { ModulusBranch::T } else { ModulusBranch::Log };
    Ok(ModulusFit {
        theta,
        theta_band: [theta - band, theta + band],
        r2_log: log_fit.r2,
        power: pow_fit.slope,
        r2_power: pow_fit.r2,
        branch,
        no_degradation,
        points: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Vec<f64> {
        (0..12).map(|i| 10f64.powf(-12.0 + 0.8 * i as f64)).collect()
    }

    #[test]
    fn recovers_log_exponent() {
        let c: Vec<(f64, f64)> = ds().into_iter().map(|d| (d, d.ln().abs().powf(-1.0 / 30.0))).collect();
        let f = fit_modulus(&c).unwrap();
        assert!((f.theta - 1.0 / 30.0).abs() < 0.05 / 30.0, "{}", f.theta);
        assert_eq!(f.branch, ModulusBranch::Log);
        assert!(!f.no_degradation);
    }

    #[test]
    fn constant_curve_has_no_degradation() {
        let c: Vec<(f64, f64)> = ds().into_iter().map(|d| (d, 0.3)).collect();
        let f = fit_modulus(&c).unwrap();
        assert!(f.theta.abs() < 1e-9);
        assert!(f.no_degradation);
    }

    #[test]
    fn linear_regime_selects_t_branch() {
        let c: Vec<(f64, f64)> = ds().into_iter().map(|d| (d, d)).collect();
        let f = fit_modulus(&c).unwrap();
        assert!(f.theta > 5.0);
        assert!(f.r2_log < f.r2_power);
        assert_eq!(f.branch, ModulusBranch::T);
    }

    #[test]
    fn needs_five_small_points() {
        let c = vec![(1e-3, 0.1), (1e-4, 0.05), (0.5, 1.0), (0.3, 0.9)];
        assert!(matches!(fit_modulus(&c), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn spearman_with_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn line_fit_exact() {
        let f = log_log_slope(&[1.0, 2.0, 4.0], &[1.0, 4.0, 16.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
    }
}
