//! Quasi-Poisson baseline mortality regression.
//!
//! Log-link Poisson-family GLM on calendar covariates (day of week, day of
//! year, holiday), fit by iteratively reweighted least squares. The Pearson
//! dispersion is reported but only point predictions are used downstream.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{calendar_covariates, CalendarDate, HolidayTable};

const RIDGE: f64 = 1e-8;
const MAX_STEP_HALVINGS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateEncoding {
    /// `[1, dow, doy, holiday]` with integer-coded day of week and day of year.
    Literal,
    /// Intercept, day-of-week dummies (Monday dropped), holiday, and
    /// annual sine/cosine pairs.
    CategoricalHarmonic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlmDesignConfig {
    pub encoding: CovariateEncoding,
    pub harmonics: u32,
    pub period: f64,
}

impl Default for GlmDesignConfig {
    fn default() -> Self {
        Self {
            encoding: CovariateEncoding::CategoricalHarmonic,
            harmonics: 2,
            period: 365.25,
        }
    }
}

impl GlmDesignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.harmonics > 6 {
            return Err(Error::InvalidParams(format!("harmonics must be <= 6, got {}", self.harmonics)));
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::InvalidParams(format!("period must be positive, got {}", self.period)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        match self.encoding {
            CovariateEncoding::Literal => 4,
            CovariateEncoding::CategoricalHarmonic => 8 + 2 * self.harmonics as usize,
        }
    }
}

/// Design row for one date.
pub fn build_design(date: CalendarDate, holidays: &HolidayTable, config: &GlmDesignConfig) -> Vec<f64> {
    let cov = calendar_covariates(date, holidays);
    let holiday = if cov.holiday { 1.0 } else { 0.0 };
    match config.encoding {
        CovariateEncoding::Literal => vec![1.0, cov.day_of_week as f64, cov.day_of_year as f64, holiday],
        CovariateEncoding::CategoricalHarmonic => {
            let mut row = Vec::with_capacity(config.width());
            row.push(1.0);
            // Tuesday..Sunday
            row.extend((2..=7).map(|d| if cov.day_of_week == d { 1.0 } else { 0.0 }));
            row.push(holiday);
            for k in 1..=config.harmonics {
                let phase = 2.0 * PI * k as f64 * cov.day_of_year as f64 / config.period;
                row.push(phase.sin());
                row.push(phase.cos());
            }
            row
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

/// Raw IRLS result on an explicit design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IrlsFit {
    pub beta: Vec<f64>,
    pub dispersion: f64,
    pub fitted: Vec<f64>,
    /// Deviance at the initial point followed by one entry per iteration.
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
}

pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let term = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            term - (y - m)
        })
        .sum::<f64>()
}

fn linear_predictor(x: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    x.iter().map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
}

fn weighted_least_squares(x: &[Vec<f64>], z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let p = x[0].len();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwz = DVector::<f64>::zeros(p);
    for ((row, &zi), &wi) in x.iter().zip(z).zip(w) {
        for a in 0..p {
            let wa = wi * row[a];
            xtwz[a] += wa * zi;
            for b in a..p {
                xtwx[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
        xtwx[(a, a)] += RIDGE;
    }
    let chol = xtwx
        .cholesky()
        .ok_or_else(|| Error::SingularFit("weighted normal equations are not positive definite".into()))?;
    let beta = chol.solve(&xtwz);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularFit("non-finite coefficients".into()));
    }
    Ok(beta.iter().copied().collect())
}

/// Fits a log-link Poisson GLM by IRLS with step halving.
///
/// Each iteration solves the weighted normal equations (ridge 1e-8) for the
/// working response; if the deviance rises, the step is halved until it no
/// longer does, so the deviance trace is non-increasing.
pub fn fit_irls(x: &[Vec<f64>], y: &[f64], options: IrlsOptions) -> Result<IrlsFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::ShapeMismatch(format!("{n} design rows for {} counts", y.len())));
    }
    let p = x.first().map_or(0, Vec::len);
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(Error::ShapeMismatch("design rows must share a non-zero width".into()));
    }
    if n < p {
        return Err(Error::Underdetermined {
            observations: n,
            parameters: p,
        });
    }
    if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidParams("counts must be finite and non-negative".into()));
    }
    if y.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZeroCounts);
    }

    let mean = y.iter().sum::<f64>() / n as f64;
    let mut beta = vec![0.0; p];
    beta[0] = (mean + 1e-8).ln();
    let mut mu: Vec<f64> = linear_predictor(x, &beta).into_iter().map(f64::exp).collect();
    let mut deviance = poisson_deviance(y, &mu);
    let mut trace = vec![deviance];

    for iter in 1..=options.max_iter {
        let eta = linear_predictor(x, &beta);
        let z: Vec<f64> = eta.iter().zip(y).zip(&mu).map(|((e, yi), m)| e + (yi - m) / m).collect();
        let proposal = weighted_least_squares(x, &z, &mu)?;

        let mut step = proposal;
        let mut halvings = 0;
        let (new_mu, new_dev) = loop {
            let m: Vec<f64> = linear_predictor(x, &step).into_iter().map(f64::exp).collect();
            let dev = poisson_deviance(y, &m);
            if dev.is_finite() && dev <= deviance {
                break (m, dev);
            }
            if halvings == MAX_STEP_HALVINGS {
                if !dev.is_finite() {
                    return Err(Error::SingularFit("non-finite deviance".into()));
                }
                // No descent direction left at working precision.
                step = beta.clone();
                break (mu.clone(), deviance);
            }
            halvings += 1;
            step = step.iter().zip(&beta).map(|(s, b)| 0.5 * (s + b)).collect();
        };
        if new_mu.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::SingularFit("non-finite fitted mean".into()));
        }

        let change = (deviance - new_dev).abs() / (new_dev.abs() + 0.1);
        beta = step;
        mu = new_mu;
        deviance = new_dev;
        trace.push(deviance);
        if change < options.tol {
            let dof = (n - p).max(1) as f64;
            let pearson = y.iter().zip(&mu).map(|(yi, m)| (yi - m).powi(2) / m).sum::<f64>();
            return Ok(IrlsFit {
                beta,
                dispersion: pearson / dof,
                fitted: mu,
                deviance_trace: trace,
                iterations: iter,
            });
        }
    }
    Err(Error::NotConverged(options.max_iter))
}

/// Fitted baseline model over calendar covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub encoding: CovariateEncoding,
    pub harmonics: u32,
    pub period: f64,
    pub beta: Vec<f64>,
    pub dispersion: f64,
    /// First and last training dates, inclusive.
    pub train_span: (CalendarDate, CalendarDate),
}

impl GlmFit {
    pub fn config(&self) -> GlmDesignConfig {
        GlmDesignConfig {
            encoding: self.encoding,
            harmonics: self.harmonics,
            period: self.period,
        }
    }

    /// Expected deaths on one date.
    pub fn mean_at(&self, date: CalendarDate, holidays: &HolidayTable) -> f64 {
        let row = build_design(date, holidays, &self.config());
        row.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>().exp()
    }
}

/// Fits the baseline model on `(date, deaths)` pairs.
pub fn fit_baseline(
    dates: &[CalendarDate],
    deaths: &[f64],
    holidays: &HolidayTable,
    config: &GlmDesignConfig,
    options: IrlsOptions,
) -> Result<GlmFit> {
    config.validate()?;
    let first = *dates.first().ok_or(Error::Underdetermined {
        observations: 0,
        parameters: config.width(),
    })?;
    let last = *dates.last().unwrap();
    let x: Vec<Vec<f64>> = dates.iter().map(|&d| build_design(d, holidays, config)).collect();
    let fit = fit_irls(&x, deaths, options)?;
    Ok(GlmFit {
        encoding: config.encoding,
        harmonics: config.harmonics,
        period: config.period,
        beta: fit.beta,
        dispersion: fit.dispersion,
        train_span: (first, last),
    })
}

/// Baseline expected deaths for each date; strictly positive.
pub fn predict_mean(fit: &GlmFit, dates: &[CalendarDate], holidays: &HolidayTable) -> Vec<f64> {
    dates.iter().map(|&d| fit.mean_at(d, holidays)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> CalendarDate {
        CalendarDate::parse(s).unwrap()
    }

    #[test]
    fn literal_design() {
        let cfg = GlmDesignConfig {
            encoding: CovariateEncoding::Literal,
            ..Default::default()
        };
        assert_eq!(build_design(d("2023-01-02"), &HolidayTable::default(), &cfg), vec![1.0, 1.0, 1.0, 0.0]);
        let h = HolidayTable::new([d("2023-01-06")]);
        assert_eq!(build_design(d("2023-01-06"), &h, &cfg), vec![1.0, 5.0, 5.0, 1.0]);
    }

    #[test]
    fn categorical_design() {
        let cfg = GlmDesignConfig::default();
        // 2024-01-01 is a Monday at day-of-year 0
        let row = build_design(d("2024-01-01"), &HolidayTable::default(), &cfg);
        assert_eq!(row.len(), 12);
        assert_eq!(row[0], 1.0);
        assert!(row[1..7].iter().all(|&v| v == 0.0));
        assert_eq!(row[7], 0.0);
        assert_eq!(&row[8..], &[0.0, 1.0, 0.0, 1.0]);

        let row = build_design(d("2024-01-07"), &HolidayTable::default(), &cfg);
        assert_eq!(&row[1..7], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn harmonics_bound() {
        let cfg = GlmDesignConfig {
            harmonics: 7,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn intercept_only_constant() {
        let x = vec![vec![1.0]; 50];
        let y = vec![20.0; 50];
        let fit = fit_irls(&x, &y, IrlsOptions::default()).unwrap();
        assert!((fit.beta[0] - 20f64.ln()).abs() < 1e-9);
        assert!(fit.fitted.iter().all(|m| (m - 20.0).abs() < 1e-7));
    }

    #[test]
    fn error_paths() {
        let x = vec![vec![1.0, 2.0, 3.0]; 2];
        assert!(matches!(fit_irls(&x, &[1.0, 2.0], IrlsOptions::default()), Err(Error::Underdetermined { .. })));
        let x = vec![vec![1.0]; 3];
        assert!(matches!(fit_irls(&x, &[0.0, 0.0, 0.0], IrlsOptions::default()), Err(Error::AllZeroCounts)));
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i * 3) as f64).collect();
        assert!(matches!(
            fit_irls(&x, &y, IrlsOptions { max_iter: 1, tol: 1e-300 }),
            Err(Error::NotConverged(1))
        ));
    }

    #[test]
    fn predictions_match_fitted_on_training_dates() {
        let start = d("2020-01-01");
        let dates: Vec<_> = (0..400).map(|i| start.add_days(i)).collect();
        let holidays = HolidayTable::new([d("2020-01-06"), d("2020-05-01")]);
        let y: Vec<f64> = dates.iter().map(|dt| 50.0 + (dt.day_of_year() % 7) as f64).collect();
        let cfg = GlmDesignConfig::default();
        let fit = fit_baseline(&dates, &y, &holidays, &cfg, IrlsOptions::default()).unwrap();
        let x: Vec<Vec<f64>> = dates.iter().map(|&dt| build_design(dt, &holidays, &cfg)).collect();
        let raw = fit_irls(&x, &y, IrlsOptions::default()).unwrap();
        let pred = predict_mean(&fit, &dates, &holidays);
        assert_eq!(pred, raw.fitted);
        assert!(pred.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn fit_json_shape() {
        let fit = GlmFit {
            encoding: CovariateEncoding::CategoricalHarmonic,
            harmonics: 2,
            period: 365.25,
            beta: vec![1.0, 0.5],
            dispersion: 1.1,
            train_span: (d("2020-01-01"), d("2021-12-31")),
        };
        let v: serde_json::Value = serde_json::to_value(&fit).unwrap();
        assert_eq!(v["encoding"], "categorical_harmonic");
        assert_eq!(v["train_span"][0], "2020-01-01");
        let back: GlmFit = serde_json::from_value(v).unwrap();
        assert_eq!(back, fit);
    }
}
