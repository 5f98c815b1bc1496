//! Temperature-driven comparison models.
//!
//! Two simple predictors of the daily excess ratio from observed
//! temperature: a least-squares projection on seasonal splines crossed with
//! a quadratic in temperature, and an exponential dose-response above a
//! reference temperature. Both pick their alarm thresholds by maximizing F1
//! on the training events.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decision::{label_event_with, HeatwaveLevel};
use crate::error::{Error, Result};
use crate::evaluation::{
    fit_year_baseline, metrics, year_plans, ConfusionCounts, EventOutcome, SweepGrid, LABEL_THRESHOLDS,
};
use crate::glm::{GlmDesignConfig, GlmFit};
use crate::synoptic::{detect_runs, HeatwaveEvent, SscCode};
use crate::timeseries::{CalendarDate, DailySeries, TEMPERATURE};

const SEASON_START_MONTH: u32 = 6;
const SEASON_DAYS: f64 = 121.0;
const SPLINE_KNOTS: usize = 4;
const TEMP_SCALE: f64 = 10.0;
const RIDGE: f64 = 1e-8;

/// Days since June 1 of the same year, clamped to the June–September season.
pub fn day_of_season(date: CalendarDate) -> f64 {
    let start = CalendarDate::from_ymd(date.year(), SEASON_START_MONTH, 1).expect("valid date");
    (date.days_since(start) as f64).clamp(0.0, SEASON_DAYS)
}

pub fn in_season(date: CalendarDate) -> bool {
    (6..=9).contains(&date.month())
}

/// Natural cubic spline basis (truncated power form) at `x`.
fn natural_spline_basis(x: f64, knots: &[f64]) -> Vec<f64> {
    let k = knots.len();
    let last = knots[k - 1];
    let d = |j: usize| {
        let cube = |v: f64| v.max(0.0).powi(3);
        (cube(x - knots[j]) - cube(x - last)) / (last - knots[j])
    };
    let mut basis = Vec::with_capacity(k);
    basis.push(1.0);
    basis.push(x);
    for j in 0..k - 2 {
        basis.push(d(j) - d(k - 2));
    }
    basis
}

/// Linear prediction of daily excess ratio from seasonal splines and
/// temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineProjectionFit {
    /// Knot positions on the unit-scaled day-of-season axis.
    pub knots: Vec<f64>,
    /// Coefficients ordered spline-major: `[s_0, s_0 T, s_0 T^2, s_1, ...]`
    /// with `T` in tens of °C.
    pub coefficients: Vec<f64>,
    pub threshold_l1: f64,
    pub threshold_l2: f64,
}

fn spline_row(date: CalendarDate, temp: f64, knots: &[f64]) -> Vec<f64> {
    let s = natural_spline_basis(day_of_season(date) / SEASON_DAYS, knots);
    let t = temp / TEMP_SCALE;
    s.iter().flat_map(|&b| [b, b * t, b * t * t]).collect()
}

fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let p = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * yv;
    let solved = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => {
            log::warn!("rank-deficient projection basis, adding ridge {RIDGE}");
            let ridged = xtx + DMatrix::identity(p, p) * RIDGE;
            ridged
                .cholesky()
                .ok_or_else(|| Error::SingularFit("ridge-regularized projection".into()))?
                .solve(&xty)
        }
    };
    let beta: Vec<f64> = solved.iter().copied().collect();
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::SingularFit("non-finite projection coefficients".into()));
    }
    Ok(beta)
}

impl SplineProjectionFit {
    pub fn ratio_at(&self, date: CalendarDate, temp: f64) -> f64 {
        spline_row(date, temp, &self.knots).iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }
}

fn temperature_at(series: &DailySeries, i: usize) -> Result<f64> {
    series.records()[i].meteo[TEMPERATURE].ok_or_else(|| Error::MissingValues {
        what: "temperature",
        dates: vec![series.date_at(i)],
    })
}

/// Fits the spline projection on the in-season days of `range`, with
/// observed excess ratios taken against `glm`. Thresholds are left at the
/// label thresholds; see [`calibrate_threshold`].
pub fn fit_spline_projection(
    series: &DailySeries,
    range: std::ops::Range<usize>,
    glm: &GlmFit,
) -> Result<SplineProjectionFit> {
    let knots: Vec<f64> = (0..SPLINE_KNOTS).map(|j| j as f64 / (SPLINE_KNOTS - 1) as f64).collect();
    let holidays = series.holiday_table();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in range {
        let r = &series.records()[i];
        if !in_season(r.date) {
            continue;
        }
        let (Some(deaths), Some(temp)) = (r.deaths, r.meteo[TEMPERATURE]) else {
            continue;
        };
        let base = glm.mean_at(r.date, &holidays);
        rows.push(spline_row(r.date, temp, &knots));
        y.push((deaths - base) / base);
    }
    let p = SPLINE_KNOTS * 3;
    if rows.len() < p {
        return Err(Error::Underdetermined {
            observations: rows.len(),
            parameters: p,
        });
    }
    Ok(SplineProjectionFit {
        knots,
        coefficients: least_squares(&rows, &y)?,
        threshold_l1: LABEL_THRESHOLDS.alpha_l1,
        threshold_l2: LABEL_THRESHOLDS.alpha_l2,
    })
}

/// Exponential excess above a reference temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpProjectionFit {
    pub t0: f64,
    pub beta: f64,
    pub annual_avg_mortality: f64,
    pub threshold_l1: f64,
    pub threshold_l2: f64,
}

impl ExpProjectionFit {
    pub fn excess_at(&self, temp: f64) -> f64 {
        self.annual_avg_mortality * self.ratio_at(temp)
    }

    /// `excess / annual average`.
    pub fn ratio_at(&self, temp: f64) -> f64 {
        (self.beta * (temp - self.t0).max(0.0)).exp_m1()
    }
}

/// Candidate reference temperatures, 25 to 35 °C by 0.5.
pub fn t0_grid() -> Vec<f64> {
    (0..=20).map(|k| 25.0 + 0.5 * k as f64).collect()
}

/// Fits the exponential model on `range` by a grid search over `T0`.
pub fn fit_exp_projection(series: &DailySeries, range: std::ops::Range<usize>) -> Result<ExpProjectionFit> {
    let mut days = Vec::new();
    for i in range {
        let r = &series.records()[i];
        if let (Some(x), Some(t)) = (r.deaths, r.meteo[TEMPERATURE]) {
            days.push((x, t));
        }
    }
    if days.is_empty() {
        return Err(Error::InsufficientData("no days with deaths and temperature".into()));
    }
    let avg = days.iter().map(|d| d.0).sum::<f64>() / days.len() as f64;
    if avg <= 0.0 {
        return Err(Error::AllZeroCounts);
    }
    // log(1 + excess / avg) with excess = X - avg; zero-death days are floored
    let logs: Vec<(f64, f64)> = days.iter().map(|&(x, t)| ((x.max(0.5) / avg).ln(), t)).collect();

    let mut best: Option<(f64, f64, f64)> = None; // (sse over exceedance days, t0, beta)
    for t0 in t0_grid() {
        let (mut su2, mut suy, mut syy) = (0.0, 0.0, 0.0);
        for &(y, t) in &logs {
            let u = t - t0;
            if u > 0.0 {
                su2 += u * u;
                suy += u * y;
                syy += y * y;
            }
        }
        if su2 == 0.0 {
            continue;
        }
        let beta = (suy / su2).max(0.0);
        let sse = syy - 2.0 * beta * suy + beta * beta * su2;
        // days at or below T0 are predicted as zero excess
        let rest: f64 = logs.iter().filter(|&&(_, t)| t <= t0).map(|&(y, _)| y * y).sum();
        let total = sse + rest;
        if best.is_none_or(|(b, _, _)| total < b) {
            best = Some((total, t0, beta));
        }
    }
    let (t0, beta) = match best {
        Some((_, t0, beta)) => (t0, beta),
        None => {
            log::warn!("no training day exceeds any candidate reference temperature");
            (t0_grid()[0], 0.0)
        }
    };
    Ok(ExpProjectionFit {
        t0,
        beta,
        annual_avg_mortality: avg,
        threshold_l1: LABEL_THRESHOLDS.alpha_l1,
        threshold_l2: LABEL_THRESHOLDS.alpha_l2,
    })
}

/// Threshold on the grid with the best F1 over `(score, positive)` pairs.
///
/// Undefined F1 counts as zero; ties keep the smallest threshold. With no
/// positive events the largest grid value is returned.
pub fn calibrate_threshold(scored: &[(f64, bool)], grid: &SweepGrid) -> f64 {
    let points = grid.points();
    let mut best = (f64::NEG_INFINITY, *points.last().unwrap_or(&grid.max));
    if !scored.iter().any(|s| s.1) {
        return best.1;
    }
    for alpha in points {
        let mut c = ConfusionCounts::default();
        for &(score, positive) in scored {
            c.record(positive, score > alpha);
        }
        let f1 = metrics(&c).ok().and_then(|m| m.f1).unwrap_or(0.0);
        if f1 > best.0 {
            best = (f1, alpha);
        }
    }
    best.1
}

/// Either reference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ReferenceFit {
    Spline(SplineProjectionFit),
    Exponential(ExpProjectionFit),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Spline,
    Exponential,
}

impl ReferenceFit {
    pub fn ratio_at(&self, date: CalendarDate, temp: f64) -> f64 {
        match self {
            Self::Spline(f) => f.ratio_at(date, temp),
            Self::Exponential(f) => f.ratio_at(temp),
        }
    }

    pub fn thresholds(&self) -> (f64, f64) {
        match self {
            Self::Spline(f) => (f.threshold_l1, f.threshold_l2),
            Self::Exponential(f) => (f.threshold_l1, f.threshold_l2),
        }
    }

    fn set_thresholds(&mut self, l1: f64, l2: f64) {
        match self {
            Self::Spline(f) => (f.threshold_l1, f.threshold_l2) = (l1, l2),
            Self::Exponential(f) => (f.threshold_l1, f.threshold_l2) = (l1, l2),
        }
    }
}

/// Maximum predicted ratio over an event and the alarms it raises.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePrediction {
    pub max_ratio: f64,
    pub alarm_l1: bool,
    pub alarm_l2: bool,
}

impl ReferencePrediction {
    pub fn alarm(&self, task: HeatwaveLevel) -> bool {
        match task {
            HeatwaveLevel::L2 => self.alarm_l2,
            _ => self.alarm_l1,
        }
    }
}

fn max_event_ratio(fit: &ReferenceFit, series: &DailySeries, event: &HeatwaveEvent) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for date in event.days() {
        let i = series.index_of(date).ok_or_else(|| Error::MissingValues {
            what: "event days",
            dates: vec![date],
        })?;
        best = best.max(fit.ratio_at(date, temperature_at(series, i)?));
    }
    Ok(best)
}

/// Predicts an event from its observed temperatures.
pub fn predict_event(fit: &ReferenceFit, series: &DailySeries, event: &HeatwaveEvent) -> Result<ReferencePrediction> {
    let max_ratio = max_event_ratio(fit, series, event)?;
    let (l1, l2) = fit.thresholds();
    Ok(ReferencePrediction {
        max_ratio,
        alarm_l1: max_ratio > l1,
        alarm_l2: max_ratio > l2,
    })
}

/// Sets both thresholds by maximizing F1 over the events that lie wholly in
/// `range`, labeled against `glm`. `runs` are detected event index spans.
pub fn calibrate_on_training_events(
    fit: &mut ReferenceFit,
    series: &DailySeries,
    runs: &[(usize, usize)],
    range: std::ops::Range<usize>,
    glm: &GlmFit,
    grid: &SweepGrid,
) -> Result<()> {
    let mut scored_l1 = Vec::new();
    let mut scored_l2 = Vec::new();
    for &(s, e) in runs.iter().filter(|&&(s, e)| s >= range.start && e < range.end) {
        let event = HeatwaveEvent::new(series.date_at(s), series.date_at(e));
        let (label, _) = label_event_with(series, glm, &event, &LABEL_THRESHOLDS)?;
        let score = max_event_ratio(fit, series, &event)?;
        scored_l1.push((score, label.at_least(HeatwaveLevel::L1)));
        scored_l2.push((score, label.at_least(HeatwaveLevel::L2)));
    }
    fit.set_thresholds(calibrate_threshold(&scored_l1, grid), calibrate_threshold(&scored_l2, grid));
    Ok(())
}

/// One scored event of a reference rolling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOutcome {
    pub event: HeatwaveEvent,
    pub label: HeatwaveLevel,
    pub label_ratio: f64,
    pub prediction: ReferencePrediction,
}

impl ReferenceOutcome {
    /// Same event as a pipeline outcome, so threshold sweeps apply unchanged.
    pub fn to_event_outcome(&self) -> EventOutcome {
        EventOutcome {
            event: self.event,
            label: self.label,
            label_ratio: self.label_ratio,
            max_forecast_ratio: self.prediction.max_ratio,
            origins: 1,
        }
    }
}

/// Tally against one level task using the calibrated alarms.
pub fn reference_confusion(outcomes: &[ReferenceOutcome], task: HeatwaveLevel) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for o in outcomes {
        c.record(o.label.at_least(task), o.prediction.alarm(task));
    }
    c
}

/// Yearly refit-and-predict loop mirroring the main protocol: models are fit
/// on the two previous years and scored on events starting in the third
/// year onward.
pub fn run_reference_rolling(
    series: &DailySeries,
    kind: ReferenceKind,
    glm_config: &GlmDesignConfig,
    grid: &SweepGrid,
) -> Result<(Vec<ReferenceOutcome>, Vec<(i32, ReferenceFit)>)> {
    let codes: Vec<SscCode> = series
        .records()
        .iter()
        .map(|r| r.ssc)
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidSeries("SSC codes missing".into()))?;
    let runs = detect_runs(&codes);
    let start = series.first_date().ok_or_else(|| Error::InsufficientData("empty series".into()))?;
    let mut outcomes = Vec::new();
    let mut fits = Vec::new();

    for plan in year_plans(start, series.len(), &runs) {
        let (g0, cutoff) = (plan.train_start, plan.cutoff);
        let glm = fit_year_baseline(series, &plan, glm_config)?;

        let mut fit = match kind {
            ReferenceKind::Spline => ReferenceFit::Spline(fit_spline_projection(series, g0..cutoff, &glm)?),
            ReferenceKind::Exponential => ReferenceFit::Exponential(fit_exp_projection(series, g0..cutoff)?),
        };

        calibrate_on_training_events(&mut fit, series, &runs, g0..cutoff, &glm, grid)?;

        for &(s, e) in &plan.events {
            let event = HeatwaveEvent::new(series.date_at(s), series.date_at(e));
            let (label, label_ratio) = label_event_with(series, &glm, &event, &LABEL_THRESHOLDS)?;
            outcomes.push(ReferenceOutcome {
                event,
                label,
                label_ratio,
                prediction: predict_event(&fit, series, &event)?,
            });
        }
        fits.push((plan.year, fit));
    }
    Ok((outcomes, fits))
}
