//! Rolling real-time evaluation, confusion metrics and threshold sweeps.
//!
//! Every read of the daily data made by [`run_rolling`] goes through a
//! logging view so the protocol can be audited for look-ahead.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decision::{label_event_with, AlarmConfig, ForecastBundle, HeatwaveLevel};
use crate::error::{Error, Result};
use crate::forecaster::{
    predict_horizon, train_on_samples, training_samples, Checkpoint, FinetuneScope, TransformerConfig,
    TransformerWeights,
};
use crate::glm::{fit_baseline, predict_mean, GlmDesignConfig, GlmFit, IrlsOptions};
use crate::synoptic::{detect_runs, qualifying_days, HeatwaveEvent, SscCode};
use crate::timeseries::{CalendarDate, DailySeries, DenseSeries, HolidayTable};

/// Thresholds that define the ground-truth event levels.
pub const LABEL_THRESHOLDS: AlarmConfig = AlarmConfig {
    alpha_l1: 0.15,
    alpha_l2: 0.30,
};

// ---------------------------------------------------------------------------
// confusion metrics

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, positive: bool, alarm: bool) {
        match (positive, alarm) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Accuracy, precision, recall and F1; `None` marks an undefined value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Result<MetricSet> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricSet {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

/// `(fp / (fp + tn), fn / (fn + tp))`.
pub fn fp_fn_rates(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    (ratio(c.fp, c.fp + c.tn), ratio(c.fn_, c.fn_ + c.tp))
}

/// Percentage with one decimal, or `-` when undefined.
pub fn render_percent(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "-".to_string(),
    }
}

// ---------------------------------------------------------------------------
// outcomes and sweeps

/// Result of evaluating one heatwave.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub event: HeatwaveEvent,
    pub label: HeatwaveLevel,
    /// Observed maximum excess ratio behind `label`.
    pub label_ratio: f64,
    /// Largest forecast ratio over every evaluation of the event.
    pub max_forecast_ratio: f64,
    /// Number of forecast origins used.
    pub origins: usize,
}

impl EventOutcome {
    pub fn alarm(&self, alpha: f64) -> bool {
        self.max_forecast_ratio > alpha
    }
}

/// Tally of outcomes against one level task at threshold `alpha`.
pub fn confusion(outcomes: &[EventOutcome], task: HeatwaveLevel, alpha: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for o in outcomes {
        c.record(o.label.at_least(task), o.alarm(alpha));
    }
    c
}

/// Threshold grid `min, min + step, ..., max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            min: 0.01,
            max: 0.50,
            step: 0.001,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.min.is_finite() && self.max >= self.min) {
            return Err(Error::InvalidParams(format!("bad sweep grid {self:?}")));
        }
        Ok(())
    }

    /// Grid points computed as integer multiples of `step`, so `0.01..0.50`
    /// by `0.001` yields exactly `k / 1000` for `k = 10..=500`.
    pub fn points(&self) -> Vec<f64> {
        let scale = 1.0 / self.step;
        let first = (self.min * scale).round();
        let count = ((self.max - self.min) * scale).round() as usize + 1;
        (0..count).map(|k| (first + k as f64) / scale).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

/// False-positive and false-negative rates over the grid, from cached ratios.
pub fn sweep(outcomes: &[EventOutcome], task: HeatwaveLevel, grid: &SweepGrid) -> Vec<SweepPoint> {
    grid.points()
        .into_iter()
        .map(|alpha| {
            let (fpr, fnr) = fp_fn_rates(&confusion(outcomes, task, alpha));
            SweepPoint { alpha, fpr, fnr }
        })
        .collect()
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `alpha,fpr,fnr`; undefined rates are left empty.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "fpr", "fnr"])?;
    for p in points {
        w.write_record([p.alpha.to_string(), opt_field(p.fpr), opt_field(p.fnr)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_outcomes_csv<W: Write>(outcomes: &[EventOutcome], alarm: &AlarmConfig, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "event_start",
        "event_end",
        "length",
        "label",
        "label_ratio",
        "max_forecast_ratio",
        "origins",
        "alarm_l1",
        "alarm_l2",
    ])?;
    for o in outcomes {
        w.write_record([
            o.event.start.to_string(),
            o.event.end.to_string(),
            o.event.length.to_string(),
            o.label.to_string(),
            o.label_ratio.to_string(),
            o.max_forecast_ratio.to_string(),
            o.origins.to_string(),
            o.alarm(alarm.alpha_l1).to_string(),
            o.alarm(alarm.alpha_l2).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Counts and metrics of one level task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub alpha: f64,
    pub counts: ConfusionCounts,
    pub metrics: Option<MetricSet>,
}

/// Per-region metrics file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    pub events: usize,
    pub l1: LevelReport,
    pub l2: LevelReport,
}

impl RegionMetrics {
    pub fn new(region: &str, outcomes: &[EventOutcome], alarm: &AlarmConfig) -> Self {
        let level = |task, alpha| {
            let counts = confusion(outcomes, task, alpha);
            LevelReport {
                alpha,
                counts,
                metrics: metrics(&counts).ok(),
            }
        };
        Self {
            region: region.to_string(),
            events: outcomes.len(),
            l1: level(HeatwaveLevel::L1, alarm.alpha_l1),
            l2: level(HeatwaveLevel::L2, alarm.alpha_l2),
        }
    }
}

// ---------------------------------------------------------------------------
// audited data access

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessPurpose {
    /// Fitting the forecaster or the baseline.
    Train,
    /// Building a forecast input window.
    Forecast,
    /// Deciding which horizon days belong to a heatwave.
    Decide,
    /// Ground truth: event detection and labeling (not a model input).
    Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataField {
    Mortality,
    Meteo,
    Ssc,
}

/// One read of a half-open index range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub purpose: AccessPurpose,
    pub field: DataField,
    pub start: usize,
    pub end: usize,
    /// Forecast origin the read serves; for training, the earliest origin
    /// the trained model will be used at.
    pub origin: usize,
}

/// Dense data plus SSC codes, handed out only through logged accessors.
struct DataView<'a> {
    data: &'a DenseSeries,
    codes: &'a [SscCode],
    log: Vec<AccessRecord>,
}

impl<'a> DataView<'a> {
    fn note(&mut self, purpose: AccessPurpose, field: DataField, start: usize, end: usize, origin: usize) {
        self.log.push(AccessRecord {
            purpose,
            field,
            start,
            end,
            origin,
        });
    }

    /// Mortality and meteorology before `cutoff`, for training a model first
    /// used at `origin`.
    fn train_prefix(&mut self, cutoff: usize, origin: usize) -> DenseSeries {
        self.note(AccessPurpose::Train, DataField::Mortality, 0, cutoff, origin);
        self.note(AccessPurpose::Train, DataField::Meteo, 0, cutoff, origin);
        self.data.prefix(cutoff)
    }

    /// Deaths on `start..end` for the baseline fit.
    fn train_deaths(&mut self, start: usize, end: usize, origin: usize) -> Vec<f64> {
        self.note(AccessPurpose::Train, DataField::Mortality, start, end, origin);
        self.data.deaths[start..end].to_vec()
    }

    /// Everything up to and including the origin.
    fn history(&mut self, origin: usize) -> DenseSeries {
        self.note(AccessPurpose::Forecast, DataField::Mortality, 0, origin + 1, origin);
        self.note(AccessPurpose::Forecast, DataField::Meteo, 0, origin + 1, origin);
        self.data.prefix(origin + 1)
    }

    /// SSC codes through `origin + horizon`.
    fn codes_through(&mut self, origin: usize, horizon: usize) -> &'a [SscCode] {
        let end = (origin + horizon + 1).min(self.codes.len());
        self.note(AccessPurpose::Decide, DataField::Ssc, 0, end, origin);
        &self.codes[..end]
    }

    fn label_codes(&mut self) -> &'a [SscCode] {
        self.note(AccessPurpose::Label, DataField::Ssc, 0, self.codes.len(), self.codes.len());
        self.codes
    }
}

/// Checks that training reads stop before the origin, forecast inputs end at
/// the origin and SSC reads end at `origin + horizon`.
pub fn audit_access(log: &[AccessRecord], horizon: usize) -> std::result::Result<(), Vec<String>> {
    let mut problems = Vec::new();
    for r in log {
        let limit = match (r.purpose, r.field) {
            (AccessPurpose::Label, _) => continue,
            (AccessPurpose::Train, DataField::Ssc) | (AccessPurpose::Forecast, DataField::Ssc) => {
                problems.push(format!("unexpected SSC read {r:?}"));
                continue;
            }
            (AccessPurpose::Train, _) => r.origin,
            (AccessPurpose::Forecast, _) => r.origin + 1,
            (AccessPurpose::Decide, DataField::Ssc) => r.origin + horizon + 1,
            (AccessPurpose::Decide, _) => {
                problems.push(format!("unexpected decision read {r:?}"));
                continue;
            }
        };
        if r.end > limit {
            problems.push(format!("read past limit {limit}: {r:?}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

// ---------------------------------------------------------------------------
// rolling protocol

/// Settings of one rolling run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollingConfig {
    pub forecaster: TransformerConfig,
    pub glm: GlmDesignConfig,
    pub alarm: AlarmConfig,
}

/// Per-year models produced by a rolling run.
#[derive(Clone, Debug, PartialEq)]
pub struct YearModels {
    pub year: i32,
    pub checkpoint: Checkpoint,
    pub glm: GlmFit,
    /// Exclusive index bound of the training data.
    pub cutoff: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RollingResult {
    pub outcomes: Vec<EventOutcome>,
    pub years: Vec<YearModels>,
    pub access_log: Vec<AccessRecord>,
}

/// One evaluation year of the rolling protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearPlan {
    pub year: i32,
    /// Index of January 1 of `year - 2`, where the baseline window starts.
    pub train_start: usize,
    /// Index of January 1 of `year`.
    pub year_start: usize,
    /// Exclusive bound of the training data: January 1 of `year`, or the day
    /// before the year's first event if that is earlier.
    pub cutoff: usize,
    /// Inclusive index spans of events starting in `year`.
    pub events: Vec<(usize, usize)>,
}

fn year_start_index(start: CalendarDate, len: usize, year: i32) -> usize {
    CalendarDate::first_of_year(year).days_since(start).clamp(0, len as i64) as usize
}

/// Evaluation years (third calendar year onward) of a series of `len` days
/// from `start`, given its detected event spans.
pub fn year_plans(start: CalendarDate, len: usize, runs: &[(usize, usize)]) -> Vec<YearPlan> {
    if len == 0 {
        return Vec::new();
    }
    let first_year = start.year();
    let last_year = start.add_days(len as i64 - 1).year();
    (first_year + 2..=last_year)
        .map(|year| {
            let y0 = year_start_index(start, len, year);
            let y1 = year_start_index(start, len, year + 1);
            let events: Vec<(usize, usize)> = runs.iter().copied().filter(|&(s, _)| s >= y0 && s < y1).collect();
            let cutoff = events.iter().map(|&(s, _)| s.saturating_sub(1)).fold(y0, usize::min);
            YearPlan {
                year,
                train_start: year_start_index(start, len, year - 2),
                year_start: y0,
                cutoff,
                events,
            }
        })
        .collect()
}

/// Observed deaths on `range`, naming any missing days.
pub(crate) fn observed_deaths(series: &DailySeries, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let missing: Vec<CalendarDate> =
        range.clone().filter(|&i| series.records()[i].deaths.is_none()).map(|i| series.date_at(i)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingValues {
            what: "deaths",
            dates: missing,
        });
    }
    Ok(range.map(|i| series.records()[i].deaths.unwrap_or_default()).collect())
}

/// Baseline fit on the plan's two-year window before its cutoff.
pub fn fit_year_baseline(series: &DailySeries, plan: &YearPlan, config: &GlmDesignConfig) -> Result<GlmFit> {
    let dates: Vec<CalendarDate> = (plan.train_start..plan.cutoff).map(|i| series.date_at(i)).collect();
    let deaths = observed_deaths(series, plan.train_start..plan.cutoff)?;
    fit_baseline(&dates, &deaths, &series.holiday_table(), config, IrlsOptions::default())
}

/// Ground-truth level of every scored event, each against its year's
/// baseline refit.
pub fn label_scored_events(series: &DailySeries, config: &GlmDesignConfig) -> Result<Vec<(HeatwaveEvent, HeatwaveLevel, f64)>> {
    let codes = ssc_codes(series)?;
    let start = series.first_date().ok_or_else(|| Error::InsufficientData("empty series".into()))?;
    let mut out = Vec::new();
    for plan in year_plans(start, series.len(), &detect_runs(&codes)) {
        if plan.events.is_empty() {
            continue;
        }
        let glm = fit_year_baseline(series, &plan, config)?;
        for &(s, e) in &plan.events {
            let event = HeatwaveEvent::new(series.date_at(s), series.date_at(e));
            let (level, r) = label_event_with(series, &glm, &event, &LABEL_THRESHOLDS)?;
            out.push((event, level, r));
        }
    }
    Ok(out)
}

fn ssc_codes(series: &DailySeries) -> Result<Vec<SscCode>> {
    let missing: Vec<CalendarDate> = series.records().iter().filter(|r| r.ssc.is_none()).map(|r| r.date).collect();
    if !missing.is_empty() {
        return Err(Error::MissingValues {
            what: "SSC codes",
            dates: missing,
        });
    }
    Ok(series.records().iter().map(|r| r.ssc.unwrap()).collect())
}

/// Days in `lo..=hi` that qualify as heatwave days using only `visible` codes.
fn visible_event_days(visible: &[SscCode], lo: usize, hi: usize) -> Vec<usize> {
    let flags = qualifying_days(visible);
    (lo..=hi).filter(|&i| flags.get(i).copied().unwrap_or(false)).collect()
}

/// Runs the rolling real-time protocol over a complete series.
///
/// The series must have deaths, meteorology and SSC codes on every day
/// (impute first).
pub fn run_rolling(series: &DailySeries, config: &RollingConfig) -> Result<RollingResult> {
    let fc = &config.forecaster;
    fc.validate()?;
    config.glm.validate()?;
    config.alarm.validate()?;
    let data = series.to_dense()?;
    let codes = ssc_codes(series)?;
    let holidays: HolidayTable = series.holiday_table();
    let (first_year, last_year) = match (series.first_date(), series.last_date()) {
        (Some(a), Some(b)) => (a.year(), b.year()),
        _ => return Err(Error::InsufficientData("empty series".into())),
    };
    if last_year - first_year < 2 {
        return Err(Error::InsufficientData(format!(
            "series covers {} calendar years, at least 3 are needed",
            last_year - first_year + 1
        )));
    }

    let mut view = DataView {
        data: &data,
        codes: &codes,
        log: Vec::new(),
    };
    let all_events: Vec<(usize, usize)> = detect_runs(view.label_codes());
    let h = fc.horizon;

    let mut outcomes = Vec::new();
    let mut years = Vec::new();
    let mut weights: Option<TransformerWeights> = None;
    let mut prev_cutoff: usize = 0;

    for plan in year_plans(data.start, data.len(), &all_events) {
        let (year, cutoff, events) = (plan.year, plan.cutoff, &plan.events);
        // forecaster: from scratch once, then fine-tuned
        let train_data = view.train_prefix(cutoff, cutoff);
        let first_target = match (&weights, fc.finetune_scope) {
            (Some(_), FinetuneScope::NewData) => (prev_cutoff + 1).saturating_sub(h),
            _ => 0,
        };
        let samples = training_samples(&train_data, first_target, fc);
        let outcome = train_on_samples(&samples, weights.as_ref(), fc)?;
        log::info!(
            "{year}: trained on {} samples, loss {:.5} -> {:.5}",
            samples.len(),
            outcome.loss_trace.first().copied().unwrap_or(f64::NAN),
            outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
        );
        let w = outcome.weights;

        // baseline: refit on the two previous years
        let g0 = plan.train_start;
        let deaths = view.train_deaths(g0, cutoff, cutoff);
        let dates: Vec<CalendarDate> = (g0..cutoff).map(|i| data.date_at(i)).collect();
        let glm = fit_baseline(&dates, &deaths, &holidays, &config.glm, IrlsOptions::default())?;

        for &(s, e) in events {
            let event = HeatwaveEvent::new(data.date_at(s), data.date_at(e));
            if s < fc.window + 1 {
                log::warn!("skipping {event}: fewer than {} days of history", fc.window);
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut origins = 0;
            let mut t = s - 1;
            loop {
                let history = view.history(t);
                let forecast = predict_horizon(&w, &history, t)?;
                let visible = view.codes_through(t, h);
                let days = visible_event_days(visible, t + 1, e.min(t + h));
                if days.is_empty() {
                    log::warn!("{event}: no visible heatwave days from origin {}", data.date_at(t));
                } else {
                    let dates: Vec<CalendarDate> = days.iter().map(|&i| data.date_at(i)).collect();
                    let all_cause: Vec<f64> = days.iter().map(|&i| forecast[i - t - 1]).collect();
                    let baseline = predict_mean(&glm, &dates, &holidays);
                    let bundle = ForecastBundle::new(dates, all_cause, baseline)?;
                    best = bundle.ratios.iter().copied().fold(best, f64::max);
                    origins += 1;
                }
                if e <= t + h {
                    break;
                }
                t += 1;
            }
            if origins == 0 {
                continue;
            }
            let (label, label_ratio) = label_event_with(series, &glm, &event, &LABEL_THRESHOLDS)?;
            outcomes.push(EventOutcome {
                event,
                label,
                label_ratio,
                max_forecast_ratio: best,
                origins,
            });
        }

        years.push(YearModels {
            year,
            checkpoint: Checkpoint::new(&w, Some(&outcome.optimizer), fc.epochs),
            glm,
            cutoff,
            loss_trace: outcome.loss_trace,
        });
        weights = Some(w);
        prev_cutoff = cutoff;
    }

    Ok(RollingResult {
        outcomes,
        years,
        access_log: view.log,
    })
}

/// Forecast origins an event of `length` days is evaluated at, per the
/// re-evaluation rule (start - 1 until the horizon covers the end).
pub fn origin_count(length: usize, horizon: usize) -> usize {
    length.saturating_sub(horizon) + 1
}
