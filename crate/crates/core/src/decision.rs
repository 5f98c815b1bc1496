//! Excess-ratio alarms and ground-truth event levels.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{predict_mean, GlmFit};
use crate::synoptic::HeatwaveEvent;
use crate::timeseries::{CalendarDate, DailySeries};

/// Paired all-cause and baseline forecasts over a horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub dates: Vec<CalendarDate>,
    pub all_cause: Vec<f64>,
    pub baseline: Vec<f64>,
    pub excess: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl ForecastBundle {
    pub fn new(dates: Vec<CalendarDate>, all_cause: Vec<f64>, baseline: Vec<f64>) -> Result<Self> {
        if dates.len() != all_cause.len() || dates.len() != baseline.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} dates, {} forecasts, {} baselines",
                dates.len(),
                all_cause.len(),
                baseline.len()
            )));
        }
        let ratios = ratios_with_dates(&all_cause, &baseline, |i| dates[i].to_string())?;
        let excess = all_cause.iter().zip(&baseline).map(|(a, b)| a - b).collect();
        Ok(Self {
            dates,
            all_cause,
            baseline,
            excess,
            ratios,
        })
    }
}

/// Alarm thresholds on the excess ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlarmConfig {
    pub alpha_l1: f64,
    pub alpha_l2: f64,
}

impl Default for AlarmConfig {
    fn default() -> Self {
        Self {
            alpha_l1: 0.15,
            alpha_l2: 0.30,
        }
    }
}

impl AlarmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_l1 > 0.0 && self.alpha_l1 <= self.alpha_l2 && self.alpha_l2.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "thresholds must satisfy 0 < alpha_l1 <= alpha_l2, got {} and {}",
                self.alpha_l1, self.alpha_l2
            )));
        }
        Ok(())
    }

    /// Level implied by a maximum ratio under these thresholds.
    pub fn level(&self, ratio: f64) -> HeatwaveLevel {
        if ratio > self.alpha_l2 {
            HeatwaveLevel::L2
        } else if ratio > self.alpha_l1 {
            HeatwaveLevel::L1
        } else {
            HeatwaveLevel::L0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HeatwaveLevel {
    L0,
    L1,
    L2,
}

impl HeatwaveLevel {
    /// Whether this level counts as positive for the given task level.
    pub fn at_least(self, task: HeatwaveLevel) -> bool {
        self >= task
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L0 => "L0",
            Self::L1 => "L1",
            Self::L2 => "L2",
        }
    }
}

impl fmt::Display for HeatwaveLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn ratios_with_dates(all_cause: &[f64], baseline: &[f64], day: impl Fn(usize) -> String) -> Result<Vec<f64>> {
    if all_cause.len() != baseline.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} forecasts against {} baselines",
            all_cause.len(),
            baseline.len()
        )));
    }
    all_cause
        .iter()
        .zip(baseline)
        .enumerate()
        .map(|(i, (&x, &b))| {
            if b > 0.0 && b.is_finite() {
                Ok((x - b) / b)
            } else {
                Err(Error::NonPositiveBaseline { date: day(i), value: b })
            }
        })
        .collect()
}

/// Per-day `(all_cause - baseline) / baseline`.
pub fn excess_ratios(all_cause: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    ratios_with_dates(all_cause, baseline, |i| format!("day {i}"))
}

/// True iff the largest ratio over `event_days` strictly exceeds `alpha`.
pub fn decide_alarm(bundle: &ForecastBundle, event_days: &[CalendarDate], alpha: f64) -> Result<bool> {
    Ok(max_ratio_over(bundle, event_days)? > alpha)
}

/// Largest ratio over the bundle days that are also event days.
pub fn max_ratio_over(bundle: &ForecastBundle, event_days: &[CalendarDate]) -> Result<f64> {
    bundle
        .dates
        .iter()
        .zip(&bundle.ratios)
        .filter(|(d, _)| event_days.contains(d))
        .map(|(_, &r)| r)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
        .ok_or(Error::EmptyHorizon)
}

/// Observed level of an event against a baseline fit.
pub fn label_event(series: &DailySeries, fit: &GlmFit, event: &HeatwaveEvent) -> Result<(HeatwaveLevel, f64)> {
    label_event_with(series, fit, event, &AlarmConfig::default())
}

pub fn label_event_with(
    series: &DailySeries,
    fit: &GlmFit,
    event: &HeatwaveEvent,
    thresholds: &AlarmConfig,
) -> Result<(HeatwaveLevel, f64)> {
    let mut observed = Vec::with_capacity(event.length as usize);
    let mut missing = Vec::new();
    let dates: Vec<CalendarDate> = event.days().collect();
    for &d in &dates {
        match series.index_of(d).and_then(|i| series.records()[i].deaths) {
            Some(x) => observed.push(x),
            None => missing.push(d),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingValues {
            what: "deaths",
            dates: missing,
        });
    }
    let baseline = predict_mean(fit, &dates, &series.holiday_table());
    let ratios = ratios_with_dates(&observed, &baseline, |i| dates[i].to_string())?;
    let r = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((thresholds.level(r), r))
}

/// One row of the alarm CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub event_start: CalendarDate,
    pub event_end: CalendarDate,
    pub alpha_l1: f64,
    pub alpha_l2: f64,
    pub max_ratio: f64,
    pub alarm_l1: bool,
    pub alarm_l2: bool,
    pub label: HeatwaveLevel,
}

impl AlarmRecord {
    pub fn new(event: &HeatwaveEvent, config: &AlarmConfig, max_ratio: f64, label: HeatwaveLevel) -> Self {
        Self {
            event_start: event.start,
            event_end: event.end,
            alpha_l1: config.alpha_l1,
            alpha_l2: config.alpha_l2,
            max_ratio,
            alarm_l1: max_ratio > config.alpha_l1,
            alarm_l2: max_ratio > config.alpha_l2,
            label,
        }
    }
}

pub fn write_alarms_csv<W: Write>(records: &[AlarmRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record([
            "event_start",
            "event_end",
            "alpha_l1",
            "alpha_l2",
            "max_ratio",
            "alarm_l1",
            "alarm_l2",
            "label",
        ])?;
    }
    w.flush()?;
    Ok(())
}
