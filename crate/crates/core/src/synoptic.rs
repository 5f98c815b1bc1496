//! Heatwave detection from daily Spatial Synoptic Classification codes.
//!
//! A day belongs to a heatwave when at least one of the three-day windows
//! containing it is either all Dry Tropical, or holds both a Dry Tropical
//! and a Moist Tropical day. Heatwaves are the maximal runs of such days.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{CalendarDate, DailySeries};

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SscCode {
    /// Dry Polar
    DP,
    /// Dry Moderate
    DM,
    /// Dry Tropical
    DT,
    /// Moist Polar
    MP,
    /// Moist Moderate
    MM,
    /// Moist Tropical
    MT,
    /// Transitional or unclassified days.
    OTHER,
}

impl SscCode {
    pub const ALL: [SscCode; 7] = [Self::DP, Self::DM, Self::DT, Self::MP, Self::MM, Self::MT, Self::OTHER];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DP => "DP",
            Self::DM => "DM",
            Self::DT => "DT",
            Self::MP => "MP",
            Self::MM => "MM",
            Self::MT => "MT",
            Self::OTHER => "OTHER",
        }
    }
}

impl fmt::Display for SscCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SscCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownSscCode {
                token: s.to_string(),
                location: "input".into(),
            })
    }
}

/// A maximal run of heatwave days, `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeatwaveEvent {
    pub start: CalendarDate,
    pub end: CalendarDate,
    pub length: u32,
}

impl HeatwaveEvent {
    pub fn new(start: CalendarDate, end: CalendarDate) -> Self {
        assert!(start <= end, "event end before start");
        Self {
            start,
            end,
            length: (end.days_since(start) + 1) as u32,
        }
    }

    pub fn contains(&self, date: CalendarDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn days(&self) -> impl Iterator<Item = CalendarDate> {
        let start = self.start;
        (0..self.length as i64).map(move |i| start.add_days(i))
    }
}

impl fmt::Display for HeatwaveEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

pub fn window_qualifies(w: &[SscCode; 3]) -> bool {
    let all_dry_tropical = w.iter().all(|&c| c == SscCode::DT);
    let mixed_tropical = w.contains(&SscCode::DT) && w.contains(&SscCode::MT);
    all_dry_tropical || mixed_tropical
}

/// Whether day `t` lies in some qualifying three-day window that fits in `codes`.
pub fn day_qualifies(codes: &[SscCode], t: usize) -> bool {
    if codes.len() < 3 || t >= codes.len() {
        return false;
    }
    let first = t.saturating_sub(2);
    let last = t.min(codes.len() - 3);
    (first..=last).any(|s| window_qualifies(&[codes[s], codes[s + 1], codes[s + 2]]))
}

/// Per-day qualification flags.
pub fn qualifying_days(codes: &[SscCode]) -> Vec<bool> {
    let mut marked = vec![false; codes.len()];
    if codes.len() < 3 {
        return marked;
    }
    for s in 0..=codes.len() - 3 {
        if window_qualifies(&[codes[s], codes[s + 1], codes[s + 2]]) {
            marked[s..s + 3].fill(true);
        }
    }
    marked
}

/// Index ranges (inclusive) of maximal runs of qualifying days.
pub fn detect_runs(codes: &[SscCode]) -> Vec<(usize, usize)> {
    let marked = qualifying_days(codes);
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &m) in marked.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, marked.len() - 1));
    }
    runs
}

/// Detects heatwave events over a series; every day must carry an SSC code.
pub fn detect_heatwaves(series: &DailySeries) -> Result<Vec<HeatwaveEvent>> {
    let missing: Vec<CalendarDate> = series.records().iter().filter(|r| r.ssc.is_none()).map(|r| r.date).collect();
    if !missing.is_empty() {
        return Err(Error::MissingValues {
            what: "SSC codes",
            dates: missing,
        });
    }
    let codes: Vec<SscCode> = series.records().iter().map(|r| r.ssc.unwrap()).collect();
    Ok(detect_runs(&codes)
        .into_iter()
        .map(|(s, e)| HeatwaveEvent::new(series.date_at(s), series.date_at(e)))
        .collect())
}

pub fn write_events_csv<W: Write>(events: &[HeatwaveEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["start", "end", "length"])?;
    for e in events {
        w.write_record([e.start.to_string(), e.end.to_string(), e.length.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
