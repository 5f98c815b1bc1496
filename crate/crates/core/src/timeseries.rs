//! Daily time-series model: calendar dates, aligned mortality/meteorology
//! records, CSV ingestion, imputation and normalization.
//!
//! A [`DailySeries`] is always a dense calendar: every day between the first
//! and last record has a row, and gaps are carried as missing values rather
//! than absent rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synoptic::SscCode;

/// Number of meteorological variables carried per day.
pub const METEO_DIMS: usize = 4;

/// CSV column names of the meteorological variables, in storage order.
pub const METEO_COLUMNS: [&str; METEO_DIMS] = ["temp_c", "pressure_hpa", "wind_ms", "humidity_pct"];

/// Storage index of the temperature column.
pub const TEMPERATURE: usize = 0;
/// Storage index of the humidity column.
pub const HUMIDITY: usize = 3;

/// A civil calendar day (proleptic Gregorian, no timezone).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CalendarDate(NaiveDate);

impl CalendarDate {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, day).map(Self)
    }

    /// Parses a strict `YYYY-MM-DD` date.
    pub fn parse(s: &str) -> Option<Self> {
        let b = s.as_bytes();
        if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
            return None;
        }
        let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
        if !(digits(0..4) && digits(5..7) && digits(8..10)) {
            return None;
        }
        let year = s[0..4].parse().ok()?;
        let month = s[5..7].parse().ok()?;
        let day = s[8..10].parse().ok()?;
        Self::from_ymd(year, month, day)
    }

    pub fn year(self) -> i32 {
        self.0.year()
    }

    pub fn month(self) -> u32 {
        self.0.month()
    }

    pub fn day(self) -> u32 {
        self.0.day()
    }

    /// ISO day of week, 1 = Monday .. 7 = Sunday.
    pub fn day_of_week(self) -> u32 {
        self.0.weekday().number_from_monday()
    }

    /// Zero-based day of year, 0..=365.
    pub fn day_of_year(self) -> u32 {
        self.0.ordinal0()
    }

    pub fn add_days(self, days: i64) -> Self {
        Self(self.0 + Duration::days(days))
    }

    pub fn succ(self) -> Self {
        self.add_days(1)
    }

    pub fn pred(self) -> Self {
        self.add_days(-1)
    }

    /// Signed number of days from `earlier` to `self`.
    pub fn days_since(self, earlier: Self) -> i64 {
        (self.0 - earlier.0).num_days()
    }

    pub fn first_of_year(year: i32) -> Self {
        Self(NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year"))
    }
}

impl fmt::Display for CalendarDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%d"))
    }
}

impl FromStr for CalendarDate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::parse(s).ok_or_else(|| format!("malformed date {s:?}"))
    }
}

impl Serialize for CalendarDate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalendarDate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLevel {
    City,
    Province,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DailyRecord {
    pub date: CalendarDate,
    /// Daily all-cause deaths; real-valued after provincial scaling.
    pub deaths: Option<f64>,
    /// Temperature (°C), pressure (hPa), wind speed (m/s), humidity (%).
    pub meteo: [Option<f64>; METEO_DIMS],
    pub holiday: bool,
    pub ssc: Option<SscCode>,
}

impl DailyRecord {
    pub fn empty(date: CalendarDate) -> Self {
        Self {
            date,
            deaths: None,
            meteo: [None; METEO_DIMS],
            holiday: false,
            ssc: None,
        }
    }
}

/// A dense, date-ordered daily series for one region.
#[derive(Clone, Debug, PartialEq)]
pub struct DailySeries {
    region_name: String,
    level: RegionLevel,
    records: Vec<DailyRecord>,
}

impl DailySeries {
    pub fn new(region_name: impl Into<String>, level: RegionLevel, records: Vec<DailyRecord>) -> Result<Self> {
        for pair in records.windows(2) {
            if pair[1].date != pair[0].date.succ() {
                return Err(Error::InvalidSeries(format!(
                    "records must be consecutive days, found {} after {}",
                    pair[1].date, pair[0].date
                )));
            }
        }
        for r in &records {
            if let Some(d) = r.deaths {
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::InvalidSeries(format!("invalid death count {d} on {}", r.date)));
                }
            }
            if let Some(h) = r.meteo[HUMIDITY] {
                if !(0.0..=100.0).contains(&h) {
                    return Err(Error::InvalidSeries(format!("humidity {h} out of range on {}", r.date)));
                }
            }
            if r.meteo.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSeries(format!("non-finite meteorology on {}", r.date)));
            }
        }
        Ok(Self {
            region_name: region_name.into(),
            level,
            records,
        })
    }

    pub fn region_name(&self) -> &str {
        &self.region_name
    }

    pub fn level(&self) -> RegionLevel {
        self.level
    }

    pub fn records(&self) -> &[DailyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_date(&self) -> Option<CalendarDate> {
        self.records.first().map(|r| r.date)
    }

    pub fn last_date(&self) -> Option<CalendarDate> {
        self.records.last().map(|r| r.date)
    }

    /// Position of `date` in the series, if inside its span.
    pub fn index_of(&self, date: CalendarDate) -> Option<usize> {
        let first = self.first_date()?;
        let offset = date.days_since(first);
        (offset >= 0 && (offset as usize) < self.records.len()).then_some(offset as usize)
    }

    pub fn date_at(&self, index: usize) -> CalendarDate {
        self.records[index].date
    }

    pub fn holiday_table(&self) -> HolidayTable {
        HolidayTable(self.records.iter().filter(|r| r.holiday).map(|r| r.date).collect())
    }

    /// Dates whose death count is missing.
    pub fn missing_deaths(&self) -> Vec<CalendarDate> {
        self.records.iter().filter(|r| r.deaths.is_none()).map(|r| r.date).collect()
    }

    /// Copy of the records in the index range as a new series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            region_name: self.region_name.clone(),
            level: self.level,
            records: self.records[range].to_vec(),
        }
    }

    /// Dense numeric view; fails if any death count or meteorological value is missing.
    pub fn to_dense(&self) -> Result<DenseSeries> {
        let missing: Vec<CalendarDate> = self
            .records
            .iter()
            .filter(|r| r.deaths.is_none() || r.meteo.iter().any(Option::is_none))
            .map(|r| r.date)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingValues {
                what: "mortality or meteorology",
                dates: missing,
            });
        }
        let start = self.first_date().ok_or_else(|| Error::InsufficientData("empty series".into()))?;
        Ok(DenseSeries {
            start,
            deaths: self.records.iter().map(|r| r.deaths.unwrap()).collect(),
            meteo: self.records.iter().map(|r| r.meteo.map(Option::unwrap)).collect(),
        })
    }

    pub(crate) fn records_mut(&mut self) -> &mut [DailyRecord] {
        &mut self.records
    }
}

/// Gap-free numeric columns of a series, indexed by day offset from `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSeries {
    pub start: CalendarDate,
    pub deaths: Vec<f64>,
    pub meteo: Vec<[f64; METEO_DIMS]>,
}

impl DenseSeries {
    pub fn len(&self) -> usize {
        self.deaths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deaths.is_empty()
    }

    pub fn date_at(&self, index: usize) -> CalendarDate {
        self.start.add_days(index as i64)
    }

    pub fn index_of(&self, date: CalendarDate) -> Option<usize> {
        let offset = date.days_since(self.start);
        (offset >= 0 && (offset as usize) < self.len()).then_some(offset as usize)
    }

    /// Leading `len` days.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            start: self.start,
            deaths: self.deaths[..len].to_vec(),
            meteo: self.meteo[..len].to_vec(),
        }
    }
}

/// Set of official holidays, supplied externally.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HolidayTable(BTreeSet<CalendarDate>);

impl HolidayTable {
    pub fn new(dates: impl IntoIterator<Item = CalendarDate>) -> Self {
        Self(dates.into_iter().collect())
    }

    pub fn contains(&self, date: CalendarDate) -> bool {
        self.0.contains(&date)
    }

    pub fn iter(&self) -> impl Iterator<Item = CalendarDate> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalendarCovariates {
    /// 1 = Monday .. 7 = Sunday.
    pub day_of_week: u32,
    /// Zero-based day of year.
    pub day_of_year: u32,
    pub holiday: bool,
}

pub fn calendar_covariates(date: CalendarDate, holidays: &HolidayTable) -> CalendarCovariates {
    CalendarCovariates {
        day_of_week: date.day_of_week(),
        day_of_year: date.day_of_year(),
        holiday: holidays.contains(date),
    }
}

/// Paths of the four input tables of one region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub mortality: PathBuf,
    pub meteo: PathBuf,
    pub ssc: PathBuf,
    pub holidays: PathBuf,
}

impl InputPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            mortality: dir.join("mortality.csv"),
            meteo: dir.join("meteo.csv"),
            ssc: dir.join("ssc.csv"),
            holidays: dir.join("holidays.csv"),
        }
    }
}

struct Rows {
    path: PathBuf,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_rows(path: &Path, expected_header: &[&str]) -> Result<Rows> {
    let file = std::fs::File::open(path)?;
    read_rows_from(file, path, expected_header)
}

fn read_rows_from<R: Read>(reader: R, path: &Path, expected_header: &[&str]) -> Result<Rows> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let header_ok = header.len() == expected_header.len()
        && header.iter().zip(expected_header).all(|(a, b)| a.trim() == *b);
    if !header_ok {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {:?}, found {:?}", expected_header, header.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != expected_header.len() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", expected_header.len(), rec.len()),
            });
        }
        rows.push((line, rec));
    }
    Ok(Rows {
        path: path.to_path_buf(),
        rows,
    })
}

impl Rows {
    fn date(&self, line: usize, field: &str) -> Result<CalendarDate> {
        CalendarDate::parse(field.trim()).ok_or_else(|| Error::MalformedDate {
            path: self.path.clone(),
            line,
            value: field.to_string(),
        })
    }

    fn keyed<T>(&self, mut parse: impl FnMut(usize, &csv::StringRecord) -> Result<T>) -> Result<BTreeMap<CalendarDate, T>> {
        let mut out = BTreeMap::new();
        for (line, rec) in &self.rows {
            let date = self.date(*line, &rec[0])?;
            let value = parse(*line, rec)?;
            if out.insert(date, value).is_some() {
                return Err(Error::DuplicateDate {
                    path: self.path.clone(),
                    line: *line,
                    date,
                });
            }
        }
        Ok(out)
    }

    fn malformed(&self, line: usize, message: String) -> Error {
        Error::MalformedRow {
            path: self.path.clone(),
            line,
            message,
        }
    }
}

fn parse_deaths(rows: &Rows, line: usize, field: &str) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    if field.starts_with('-') {
        return Err(Error::NegativeDeaths {
            path: rows.path.clone(),
            line,
            value: field.to_string(),
        });
    }
    field
        .parse::<u64>()
        .map(|v| Some(v as f64))
        .map_err(|_| rows.malformed(line, format!("death count {field:?} is not a non-negative integer")))
}

fn parse_meteo(rows: &Rows, line: usize, rec: &csv::StringRecord) -> Result<[Option<f64>; METEO_DIMS]> {
    let mut out = [None; METEO_DIMS];
    for (k, slot) in out.iter_mut().enumerate() {
        let field = rec[k + 1].trim();
        if field.is_empty() {
            continue;
        }
        let v: f64 = field
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| rows.malformed(line, format!("{} value {field:?} is not a number", METEO_COLUMNS[k])))?;
        if k == HUMIDITY && !(0.0..=100.0).contains(&v) {
            return Err(rows.malformed(line, format!("humidity {v} outside [0, 100]")));
        }
        *slot = Some(v);
    }
    Ok(out)
}

/// Reads and date-aligns the mortality, meteorology, SSC and holiday tables.
///
/// The resulting series spans the earliest to the latest date found in the
/// mortality, meteorology and SSC tables. The holiday table is a lookup and
/// does not extend the span.
pub fn ingest_csv(paths: &InputPaths, region_name: &str, level: RegionLevel) -> Result<DailySeries> {
    let mortality = read_rows(&paths.mortality, &["date", "deaths"])?;
    let meteo = read_rows(&paths.meteo, &["date", METEO_COLUMNS[0], METEO_COLUMNS[1], METEO_COLUMNS[2], METEO_COLUMNS[3]])?;
    let ssc = read_rows(&paths.ssc, &["date", "code"])?;
    let holidays = read_rows(&paths.holidays, &["date"])?;
    merge_tables(mortality, meteo, ssc, holidays, region_name, level)
}

fn merge_tables(mortality: Rows, meteo: Rows, ssc: Rows, holidays: Rows, region_name: &str, level: RegionLevel) -> Result<DailySeries> {
    let deaths = mortality.keyed(|line, rec| parse_deaths(&mortality, line, &rec[1]))?;
    let met = meteo.keyed(|line, rec| parse_meteo(&meteo, line, rec))?;
    let codes = ssc.keyed(|line, rec| {
        SscCode::from_str(rec[1].trim()).map_err(|_| Error::UnknownSscCode {
            token: rec[1].to_string(),
            location: format!("{}:{line}", ssc.path.display()),
        })
    })?;
    let hol = holidays.keyed(|_, _| Ok(()))?;

    let first = [deaths.keys().next(), met.keys().next(), codes.keys().next()].into_iter().flatten().min().copied();
    let last = [deaths.keys().next_back(), met.keys().next_back(), codes.keys().next_back()]
        .into_iter()
        .flatten()
        .max()
        .copied();
    let mut records = Vec::new();
    if let (Some(first), Some(last)) = (first, last) {
        let mut date = first;
        while date <= last {
            records.push(DailyRecord {
                date,
                deaths: deaths.get(&date).copied().flatten(),
                meteo: met.get(&date).copied().unwrap_or([None; METEO_DIMS]),
                holiday: hol.contains_key(&date),
                ssc: codes.get(&date).copied(),
            });
            date = date.succ();
        }
    }
    DailySeries::new(region_name, level, records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_mortality_csv<W: Write>(series: &DailySeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "deaths"])?;
    for r in series.records() {
        w.write_record([r.date.to_string(), fmt_opt(r.deaths)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_meteo_csv<W: Write>(series: &DailySeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date"];
    header.extend(METEO_COLUMNS);
    w.write_record(&header)?;
    for r in series.records() {
        let mut row = vec![r.date.to_string()];
        row.extend(r.meteo.iter().map(|v| fmt_opt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ssc_csv<W: Write>(series: &DailySeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "code"])?;
    for r in series.records() {
        if let Some(code) = r.ssc {
            w.write_record([r.date.to_string(), code.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_holidays_csv<W: Write>(series: &DailySeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date"])?;
    for r in series.records().iter().filter(|r| r.holiday) {
        w.write_record([r.date.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the four input tables into `paths`.
pub fn write_csv(series: &DailySeries, paths: &InputPaths) -> Result<()> {
    write_mortality_csv(series, std::fs::File::create(&paths.mortality)?)?;
    write_meteo_csv(series, std::fs::File::create(&paths.meteo)?)?;
    write_ssc_csv(series, std::fs::File::create(&paths.ssc)?)?;
    write_holidays_csv(series, std::fs::File::create(&paths.holidays)?)?;
    Ok(())
}

/// Fills missing death counts with the rounded mean of the same calendar
/// month over all strictly earlier years.
pub fn impute_mortality(series: &DailySeries) -> Result<DailySeries> {
    // (year, month) -> (sum, count) over observed values only
    let mut monthly: BTreeMap<(i32, u32), (f64, usize)> = BTreeMap::new();
    for r in series.records() {
        if let Some(d) = r.deaths {
            let e = monthly.entry((r.date.year(), r.date.month())).or_default();
            e.0 += d;
            e.1 += 1;
        }
    }
    let mut out = series.clone();
    for r in out.records_mut() {
        if r.deaths.is_some() {
            continue;
        }
        let (year, month) = (r.date.year(), r.date.month());
        let (sum, n) = monthly
            .range((i32::MIN, month)..(year, month))
            .filter(|((_, m), _)| *m == month)
            .fold((0.0, 0usize), |acc, (_, (s, c))| (acc.0 + s, acc.1 + c));
        if n == 0 {
            return Err(Error::Unimputable(r.date));
        }
        let mean = sum / n as f64;
        r.deaths = Some((mean + 0.5).floor());
    }
    Ok(out)
}

/// Fills each missing meteorological value with the mean of all observed
/// values of that variable strictly before it.
pub fn impute_meteo(series: &DailySeries) -> Result<DailySeries> {
    let mut out = series.clone();
    for k in 0..METEO_DIMS {
        if let Some(first) = out.records().first() {
            if first.meteo[k].is_none() {
                return Err(Error::MissingLeadingMeteo {
                    variable: METEO_COLUMNS[k],
                });
            }
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for r in out.records_mut() {
            match r.meteo[k] {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => r.meteo[k] = Some(sum / n as f64),
            }
        }
    }
    Ok(out)
}

/// Divides provincial death counts by one hundred. City series pass through
/// unchanged with a warning.
pub fn scale_provincial(series: &DailySeries) -> DailySeries {
    if series.level() != RegionLevel::Province {
        log::warn!("scale_provincial called on city-level series {:?}; leaving it unchanged", series.region_name());
        return series.clone();
    }
    let mut out = series.clone();
    for r in out.records_mut() {
        r.deaths = r.deaths.map(|d| d / 100.0);
    }
    out
}

/// Normalizes `history[t]` against the envelope formed by the minimum of the
/// strictly earlier values and the maximum up to and including `t`.
///
/// `t` is a zero-based index and must be at least 1. A degenerate envelope
/// (min = max) maps to 0.5.
pub fn normalize_minmax(history: &[f64], t: usize) -> Result<f64> {
    if t == 0 || t >= history.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: history.len(),
        });
    }
    Ok(Envelope::as_of(history, t)?.normalize(history[t]))
}

/// Historical normalization envelope as of one day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub min: f64,
    pub max: f64,
}

impl Envelope {
    /// min over `history[..t]`, max over `history[..=t]`.
    pub fn as_of(history: &[f64], t: usize) -> Result<Self> {
        if t == 0 || t >= history.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: history.len(),
            });
        }
        let min = history[..t].iter().copied().fold(f64::INFINITY, f64::min);
        let max = history[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.5
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            y * (self.max - self.min) + self.min
        }
    }
}

/// Running envelopes for every day of a column: entry `t` equals
/// `Envelope::as_of(column, t)` for `t >= 1`; entry 0 is degenerate.
pub fn running_envelopes(column: &[f64]) -> Vec<Envelope> {
    let mut out = Vec::with_capacity(column.len());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (t, &x) in column.iter().enumerate() {
        max = max.max(x);
        if t == 0 {
            out.push(Envelope { min: x, max: x });
        } else {
            out.push(Envelope { min, max });
        }
        min = min.min(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> CalendarDate {
        CalendarDate::parse(s).unwrap()
    }

    fn series_with_deaths(start: &str, deaths: &[Option<f64>]) -> DailySeries {
        let start = d(start);
        let records = deaths
            .iter()
            .enumerate()
            .map(|(i, &x)| DailyRecord {
                deaths: x,
                ..DailyRecord::empty(start.add_days(i as i64))
            })
            .collect();
        DailySeries::new("test", RegionLevel::City, records).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn paths(dir: &Path, mortality: &str, meteo: &str, ssc: &str, holidays: &str) -> InputPaths {
        InputPaths {
            mortality: write(dir, "m.csv", mortality),
            meteo: write(dir, "w.csv", meteo),
            ssc: write(dir, "s.csv", ssc),
            holidays: write(dir, "h.csv", holidays),
        }
    }

    const METEO_HEADER: &str = "date,temp_c,pressure_hpa,wind_ms,humidity_pct\n";

    #[test]
    fn ingest_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(
            dir.path(),
            "date,deaths\n2020-01-01,5\n2020-01-02,6\n2020-01-03,7\n",
            METEO_HEADER,
            "date,code\n",
            "date\n",
        );
        let s = ingest_csv(&p, "x", RegionLevel::City).unwrap();
        assert_eq!(s.len(), 3);
        let deaths: Vec<_> = s.records().iter().map(|r| r.deaths.unwrap()).collect();
        assert_eq!(deaths, vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn ingest_alignment_marks_missing_meteo() {
        let dir = tempfile::tempdir().unwrap();
        let mut mort = String::from("date,deaths\n");
        let mut met = String::from(METEO_HEADER);
        for day in 1..=10 {
            mort.push_str(&format!("2020-01-{day:02},10\n"));
            if day >= 3 {
                met.push_str(&format!("2020-01-{day:02},12.5,1013,3,60\n"));
            }
        }
        let p = paths(dir.path(), &mort, &met, "date,code\n2020-01-05,DT\n", "date\n2020-01-06\n");
        let s = ingest_csv(&p, "x", RegionLevel::City).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.records()[0].meteo.iter().all(Option::is_none));
        assert!(s.records()[1].meteo.iter().all(Option::is_none));
        assert_eq!(s.records()[2].meteo[0], Some(12.5));
        assert_eq!(s.records()[4].ssc, Some(SscCode::DT));
        assert!(s.records()[5].holiday);
        assert!(!s.records()[4].holiday);
    }

    #[test]
    fn ingest_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = paths(dir.path(), "date,deaths\n2020-02-30,5\n", METEO_HEADER, "date,code\n", "date\n");
        assert!(matches!(ingest_csv(&p, "x", RegionLevel::City), Err(Error::MalformedDate { line: 2, .. })));

        let p = paths(dir.path(), "date,deaths\n2020-02-01,-3\n", METEO_HEADER, "date,code\n", "date\n");
        assert!(matches!(ingest_csv(&p, "x", RegionLevel::City), Err(Error::NegativeDeaths { .. })));

        let p = paths(dir.path(), "date,deaths\n2020-02-01,3\n2020-02-01,4\n", METEO_HEADER, "date,code\n", "date\n");
        assert!(matches!(ingest_csv(&p, "x", RegionLevel::City), Err(Error::DuplicateDate { line: 3, .. })));

        let p = paths(dir.path(), "date,deaths\n2020-02-01,3\n", METEO_HEADER, "date,code\n2020-02-01,XX\n", "date\n");
        assert!(matches!(ingest_csv(&p, "x", RegionLevel::City), Err(Error::UnknownSscCode { .. })));

        let p = paths(dir.path(), "date,deaths\n2020-02-01,3\n", &format!("{METEO_HEADER}2020-02-01,1,2,3,140\n"), "date,code\n", "date\n");
        assert!(matches!(ingest_csv(&p, "x", RegionLevel::City), Err(Error::MalformedRow { .. })));
    }

    #[test]
    fn impute_mortality_uses_prior_year_monthly_means() {
        let mut records = Vec::new();
        let mut date = d("2019-06-01");
        while date <= d("2021-06-30") {
            let deaths = match (date.year(), date.month()) {
                (2019, 6) => Some(30.0),
                (2020, 6) => Some(40.0),
                (2021, 6) if date.day() == 15 => None,
                _ => Some(50.0),
            };
            records.push(DailyRecord {
                deaths,
                ..DailyRecord::empty(date)
            });
            date = date.succ();
        }
        let s = DailySeries::new("x", RegionLevel::City, records).unwrap();
        let out = impute_mortality(&s).unwrap();
        let idx = out.index_of(d("2021-06-15")).unwrap();
        assert_eq!(out.records()[idx].deaths, Some(35.0));
        assert!(out.missing_deaths().is_empty());
    }

    #[test]
    fn impute_mortality_rounds_half_up() {
        let mut records = Vec::new();
        let mut date = d("2019-06-01");
        while date <= d("2020-06-30") {
            let deaths = if date.year() == 2020 && date.month() == 6 {
                None
            } else if date.month() == 6 {
                // June 2019 alternating 10 and 11 -> mean 10.5
                Some(if date.day() % 2 == 0 { 10.0 } else { 11.0 })
            } else {
                Some(0.0)
            };
            records.push(DailyRecord {
                deaths,
                ..DailyRecord::empty(date)
            });
            date = date.succ();
        }
        let s = DailySeries::new("x", RegionLevel::City, records).unwrap();
        let out = impute_mortality(&s).unwrap();
        assert_eq!(out.records().last().unwrap().deaths, Some(11.0));
    }

    #[test]
    fn impute_mortality_identity_and_error() {
        let s = series_with_deaths("1995-06-14", &[Some(1.0), Some(2.0)]);
        assert_eq!(impute_mortality(&s).unwrap(), s);
        let s = series_with_deaths("1995-06-14", &[Some(1.0), None]);
        match impute_mortality(&s) {
            Err(Error::Unimputable(date)) => assert_eq!(date, d("1995-06-15")),
            other => panic!("expected unimputable error, got {other:?}"),
        }
    }

    fn temps(values: &[Option<f64>]) -> DailySeries {
        let start = d("2020-01-01");
        let records = values
            .iter()
            .enumerate()
            .map(|(i, &t)| DailyRecord {
                meteo: [t, Some(1000.0), Some(2.0), Some(50.0)],
                ..DailyRecord::empty(start.add_days(i as i64))
            })
            .collect();
        DailySeries::new("x", RegionLevel::City, records).unwrap()
    }

    #[test]
    fn impute_meteo_examples() {
        let out = impute_meteo(&temps(&[Some(10.0), None, Some(20.0)])).unwrap();
        let t: Vec<_> = out.records().iter().map(|r| r.meteo[0].unwrap()).collect();
        assert_eq!(t, vec![10.0, 10.0, 20.0]);

        let out = impute_meteo(&temps(&[Some(10.0), Some(20.0), None])).unwrap();
        assert_eq!(out.records()[2].meteo[0], Some(15.0));

        assert!(matches!(
            impute_meteo(&temps(&[None, Some(1.0)])),
            Err(Error::MissingLeadingMeteo { variable: "temp_c" })
        ));
    }

    #[test]
    fn provincial_scaling() {
        let s = series_with_deaths("2020-01-01", &[Some(250.0), Some(300.0), Some(0.0)]);
        let p = DailySeries::new("p", RegionLevel::Province, s.records().to_vec()).unwrap();
        let scaled = scale_provincial(&p);
        let v: Vec<_> = scaled.records().iter().map(|r| r.deaths.unwrap()).collect();
        assert_eq!(v, vec![2.5, 3.0, 0.0]);
        assert_eq!(scale_provincial(&s), s);
    }

    #[test]
    fn minmax_examples() {
        let h = [10.0, 20.0, 30.0];
        // the envelope top is the value itself when it is a running maximum
        assert_eq!(normalize_minmax(&h, 1).unwrap(), 1.0);
        assert_eq!(normalize_minmax(&h, 2).unwrap(), 1.0);
        assert_eq!(normalize_minmax(&[10.0, 30.0, 20.0], 2).unwrap(), 0.5);
        assert_eq!(normalize_minmax(&[7.0, 7.0, 7.0], 2).unwrap(), 0.5);
        assert!(normalize_minmax(&h, 0).is_err());
        assert!(normalize_minmax(&h, 3).is_err());
    }

    #[test]
    fn envelope_inverse_pair() {
        let e = Envelope { min: 3.0, max: 11.0 };
        for x in [3.0, 4.25, 11.0, 20.0] {
            assert!((e.denormalize(e.normalize(x)) - x).abs() < 1e-12);
        }
        let flat = Envelope { min: 7.0, max: 7.0 };
        assert_eq!(flat.denormalize(0.5), 7.0);
    }

    #[test]
    fn covariates() {
        let holidays = HolidayTable::new([d("2023-01-06")]);
        let c = calendar_covariates(d("2023-01-02"), &holidays);
        assert_eq!((c.day_of_week, c.day_of_year, c.holiday), (1, 1, false));
        let c = calendar_covariates(d("2020-12-31"), &holidays);
        assert_eq!((c.day_of_week, c.day_of_year), (4, 365));
        assert!(calendar_covariates(d("2023-01-06"), &holidays).holiday);
    }

    #[test]
    fn series_rejects_gaps() {
        let records = vec![DailyRecord::empty(d("2020-01-01")), DailyRecord::empty(d("2020-01-03"))];
        assert!(DailySeries::new("x", RegionLevel::City, records).is_err());
    }

    #[test]
    fn running_envelopes_match_direct() {
        let col = [5.0, 3.0, 9.0, 4.0, 12.0];
        let env = running_envelopes(&col);
        for t in 1..col.len() {
            assert_eq!(env[t], Envelope::as_of(&col, t).unwrap());
        }
    }

    proptest! {
        #[test]
        fn minmax_bounded_and_monotone(
            hist in prop::collection::vec(-100.0f64..100.0, 2..30),
            frac in 0.0f64..=1.0,
            bump in 0.0f64..10.0,
        ) {
            let t = hist.len() - 1;
            let min = hist[..t].iter().copied().fold(f64::INFINITY, f64::min);
            let max_prior = hist[..t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // place X_t inside [min_{j<t}, max_{j<t}] so the envelope is fixed
            let mut h = hist.clone();
            h[t] = min + frac * (max_prior - min);
            let y = normalize_minmax(&h, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&y));
            let mut h2 = h.clone();
            h2[t] = (h[t] + bump).min(max_prior);
            prop_assert!(normalize_minmax(&h2, t).unwrap() >= y);
        }

        #[test]
        fn scaling_is_linear(deaths in prop::collection::vec(0u32..5000, 1..20), a in 0.0f64..10.0) {
            let make = |f: f64| {
                let s = series_with_deaths("2020-01-01", &deaths.iter().map(|&x| Some(x as f64 * f)).collect::<Vec<_>>());
                DailySeries::new("p", RegionLevel::Province, s.records().to_vec()).unwrap()
            };
            let lhs = scale_provincial(&make(a));
            let rhs = scale_provincial(&make(1.0));
            for (l, r) in lhs.records().iter().zip(rhs.records()) {
                let (l, r) = (l.deaths.unwrap(), r.deaths.unwrap());
                prop_assert!((l - a * r).abs() <= 1e-9 * (1.0 + l.abs()));
            }
        }
    }
}
