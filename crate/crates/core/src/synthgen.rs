//! Seeded synthetic city with known heatwave excess.
//!
//! Daily deaths are Poisson around a log-linear mean with a winter peak,
//! day-of-week and holiday effects, multiplied on injected event days.
//! Temperature follows a seasonal cycle with AR(1) noise and a boost during
//! events, which are also the only days with tropical air-mass codes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::decision::HeatwaveLevel;
use crate::error::{Error, Result};
use crate::synoptic::{HeatwaveEvent, SscCode};
use crate::timeseries::{write_csv, CalendarDate, DailyRecord, DailySeries, InputPaths, RegionLevel};

/// Tropical code layout of an injected event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SscPattern {
    /// Dry Tropical on every day.
    AllDry,
    /// Dry Tropical on the first and last two days, alternating
    /// Moist/Dry Tropical in between. Needs at least five days.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedEvent {
    pub start: CalendarDate,
    pub length: u32,
    pub multiplier: f64,
    pub pattern: SscPattern,
}

impl InjectedEvent {
    pub fn end(&self) -> CalendarDate {
        self.start.add_days(self.length as i64 - 1)
    }

    fn code_at(&self, offset: u32) -> SscCode {
        match self.pattern {
            SscPattern::AllDry => SscCode::DT,
            SscPattern::Mixed => {
                if offset < 2 || offset + 2 >= self.length || offset % 2 == 1 {
                    SscCode::DT
                } else {
                    SscCode::MT
                }
            }
        }
    }
}

/// Seasonal mean, amplitude and noise of one meteorological variable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seasonal {
    pub mean: f64,
    /// Amplitude of the annual cosine peaking in mid-July.
    pub amplitude: f64,
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub region_name: String,
    pub level: RegionLevel,
    pub start_year: i32,
    pub years: u32,
    /// Log-scale intercept of the daily mean.
    pub base_mortality: f64,
    /// Log-scale amplitude of the annual cycle (peak in mid-January).
    pub annual_amplitude: f64,
    /// Log-scale effects, Monday first.
    pub dow_effects: [f64; 7],
    pub holiday_effect: f64,
    /// Fixed (month, day) holidays repeated every year.
    pub holidays: Vec<(u32, u32)>,
    pub temperature: Seasonal,
    pub pressure: Seasonal,
    pub wind: Seasonal,
    pub humidity: Seasonal,
    /// Autocorrelation of the temperature anomaly.
    pub ar1_rho: f64,
    /// Temperature boost on event days, at least 8 °C.
    pub event_temp_boost: f64,
    /// Extra boost per unit of designed excess ratio, so hotter events are
    /// deadlier.
    pub event_temp_per_excess: f64,
    pub events: Vec<InjectedEvent>,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            region_name: "synthetic".into(),
            level: RegionLevel::City,
            start_year: 2000,
            years: 5,
            base_mortality: 150f64.ln(),
            annual_amplitude: 0.15,
            dow_effects: [0.02, 0.0, -0.01, 0.0, 0.01, -0.02, 0.0],
            holiday_effect: 0.05,
            holidays: vec![(1, 1), (1, 6), (5, 1), (8, 15), (10, 12), (11, 1), (12, 6), (12, 8), (12, 25)],
            temperature: Seasonal {
                mean: 17.0,
                amplitude: 8.0,
                noise_sd: 1.5,
            },
            pressure: Seasonal {
                mean: 1015.0,
                amplitude: -3.0,
                noise_sd: 4.0,
            },
            wind: Seasonal {
                mean: 3.5,
                amplitude: -0.5,
                noise_sd: 0.8,
            },
            humidity: Seasonal {
                mean: 60.0,
                amplitude: -10.0,
                noise_sd: 6.0,
            },
            ar1_rho: 0.7,
            event_temp_boost: 9.0,
            event_temp_per_excess: 0.0,
            events: Vec::new(),
            seed: 0,
        }
    }
}

impl WorldParams {
    pub fn first_date(&self) -> CalendarDate {
        CalendarDate::first_of_year(self.start_year)
    }

    /// Last day of the final year.
    pub fn last_date(&self) -> CalendarDate {
        CalendarDate::first_of_year(self.start_year + self.years as i32).pred()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.years == 0 {
            return bad("years must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ar1_rho) {
            return bad(format!("ar1_rho {} outside [0, 1)", self.ar1_rho));
        }
        if self.event_temp_per_excess < 0.0 {
            return bad("event_temp_per_excess must be non-negative".into());
        }
        if self.event_temp_boost < 8.0 {
            return bad(format!("event_temp_boost {} below 8", self.event_temp_boost));
        }
        if !self.base_mortality.is_finite() {
            return bad("base_mortality must be finite".into());
        }
        for &(m, d) in &self.holidays {
            if CalendarDate::from_ymd(self.start_year, m, d).is_none() {
                return bad(format!("invalid holiday {m}-{d}"));
            }
        }
        let mut sorted: Vec<&InjectedEvent> = self.events.iter().collect();
        sorted.sort_by_key(|e| e.start);
        for e in &sorted {
            if !(e.multiplier >= 1.0 && e.multiplier.is_finite()) {
                return bad(format!("event {} has multiplier {} < 1", e.start, e.multiplier));
            }
            if e.length == 0 || (e.pattern == SscPattern::Mixed && e.length < 5) {
                return bad(format!("event {} is too short for its pattern", e.start));
            }
            if e.start < self.first_date() || e.end() > self.last_date() {
                return bad(format!("event {} lies outside the span", e.start));
            }
            if !(6..=9).contains(&e.start.month()) || !(6..=9).contains(&e.end().month()) {
                return bad(format!("event {} is not within June to September", e.start));
            }
        }
        for pair in sorted.windows(2) {
            if pair[1].start <= pair[0].end() {
                return bad(format!("events at {} and {} overlap", pair[0].start, pair[1].start));
            }
        }
        Ok(())
    }
}

/// Noise-free facts about one injected event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub start: CalendarDate,
    pub end: CalendarDate,
    pub length: u32,
    pub multiplier: f64,
    /// True excess ratio on each event day (`multiplier - 1`).
    pub excess_ratio: f64,
    pub level: HeatwaveLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub start: CalendarDate,
    /// Daily mean deaths, event multipliers included.
    pub mu: Vec<f64>,
    pub events: Vec<TruthEvent>,
}

fn level_of(multiplier: f64) -> HeatwaveLevel {
    let r = multiplier - 1.0;
    if r > 0.30 {
        HeatwaveLevel::L2
    } else if r > 0.15 {
        HeatwaveLevel::L1
    } else {
        HeatwaveLevel::L0
    }
}

/// Level of an injected event from its designed multiplier.
pub fn truth_label(truth: &WorldTruth, event: &HeatwaveEvent) -> Result<HeatwaveLevel> {
    truth
        .events
        .iter()
        .find(|e| e.start == event.start && e.end == event.end)
        .map(|e| e.level)
        .ok_or_else(|| Error::UnknownEvent(event.to_string()))
}

/// Annual cosine with peak on day-of-year `peak`.
fn annual(doy: u32, peak: f64) -> f64 {
    (2.0 * PI * (doy as f64 - peak) / 365.25).cos()
}

pub fn generate(params: &WorldParams) -> Result<(DailySeries, WorldTruth)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let first = params.first_date();
    let n = (params.last_date().days_since(first) + 1) as usize;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut multiplier = vec![1.0; n];
    let mut codes: Vec<Option<SscCode>> = vec![None; n];
    for e in &params.events {
        let s = e.start.days_since(first) as usize;
        for k in 0..e.length {
            multiplier[s + k as usize] = e.multiplier;
            codes[s + k as usize] = Some(e.code_at(k));
        }
    }

    let mut anomaly = 0.0;
    let innovation_sd = params.temperature.noise_sd * (1.0 - params.ar1_rho * params.ar1_rho).sqrt();
    let mut records = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        let date = first.add_days(i as i64);
        let doy = date.day_of_year();
        let holiday = params.holidays.contains(&(date.month(), date.day()));
        let log_mu = params.base_mortality
            + params.annual_amplitude * annual(doy, 15.0)
            + params.dow_effects[date.day_of_week() as usize - 1]
            + if holiday { params.holiday_effect } else { 0.0 }
            + multiplier[i].ln();
        let m = log_mu.exp();
        mu.push(m);
        let deaths = Poisson::new(m)
            .map_err(|e| Error::InvalidParams(format!("Poisson mean {m}: {e}")))?
            .sample(&mut rng);

        anomaly = params.ar1_rho * anomaly + innovation_sd * std_normal.sample(&mut rng);
        let summer = annual(doy, 196.0);
        let event_day = codes[i].is_some();
        let mut temp = params.temperature.mean + params.temperature.amplitude * summer + anomaly;
        if event_day {
            temp += params.event_temp_boost + params.event_temp_per_excess * (multiplier[i] - 1.0);
        }
        let draw = |s: &Seasonal, rng: &mut ChaCha8Rng| s.mean + s.amplitude * summer + s.noise_sd * std_normal.sample(rng);
        let pressure = draw(&params.pressure, &mut rng);
        let wind = draw(&params.wind, &mut rng).max(0.0);
        let mut humidity = draw(&params.humidity, &mut rng);
        if codes[i] == Some(SscCode::MT) {
            humidity += 20.0;
        }
        let humidity = humidity.clamp(0.0, 100.0);
        let background = if rng.random_bool(0.5) { SscCode::DM } else { SscCode::MM };

        records.push(DailyRecord {
            date,
            deaths: Some(deaths),
            meteo: [Some(temp), Some(pressure), Some(wind), Some(humidity)],
            holiday,
            ssc: Some(codes[i].unwrap_or(background)),
        });
    }

    let series = DailySeries::new(params.region_name.clone(), params.level, records)?;
    let mut events: Vec<TruthEvent> = params
        .events
        .iter()
        .map(|e| TruthEvent {
            start: e.start,
            end: e.end(),
            length: e.length,
            multiplier: e.multiplier,
            excess_ratio: e.multiplier - 1.0,
            level: level_of(e.multiplier),
        })
        .collect();
    events.sort_by_key(|e| e.start);
    Ok((series, WorldTruth { start: first, mu, events }))
}

/// Recipe for scattering events over the summers of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventPlan {
    pub count: usize,
    /// Designed excess ratios, drawn uniformly per event.
    pub ratios: Vec<f64>,
    pub min_length: u32,
    pub max_length: u32,
    /// Probability that an event uses the mixed tropical pattern.
    pub mixed_fraction: f64,
}

impl Default for EventPlan {
    fn default() -> Self {
        Self {
            count: 60,
            ratios: vec![0.05, 0.25, 0.45],
            min_length: 7,
            max_length: 12,
            mixed_fraction: 0.3,
        }
    }
}

/// Spreads `plan.count` events evenly over the years, in disjoint slots of
/// the June to September season with at least a week between events.
pub fn plan_events(params: &WorldParams, plan: &EventPlan, seed: u64) -> Result<Vec<InjectedEvent>> {
    if plan.ratios.is_empty() || plan.min_length == 0 || plan.min_length > plan.max_length {
        return Err(Error::InvalidParams("bad event plan".into()));
    }
    const SEASON_DAYS: i64 = 122;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let years = params.years as usize;
    let mut out = Vec::with_capacity(plan.count);
    for y in 0..years {
        // events k with k * years / count == y
        let in_year = (0..plan.count).filter(|k| k * years / plan.count == y).count();
        if in_year == 0 {
            continue;
        }
        let year = params.start_year + y as i32;
        let slot = SEASON_DAYS / in_year as i64;
        let slack = slot - plan.max_length as i64 - 7;
        if slack < 0 {
            return Err(Error::InvalidParams(format!("too many events in {year}")));
        }
        let season_start = CalendarDate::from_ymd(year, 6, 1).expect("valid date");
        for j in 0..in_year {
            let length = rng.random_range(plan.min_length..=plan.max_length);
            let ratio = plan.ratios[rng.random_range(0..plan.ratios.len())];
            let pattern = if length >= 5 && rng.random_bool(plan.mixed_fraction) {
                SscPattern::Mixed
            } else {
                SscPattern::AllDry
            };
            let offset = j as i64 * slot + 3 + rng.random_range(0..=slack);
            out.push(InjectedEvent {
                start: season_start.add_days(offset),
                length,
                multiplier: 1.0 + ratio,
                pattern,
            });
        }
    }
    Ok(out)
}

/// Writes the four input CSVs plus `truth.json` into `dir`.
pub fn write_world(series: &DailySeries, truth: &WorldTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(series, &InputPaths::in_dir(dir))?;
    fs::write(dir.join("truth.json"), serde_json::to_string_pretty(truth)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synoptic::detect_heatwaves;

    fn d(s: &str) -> CalendarDate {
        CalendarDate::parse(s).unwrap()
    }

    fn event(start: &str, length: u32, multiplier: f64, pattern: SscPattern) -> InjectedEvent {
        InjectedEvent {
            start: d(start),
            length,
            multiplier,
            pattern,
        }
    }

    #[test]
    fn deterministic() {
        let p = WorldParams {
            years: 2,
            events: vec![event("2000-07-10", 6, 1.3, SscPattern::Mixed)],
            seed: 4,
            ..Default::default()
        };
        assert_eq!(generate(&p).unwrap(), generate(&p).unwrap());
        let other = WorldParams { seed: 5, ..p.clone() };
        assert_ne!(generate(&p).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn truth_levels() {
        let p = WorldParams {
            years: 1,
            events: vec![
                event("2000-06-10", 3, 1.40, SscPattern::AllDry),
                event("2000-07-10", 3, 1.20, SscPattern::AllDry),
                event("2000-08-10", 3, 1.10, SscPattern::AllDry),
            ],
            ..Default::default()
        };
        let (_, truth) = generate(&p).unwrap();
        let level = |s: &str| truth_label(&truth, &HeatwaveEvent::new(d(s), d(s).add_days(2))).unwrap();
        assert_eq!(level("2000-06-10"), HeatwaveLevel::L2);
        assert_eq!(level("2000-07-10"), HeatwaveLevel::L1);
        assert_eq!(level("2000-08-10"), HeatwaveLevel::L0);
        let missing = HeatwaveEvent::new(d("2000-06-10"), d("2000-06-13"));
        assert!(matches!(truth_label(&truth, &missing), Err(Error::UnknownEvent(_))));
    }

    #[test]
    fn detector_recovers_injected_spans() {
        let p = WorldParams {
            years: 1,
            events: vec![
                event("2000-06-10", 3, 1.2, SscPattern::AllDry),
                event("2000-07-01", 9, 1.2, SscPattern::Mixed),
                event("2000-07-12", 5, 1.2, SscPattern::Mixed),
                event("2000-09-26", 5, 1.2, SscPattern::AllDry),
            ],
            ..Default::default()
        };
        let (series, truth) = generate(&p).unwrap();
        let found = detect_heatwaves(&series).unwrap();
        let expected: Vec<_> = truth.events.iter().map(|e| HeatwaveEvent::new(e.start, e.end)).collect();
        assert_eq!(found, expected);
    }

    #[test]
    fn rejects_invalid_params() {
        let base = WorldParams {
            years: 1,
            ..Default::default()
        };
        let with = |e: InjectedEvent| WorldParams {
            events: vec![e],
            ..base.clone()
        };
        assert!(with(event("2000-01-10", 3, 1.2, SscPattern::AllDry)).validate().is_err());
        assert!(with(event("2000-07-10", 3, 0.9, SscPattern::AllDry)).validate().is_err());
        assert!(with(event("2000-07-10", 4, 1.2, SscPattern::Mixed)).validate().is_err());
        assert!(with(event("2001-07-10", 3, 1.2, SscPattern::AllDry)).validate().is_err());
        let overlap = WorldParams {
            events: vec![
                event("2000-07-10", 5, 1.2, SscPattern::AllDry),
                event("2000-07-14", 5, 1.2, SscPattern::AllDry),
            ],
            ..base.clone()
        };
        assert!(overlap.validate().is_err());
        assert!(WorldParams { ar1_rho: 1.0, ..base.clone() }.validate().is_err());
        assert!(WorldParams {
            event_temp_boost: 5.0,
            ..base
        }
        .validate()
        .is_err());
    }

    #[test]
    fn planned_events_are_valid() {
        let params = WorldParams {
            years: 20,
            ..Default::default()
        };
        let events = plan_events(&params, &EventPlan::default(), 3).unwrap();
        assert_eq!(events.len(), 60);
        let p = WorldParams { events, ..params };
        p.validate().unwrap();
    }
}
