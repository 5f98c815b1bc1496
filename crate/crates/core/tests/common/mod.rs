#![allow(dead_code)]

use heatwarn::synoptic::SscCode;
use heatwarn::timeseries::{CalendarDate, DailyRecord, DailySeries, RegionLevel};
use rand::Rng;

/// Brute-force detector: enumerate every 3-day window, mark its days when
/// it is all dry-tropical or mixes dry- and moist-tropical, then collect
/// maximal marked runs.
pub fn brute_force_events(codes: &[SscCode]) -> Vec<(usize, usize)> {
    let n = codes.len();
    let mut marked = vec![false; n];
    for s in 0..n.saturating_sub(2) {
        let window = &codes[s..s + 3];
        let dt = window.iter().filter(|&&c| c == SscCode::DT).count();
        let mt = window.iter().filter(|&&c| c == SscCode::MT).count();
        if dt == 3 || (dt >= 1 && mt >= 1) {
            for m in &mut marked[s..s + 3] {
                *m = true;
            }
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if marked[i] {
            let mut j = i;
            while j + 1 < n && marked[j + 1] {
                j += 1;
            }
            out.push((i, j));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

pub fn random_codes<R: Rng>(rng: &mut R, len: usize) -> Vec<SscCode> {
    (0..len).map(|_| SscCode::ALL[rng.random_range(0..SscCode::ALL.len())]).collect()
}

pub fn date(s: &str) -> CalendarDate {
    CalendarDate::parse(s).unwrap()
}

/// City series with the given deaths and codes, constant meteorology.
pub fn series_from(start: &str, deaths: &[f64], codes: &[SscCode]) -> DailySeries {
    let start = date(start);
    let records = deaths
        .iter()
        .zip(codes)
        .enumerate()
        .map(|(i, (&d, &c))| DailyRecord {
            date: start.add_days(i as i64),
            deaths: Some(d),
            meteo: [Some(20.0), Some(1013.0), Some(3.0), Some(50.0)],
            holiday: false,
            ssc: Some(c),
        })
        .collect();
    DailySeries::new("test", RegionLevel::City, records).unwrap()
}

/// Counts drawn from the default quasi-Poisson baseline design with known
/// coefficients, over `n` consecutive days from 2010-01-01. Holidays fall on
/// the 1st and 15th of each month.
pub struct GlmWorld {
    pub dates: Vec<CalendarDate>,
    pub counts: Vec<f64>,
    pub holidays: heatwarn::timeseries::HolidayTable,
    pub beta: Vec<f64>,
}

pub const TRUE_GLM_BETA: [f64; 12] = [
    5.0, 0.03, -0.02, 0.01, 0.04, -0.05, -0.08, 0.10, 0.12, 0.06, -0.03, 0.02,
];

pub fn simulate_glm(n: usize, seed: u64) -> GlmWorld {
    use heatwarn::glm::{build_design, GlmDesignConfig};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Poisson};

    let start = date("2010-01-01");
    let dates: Vec<CalendarDate> = (0..n as i64).map(|i| start.add_days(i)).collect();
    let holidays =
        heatwarn::timeseries::HolidayTable::new(dates.iter().copied().filter(|d| d.day() == 1 || d.day() == 15));
    let config = GlmDesignConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let counts = dates
        .iter()
        .map(|&d| {
            let eta: f64 = build_design(d, &holidays, &config).iter().zip(&TRUE_GLM_BETA).map(|(a, b)| a * b).sum();
            Poisson::new(eta.exp()).unwrap().sample(&mut rng)
        })
        .collect();
    GlmWorld {
        dates,
        counts,
        holidays,
        beta: TRUE_GLM_BETA.to_vec(),
    }
}

/// Generates a world, fits the baseline on the two years before the final
/// year and labels each injected event of the final year against it.
pub fn label_final_year_events(
    params: &heatwarn::synthgen::WorldParams,
) -> Vec<(heatwarn::synthgen::TruthEvent, heatwarn::decision::HeatwaveLevel, f64)> {
    use heatwarn::glm::{fit_baseline, GlmDesignConfig, IrlsOptions};
    use heatwarn::synoptic::HeatwaveEvent;

    let (series, truth) = heatwarn::synthgen::generate(params).unwrap();
    let last_year = params.start_year + params.years as i32 - 1;
    let y0 = series.index_of(CalendarDate::first_of_year(last_year)).unwrap();
    let g0 = series.index_of(CalendarDate::first_of_year(last_year - 2)).unwrap();
    let dates: Vec<CalendarDate> = (g0..y0).map(|i| series.date_at(i)).collect();
    let deaths: Vec<f64> = (g0..y0).map(|i| series.records()[i].deaths.unwrap()).collect();
    let fit = fit_baseline(&dates, &deaths, &series.holiday_table(), &GlmDesignConfig::default(), IrlsOptions::default())
        .unwrap();
    truth
        .events
        .iter()
        .filter(|e| e.start.year() == last_year)
        .map(|e| {
            let (level, r) = heatwarn::decision::label_event(&series, &fit, &HeatwaveEvent::new(e.start, e.end)).unwrap();
            (e.clone(), level, r)
        })
        .collect()
}
