//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use heatwarn::decision::{AlarmConfig, ForecastBundle, HeatwaveLevel};
use heatwarn::evaluation::{
    audit_access, confusion, fit_year_baseline, label_scored_events, metrics, render_percent, run_rolling, sweep,
    write_outcomes_csv, write_sweep_csv, year_plans, ConfusionCounts, EventOutcome, RegionMetrics,
    RollingConfig, YearPlan,
};
use heatwarn::forecaster::{load_checkpoint, predict_horizon, save_checkpoint, train, Checkpoint};
use heatwarn::glm::predict_mean;
use heatwarn::reference::{reference_confusion, run_reference_rolling, ReferenceKind, ReferenceOutcome};
use heatwarn::synoptic::{detect_heatwaves, write_events_csv};
use heatwarn::synthgen::{generate, plan_events, write_world, WorldTruth};
use heatwarn::timeseries::{
    impute_meteo, impute_mortality, ingest_csv, scale_provincial, write_holidays_csv, write_meteo_csv,
    write_mortality_csv, write_ssc_csv, CalendarDate, DailySeries, RegionLevel,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{write_atomic, write_json, write_manifest, write_with};
use crate::{Cli, CliError, Command, Level};

const PLAN_SEED_OFFSET: u64 = 0x5eed;

struct Region {
    name: String,
    series: DailySeries,
    truth: Option<WorldTruth>,
}

fn resolve_config(cli: &Cli) -> Result<(RunConfig, PathBuf), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    let seed = cli.seed.unwrap_or(config.seed);
    config.apply_seed(seed);
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    if let Some(alpha) = cli.alpha {
        match cli.level.unwrap_or(Level::L1) {
            Level::L1 => config.alarm.alpha_l1 = alpha,
            Level::L2 => config.alarm.alpha_l2 = alpha,
        }
    }
    config.validate()?;
    let out = config.out.clone().ok_or_else(|| CliError::Usage("no output directory: pass --out".into()))?;
    Ok((config, out))
}

fn synthetic_world(config: &RunConfig) -> Result<Option<(DailySeries, WorldTruth)>, CliError> {
    let Some(synth) = &config.synth else {
        return Ok(None);
    };
    let mut params = synth.world.clone();
    if let Some(plan) = &synth.plan {
        params.events = plan_events(&params, plan, config.seed.wrapping_add(PLAN_SEED_OFFSET))?;
    }
    Ok(Some(generate(&params)?))
}

fn load_regions(config: &RunConfig, only: Option<&str>) -> Result<Vec<Region>, CliError> {
    let mut regions = Vec::new();
    if let Some((series, truth)) = synthetic_world(config)? {
        regions.push(Region {
            name: series.region_name().to_string(),
            series,
            truth: Some(truth),
        });
    }
    for source in &config.regions {
        if only.is_some_and(|name| name != source.name) {
            continue;
        }
        let raw = ingest_csv(&source.paths(), &source.name, source.level)?;
        let mut series = impute_meteo(&impute_mortality(&raw)?)?;
        if source.level == RegionLevel::Province {
            series = scale_provincial(&series);
        }
        regions.push(Region {
            name: source.name.clone(),
            series,
            truth: None,
        });
    }
    if let Some(name) = only {
        regions.retain(|r| r.name == name);
        if regions.is_empty() {
            return Err(CliError::Usage(format!("no region named {name:?} in the config")));
        }
    }
    Ok(regions)
}

fn parse_date(s: &str) -> Result<CalendarDate, CliError> {
    CalendarDate::parse(s).ok_or_else(|| CliError::Usage(format!("invalid date {s:?}, expected YYYY-MM-DD")))
}

fn index_in(series: &DailySeries, date: CalendarDate) -> Result<usize, CliError> {
    series
        .index_of(date)
        .ok_or_else(|| CliError::Usage(format!("{date} is outside the series of {}", series.region_name())))
}

/// Runs `f` for every region on its own thread and collects the results
/// in region order.
fn per_region<T, F>(regions: &[Region], f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(&Region) -> Result<T, CliError> + Sync,
{
    std::thread::scope(|scope| {
        let handles: Vec<_> = regions.iter().map(|r| scope.spawn(|| f(r))).collect();
        handles.into_iter().map(|h| h.join().expect("region worker panicked")).collect()
    })
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (config, out) = resolve_config(cli)?;
    let only = cli.region.as_deref();
    let name = match &cli.command {
        Command::Synth => {
            synth(&config, &out)?;
            "synth"
        }
        Command::Ingest => {
            for region in load_regions(&config, only)? {
                ingest(&region, &out)?;
            }
            "ingest"
        }
        Command::Detect => {
            for region in load_regions(&config, only)? {
                let events = detect_heatwaves(&region.series)?;
                write_with(&out.join(&region.name).join("events.csv"), |b| write_events_csv(&events, b))?;
            }
            "detect"
        }
        Command::Label => {
            for region in load_regions(&config, only)? {
                label(&region, &config, &out)?;
            }
            "label"
        }
        Command::Train { date } => {
            for region in load_regions(&config, only)? {
                train_region(&region, &config, date.as_deref(), &out)?;
            }
            "train"
        }
        Command::Forecast { date, checkpoint } => {
            for region in load_regions(&config, only)? {
                forecast(&region, &config, date, checkpoint.as_deref(), &out)?;
            }
            "forecast"
        }
        Command::Evaluate => {
            let regions = load_regions(&config, only)?;
            per_region(&regions, |r| evaluate(r, &config, &out).map(drop))?;
            "evaluate"
        }
        Command::Sweep => {
            let regions = load_regions(&config, only)?;
            per_region(&regions, |r| sweep_region(r, &config, cli.level, &out))?;
            "sweep"
        }
        Command::Report => {
            let regions = load_regions(&config, only)?;
            let reports = per_region(&regions, |r| cached_metrics(r, &config, &out))?;
            write_atomic(&out.join("report.csv"), report_table(&reports).as_bytes())?;
            "report"
        }
    };
    write_manifest(&out, name, &config)
}

fn synth(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (series, truth) =
        synthetic_world(config)?.ok_or_else(|| CliError::Usage("`synth` needs a `synth` block in the config".into()))?;
    write_world(&series, &truth, &out.join(series.region_name()))?;
    Ok(())
}

fn ingest(region: &Region, out: &Path) -> Result<(), CliError> {
    let dir = out.join(&region.name);
    let s = &region.series;
    write_with(&dir.join("mortality.csv"), |b| write_mortality_csv(s, b))?;
    write_with(&dir.join("meteo.csv"), |b| write_meteo_csv(s, b))?;
    write_with(&dir.join("ssc.csv"), |b| write_ssc_csv(s, b))?;
    write_with(&dir.join("holidays.csv"), |b| write_holidays_csv(s, b))?;
    Ok(())
}

fn label(region: &Region, config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut text = String::from("event_start,event_end,length,label_ratio,label\n");
    for (event, level, ratio) in label_scored_events(&region.series, &config.glm)? {
        writeln!(text, "{},{},{},{ratio},{level}", event.start, event.end, event.length).expect("string write");
    }
    write_atomic(&out.join(&region.name).join("labels.csv"), text.as_bytes())
}

fn train_region(region: &Region, config: &RunConfig, date: Option<&str>, out: &Path) -> Result<(), CliError> {
    let dense = region.series.to_dense()?;
    let end = match date {
        Some(d) => index_in(&region.series, parse_date(d)?)? + 1,
        None => dense.len(),
    };
    let outcome = train(&dense.prefix(end), None, &config.forecaster)?;
    let checkpoint = Checkpoint::new(&outcome.weights, Some(&outcome.optimizer), config.forecaster.epochs);
    let path = out.join(&region.name).join("checkpoint.json");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&checkpoint, &path)?;
    let trace: String = outcome.loss_trace.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(&out.join(&region.name).join("loss.csv"), format!("loss\n{trace}").as_bytes())
}

fn forecast(
    region: &Region,
    config: &RunConfig,
    date: &str,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let origin_date = parse_date(date)?;
    let t = index_in(&region.series, origin_date)?;
    let dense = region.series.to_dense()?;
    let weights = match checkpoint {
        Some(path) => load_checkpoint(path)?.weights()?,
        None => train(&dense.prefix(t + 1), None, &config.forecaster)?.weights,
    };
    let all_cause = predict_horizon(&weights, &dense.prefix(t + 1), t)?;

    // baseline from the two calendar years before the origin's year
    let start = region.series.first_date().expect("non-empty series");
    let plan = year_plans(start, region.series.len(), &[])
        .into_iter()
        .find(|p| p.year == origin_date.year())
        .map(|p| YearPlan { cutoff: p.cutoff.min(t + 1), ..p })
        .ok_or_else(|| CliError::Usage(format!("{date} has fewer than two earlier calendar years of data")))?;
    let glm = fit_year_baseline(&region.series, &plan, &config.glm)?;
    let dates: Vec<CalendarDate> = (1..=all_cause.len() as i64).map(|k| origin_date.add_days(k)).collect();
    let baseline = predict_mean(&glm, &dates, &region.series.holiday_table());
    let bundle = ForecastBundle::new(dates, all_cause, baseline)?;

    let mut text = String::from("date,all_cause,baseline,excess,ratio,alarm_l1,alarm_l2\n");
    for i in 0..bundle.dates.len() {
        let r = bundle.ratios[i];
        writeln!(
            text,
            "{},{},{},{},{r},{},{}",
            bundle.dates[i],
            bundle.all_cause[i],
            bundle.baseline[i],
            bundle.excess[i],
            r > config.alarm.alpha_l1,
            r > config.alarm.alpha_l2
        )
        .expect("string write");
    }
    write_atomic(&out.join(&region.name).join("forecast.csv"), text.as_bytes())
}

/// Reference-model scores; thresholds are calibrated per year.
#[derive(Serialize)]
struct ReferenceLevel {
    counts: ConfusionCounts,
    metrics: Option<heatwarn::evaluation::MetricSet>,
}

#[derive(Serialize)]
struct ReferenceReport {
    model: ReferenceKind,
    events: usize,
    l1: ReferenceLevel,
    l2: ReferenceLevel,
}

fn reference_report(kind: ReferenceKind, outcomes: &[ReferenceOutcome]) -> ReferenceReport {
    let level = |task| {
        let counts = reference_confusion(outcomes, task);
        ReferenceLevel {
            counts,
            metrics: metrics(&counts).ok(),
        }
    };
    ReferenceReport {
        model: kind,
        events: outcomes.len(),
        l1: level(HeatwaveLevel::L1),
        l2: level(HeatwaveLevel::L2),
    }
}

fn evaluate(region: &Region, config: &RunConfig, out: &Path) -> Result<RegionMetrics, CliError> {
    let rolling = RollingConfig {
        forecaster: config.forecaster.clone(),
        glm: config.glm,
        alarm: config.alarm,
    };
    let result = run_rolling(&region.series, &rolling)?;
    if let Err(problems) = audit_access(&result.access_log, config.forecaster.horizon) {
        return Err(CliError::Data(heatwarn::Error::InvalidSeries(format!(
            "data access audit failed: {}",
            problems.join("; ")
        ))));
    }
    let dir = out.join(&region.name);
    let report = RegionMetrics::new(&region.name, &result.outcomes, &config.alarm);
    write_json(&dir.join("metrics.json"), &report)?;
    write_json(&dir.join("outcomes.json"), &result.outcomes)?;
    write_with(&dir.join("outcomes.csv"), |b| write_outcomes_csv(&result.outcomes, &config.alarm, b))?;
    for year in &result.years {
        write_json(&dir.join("models").join(format!("{}.checkpoint.json", year.year)), &year.checkpoint)?;
        write_json(&dir.join("models").join(format!("{}.glm.json", year.year)), &year.glm)?;
    }

    let mut references = Vec::new();
    for kind in [ReferenceKind::Spline, ReferenceKind::Exponential] {
        let (outcomes, _) = run_reference_rolling(&region.series, kind, &config.glm, &config.sweep)?;
        references.push(reference_report(kind, &outcomes));
    }
    write_json(&dir.join("references.json"), &references)?;

    if let Some(truth) = &region.truth {
        write_json(&dir.join("truth_levels.json"), &truth_levels(truth, &result.outcomes))?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct TruthScore {
    l1: ConfusionCounts,
    l2: ConfusionCounts,
}

/// Alarm counts against the designed levels of a synthetic world.
fn truth_levels(truth: &WorldTruth, outcomes: &[EventOutcome]) -> TruthScore {
    let designed: Vec<EventOutcome> = outcomes
        .iter()
        .filter_map(|o| {
            let level = heatwarn::synthgen::truth_label(truth, &o.event).ok()?;
            Some(EventOutcome { label: level, ..o.clone() })
        })
        .collect();
    TruthScore {
        l1: confusion(&designed, HeatwaveLevel::L1, AlarmConfig::default().alpha_l1),
        l2: confusion(&designed, HeatwaveLevel::L2, AlarmConfig::default().alpha_l2),
    }
}

fn cached_outcomes(region: &Region, config: &RunConfig, out: &Path) -> Result<Vec<EventOutcome>, CliError> {
    let path = out.join(&region.name).join("outcomes.json");
    if !path.exists() {
        evaluate(region, config, out)?;
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text).map_err(heatwarn::Error::from)?)
}

fn cached_metrics(region: &Region, config: &RunConfig, out: &Path) -> Result<RegionMetrics, CliError> {
    let outcomes = cached_outcomes(region, config, out)?;
    Ok(RegionMetrics::new(&region.name, &outcomes, &config.alarm))
}

fn sweep_region(region: &Region, config: &RunConfig, level: Option<Level>, out: &Path) -> Result<(), CliError> {
    let outcomes = cached_outcomes(region, config, out)?;
    let tasks: &[(Level, HeatwaveLevel, &str)] = &[
        (Level::L1, HeatwaveLevel::L1, "sweep_l1.csv"),
        (Level::L2, HeatwaveLevel::L2, "sweep_l2.csv"),
    ];
    for &(l, task, file) in tasks {
        if level.is_some_and(|want| want != l) {
            continue;
        }
        let points = sweep(&outcomes, task, &config.sweep);
        write_with(&out.join(&region.name).join(file), |b| write_sweep_csv(&points, b))?;
    }
    Ok(())
}

/// Level-by-metric rows with one column per region and a pooled total.
fn report_table(reports: &[RegionMetrics]) -> String {
    let mut text = String::from("level,metric");
    for r in reports {
        text.push(',');
        text.push_str(&r.region);
    }
    text.push_str(",Total\n");
    for (level, pick) in [
        ("L1", (|r: &RegionMetrics| r.l1.counts) as fn(&RegionMetrics) -> ConfusionCounts),
        ("L2", |r: &RegionMetrics| r.l2.counts),
    ] {
        let mut columns: Vec<ConfusionCounts> = reports.iter().map(pick).collect();
        columns.push(columns.iter().copied().sum());
        let sets: Vec<_> = columns.iter().map(|c| metrics(c).ok()).collect();
        let rows: [(&str, fn(&heatwarn::evaluation::MetricSet) -> Option<f64>); 4] = [
            ("Acc.", |m| Some(m.accuracy)),
            ("Pr.", |m| m.precision),
            ("Rec.", |m| m.recall),
            ("F1", |m| m.f1),
        ];
        for (metric, get) in rows {
            text.push_str(&format!("{level},{metric}"));
            for m in &sets {
                text.push(',');
                text.push_str(&render_percent(m.as_ref().and_then(get)));
            }
            text.push('\n');
        }
    }
    text
}
