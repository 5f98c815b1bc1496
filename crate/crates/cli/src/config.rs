//! Run configuration file.

use std::path::{Path, PathBuf};

use heatwarn::decision::AlarmConfig;
use heatwarn::evaluation::SweepGrid;
use heatwarn::forecaster::TransformerConfig;
use heatwarn::glm::GlmDesignConfig;
use heatwarn::synthgen::{EventPlan, WorldParams};
use heatwarn::timeseries::{InputPaths, RegionLevel};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One region read from CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSource {
    pub name: String,
    pub level: RegionLevel,
    /// Directory holding `mortality.csv`, `meteo.csv`, `ssc.csv` and
    /// `holidays.csv`. Relative paths resolve against the config file.
    pub dir: PathBuf,
}

impl RegionSource {
    pub fn paths(&self) -> InputPaths {
        InputPaths::in_dir(&self.dir)
    }
}

/// Synthetic world settings; `plan` scatters events over the summers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub world: WorldParams,
    pub plan: Option<EventPlan>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub regions: Vec<RegionSource>,
    pub synth: Option<SynthConfig>,
    pub forecaster: TransformerConfig,
    pub glm: GlmDesignConfig,
    pub alarm: AlarmConfig,
    pub sweep: SweepGrid,
    pub out: Option<PathBuf>,
    /// Drives the world, the event plan and the forecaster initialization.
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for region in &mut config.regions {
            if region.dir.is_relative() {
                region.dir = base.join(&region.dir);
            }
        }
        if let Some(out) = &config.out {
            if out.is_relative() {
                config.out = Some(base.join(out));
            }
        }
        Ok(config)
    }

    /// Pushes the run seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.forecaster.seed = seed;
        if let Some(synth) = &mut self.synth {
            synth.world.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: heatwarn::Error| CliError::Usage(e.to_string());
        self.forecaster.validate().map_err(usage)?;
        self.glm.validate().map_err(usage)?;
        self.alarm.validate().map_err(usage)?;
        self.sweep.validate().map_err(usage)?;
        if let Some(s) = &self.synth {
            s.world.validate().map_err(usage)?;
        }
        if self.regions.is_empty() && self.synth.is_none() {
            return Err(CliError::Usage("config needs `regions` or `synth`".into()));
        }
        let mut names: Vec<&str> = self.regions.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Usage("region names must be unique".into()));
        }
        Ok(())
    }
}
