//! The JSON run configuration and its command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use w8a8::calib::{default_grid, parse_grid, CalibConfig};
use w8a8::graph::ModelConfig;
use w8a8::quant::SettingLevel;

use crate::error::CliError;

/// `FP` or one of the int8 levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Level {
    Fp,
    Int8(SettingLevel),
}

impl FromStr for Level {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        if s.eq_ignore_ascii_case("fp") {
            return Ok(Level::Fp);
        }
        s.parse().map(Level::Int8).map_err(|_| CliError::Config(format!("unknown level {s:?}, expected FP, O1, O2 or O3")))
    }
}

impl TryFrom<String> for Level {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self, CliError> {
        s.parse()
    }
}

impl From<Level> for String {
    fn from(l: Level) -> String {
        l.to_string()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Fp => f.write_str("FP"),
            Level::Int8(l) => l.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Synthetic(ModelConfig),
    /// A container written by `quantize`, or any container holding model
    /// entries.
    Container(PathBuf),
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Synthetic(ModelConfig::default())
    }
}

/// A set of standard-normal input batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub samples: usize,
    pub sequence_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub calib: PathBuf,
    pub plan: PathBuf,
    pub quantized: PathBuf,
    /// Where `eval`, `search-alpha` and `compare` write their report. The
    /// report always goes to stdout as well.
    pub report: Option<PathBuf>,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            calib: "calib.sqtc".into(),
            plan: "plan.sqtc".into(),
            quantized: "quantized.sqtc".into(),
            report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSource,
    pub level: Level,
    pub alpha: f32,
    /// `start:stop:step`, inclusive of both ends.
    pub grid: Option<String>,
    pub clip_fraction: f32,
    /// Seeds the input batches. Calibration uses `seed`, evaluation
    /// `seed + 1`.
    pub seed: u64,
    pub calibration: SampleSpec,
    pub evaluation: SampleSpec,
    pub outputs: Outputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            level: Level::Int8(SettingLevel::O3),
            alpha: 0.5,
            grid: None,
            clip_fraction: 0.0,
            seed: 0,
            calibration: SampleSpec { samples: 32, sequence_length: 64 },
            evaluation: SampleSpec { samples: 4, sequence_length: 64 },
            outputs: Outputs::default(),
        }
    }
}

/// Values given on the command line, which win over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub level: Option<Level>,
    pub alpha: Option<f32>,
    pub grid: Option<String>,
    pub clip: Option<f32>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(l) = o.level {
            self.level = l;
        }
        if let Some(a) = o.alpha {
            self.alpha = a;
        }
        if let Some(g) = &o.grid {
            self.grid = Some(g.clone());
        }
        if let Some(c) = o.clip {
            self.clip_fraction = c;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
    }

    /// Checks every value that can be checked without running anything.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        self.grid()?;
        self.calib_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, s) in [("calibration", &self.calibration), ("evaluation", &self.evaluation)] {
            if s.samples == 0 || s.sequence_length == 0 {
                return bad(format!("{name} needs at least one sample of at least one token"));
            }
        }
        if let ModelSource::Synthetic(m) = &self.model {
            m.outlier.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if m.blocks == 0 || m.channels == 0 || m.heads == 0 || !m.channels.is_multiple_of(m.heads) {
                return bad(format!("model needs blocks ≥ 1 and {} channels divisible into {} heads", m.channels, m.heads));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Vec<f32>, CliError> {
        match &self.grid {
            Some(g) => parse_grid(g).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(default_grid()),
        }
    }

    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            sample_count: self.calibration.samples,
            sequence_length: self.calibration.sequence_length,
            clip_fraction: self.clip_fraction,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> CalibConfig {
        CalibConfig {
            sample_count: self.evaluation.samples,
            sequence_length: self.evaluation.sequence_length,
            clip_fraction: self.clip_fraction,
            seed: self.seed.wrapping_add(1),
        }
    }
}
