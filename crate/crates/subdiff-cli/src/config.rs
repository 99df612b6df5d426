//! Run configuration. Parsed from JSON with unknown keys rejected; the error
//! names the full path of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use subdiff::estimation::{EigenMode, EstimationConfig};
use subdiff::gof::PitOptions;
use subdiff::models::{Diffusion, ScalePin, SubDiffModel, Subordinator};
use subdiff::simulate::SimOptions;
use subdiff::spectral::SlOptions;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    #[default]
    Day,
    Year,
}

/// Where the observations come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub simulate: Option<SimulateConfig>,
    #[serde(default = "default_time_column")]
    pub time_column: String,
    #[serde(default = "default_value_column")]
    pub value_column: String,
    /// Sampling interval; overrides the spacing inferred from the time column.
    pub delta: Option<f64>,
}

fn default_time_column() -> String {
    "t".into()
}

fn default_value_column() -> String {
    "y".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub delta: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub x0: Option<f64>,
    #[serde(default)]
    pub options: SimOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenConfig {
    /// Nontrivial eigenpairs to tabulate.
    pub pairs: usize,
    pub mode: EigenMode,
    pub sl: SlOptions,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            pairs: 8,
            mode: EigenMode::Numeric,
            sl: SlOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GofModel {
    /// Fit the two-step estimator first and test the fitted model.
    #[default]
    Estimated,
    /// Test the configured parameters as given.
    Configured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GofConfig {
    pub model: GofModel,
    pub bins: Vec<usize>,
    pub pit: PitOptions,
}

impl Default for GofConfig {
    fn default() -> Self {
        GofConfig {
            model: GofModel::Estimated,
            bins: vec![20, 50, 100],
            pit: PitOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    /// Spread of estimates over simulated replications of the configured model.
    #[default]
    Replication,
    /// Plug-in sandwich covariance at the estimate on the data.
    Plugin,
    /// Sandwich covariance at the configured parameters, no data needed.
    Asymptotic,
}

/// How the expected score outer product is computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MleMode {
    Quadrature,
    MonteCarlo { draws: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeConfig {
    pub mode: SeMode,
    pub replications: usize,
    /// Sample size and spacing for replication and asymptotic modes; default
    /// to the simulate block.
    pub n: Option<usize>,
    pub delta: Option<f64>,
    /// Also report the maximum likelihood benchmark (OU with inverse Gaussian clock).
    pub mle: Option<MleMode>,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            mode: SeMode::Replication,
            replications: 100,
            n: None,
            delta: None,
            mle: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Relative paths resolve against the config file.
    pub dir: PathBuf,
    /// File name of the simulated series inside `dir`.
    pub series: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "out".into(),
            series: "series.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub diffusion: Diffusion,
    pub subordinator: Subordinator,
    #[serde(default)]
    pub fixed_scale: ScalePin,
    #[serde(default)]
    pub time_unit: TimeUnit,
    #[serde(default)]
    pub seed: u64,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub eigen: EigenConfig,
    #[serde(default)]
    pub gof: GofConfig,
    #[serde(default)]
    pub se: SeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::Config {
                key: if key == "." { None } else { Some(key) },
                message: e.inner().to_string(),
            }
        })
    }

    /// Reads, parses and validates a config file, resolving relative paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        if let Some(data) = cfg.data.as_mut() {
            if let Some(p) = data.path.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, message: String| CliError::Config {
            key: Some(key.into()),
            message,
        };
        let v = self.model().validate();
        if !v.is_empty() {
            return Err(bad("diffusion", v.join("; ")));
        }
        if let Some(data) = &self.data {
            match (&data.path, &data.simulate) {
                (Some(_), Some(_)) => return Err(bad("data", "give either path or simulate, not both".into())),
                (None, None) => return Err(bad("data", "needs path or simulate".into())),
                (Some(p), None) if !p.is_file() => {
                    return Err(bad("data.path", format!("file {} does not exist", p.display())))
                }
                _ => {}
            }
            if let Some(s) = &data.simulate {
                if !(s.delta > 0.0 && s.delta.is_finite()) {
                    return Err(bad("data.simulate.delta", "must be positive".into()));
                }
                if s.n == 0 {
                    return Err(bad("data.simulate.n", "must be positive".into()));
                }
            }
            if matches!(data.delta, Some(d) if !(d > 0.0 && d.is_finite())) {
                return Err(bad("data.delta", "must be positive".into()));
            }
        }
        if self.estimation.sl.cells < 16 {
            return Err(bad("estimation.sl.cells", "grid needs at least 16 cells".into()));
        }
        if self.eigen.sl.cells < 16 {
            return Err(bad("eigen.sl.cells", "grid needs at least 16 cells".into()));
        }
        if self.gof.bins.iter().any(|&b| b < 2) {
            return Err(bad("gof.bins", "every bin count must be at least 2".into()));
        }
        if matches!(self.se.delta, Some(d) if !(d > 0.0 && d.is_finite())) {
            return Err(bad("se.delta", "must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> SubDiffModel {
        SubDiffModel {
            diffusion: self.diffusion.clone(),
            subordinator: self.subordinator,
            fixed_scale: self.fixed_scale,
        }
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
