use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lvlmc::simulate::{Grid, PipelineConfig};
use lvlmc::synthetic::SyntheticConfig;

/// Run configuration shared by all subcommands. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_no_data")]
    pub no_data: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Sample file (CSV or GeoEAS) for `infer` and `simulate`.
    pub samples: Option<PathBuf>,
    /// Simulation grid.
    pub grid: Option<Grid>,
    /// CSV of target points (`x,y,z`) used instead of a grid.
    pub targets: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub synthetic: Option<SynthSection>,
    pub validate: Option<ValidateSection>,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
}

fn default_no_data() -> f64 {
    -999.0
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(flatten)]
    pub deposit: SyntheticConfig,
    /// Fraction of samples held out for validation.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_holdout() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    /// Sample file with the true values at the test locations.
    pub truth: PathBuf,
    /// Long-format realization CSV written by `simulate` on point targets.
    pub realizations: PathBuf,
    /// Optional second realization set (e.g. the global-model baseline).
    pub baseline: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out);
        if let Some(p) = cfg.samples.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.targets.as_mut() {
            resolve(p);
        }
        if let Some(v) = cfg.validate.as_mut() {
            resolve(&mut v.truth);
            resolve(&mut v.realizations);
            if let Some(b) = v.baseline.as_mut() {
                resolve(b);
            }
        }
        if !cfg.no_data.is_finite() {
            bail!("no_data must be finite");
        }
        Ok((cfg, text))
    }

    /// Pipeline settings with the master seed applied.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.seed = self.seed;
        p
    }

    pub fn samples_path(&self) -> Result<&Path> {
        self.samples
            .as_deref()
            .context("config does not name a `samples` file")
    }
}
