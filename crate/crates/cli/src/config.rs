//! Run configuration: a TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pillardet::augment::AugmentConfig;
use pillardet::eval::Interpolation;
use pillardet::fixtures::SynthConfig;
use pillardet::loss::LossWeights;
use pillardet::net::Architecture;
use pillardet::postproc::PostprocConfig;
use pillardet::targets::ClassSpec;
use pillardet::types::GridSpec;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClassSet {
    Car,
    Pedcyc,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_root: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    /// Drop points that do not project into the camera image.
    pub fov_filter: bool,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { fov_filter: true, image_width: 1242.0, image_height: 375.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { interpolation: Interpolation::Eleven }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub resolutions: Vec<f64>,
    /// Pillar budget for each resolution.
    pub max_pillars: Vec<usize>,
    pub repeats: usize,
    /// Allowed relative rise of the encoder time from one resolution to the
    /// next coarser one before the trend counts as broken.
    pub slack: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![0.12, 0.16, 0.2, 0.24, 0.28],
            max_pillars: vec![16000, 12000, 12000, 8000, 8000],
            repeats: 3,
            slack: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub class: ClassSet,
    pub paths: Paths,
    /// Replaces the class set's default grid.
    pub grid: Option<GridSpec>,
    /// Replaces the class set's default anchors and thresholds.
    pub classes: Option<Vec<ClassSpec>>,
    pub frame: FrameConfig,
    pub loss: LossWeights,
    pub postproc: PostprocConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            class: ClassSet::Car,
            paths: Paths::default(),
            grid: None,
            classes: None,
            frame: FrameConfig::default(),
            loss: LossWeights::default(),
            postproc: PostprocConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resolution: Option<f64>,
    pub class: Option<ClassSet>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = o.class {
            self.class = v;
        }
        if let Some(v) = &o.data_root {
            self.paths.data_root = Some(v.clone());
        }
        if let Some(v) = &o.weights {
            self.paths.weights = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.paths.out = Some(v.clone());
        }
        if let Some(res) = o.resolution {
            let g = self.grid_spec();
            self.grid = Some(g.snapped(res, g.max_pillars));
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_else(|| match self.class {
            ClassSet::Car => GridSpec::car(),
            ClassSet::Pedcyc => GridSpec::ped_cyc(),
        })
    }

    pub fn class_specs(&self) -> Vec<ClassSpec> {
        self.classes.clone().unwrap_or_else(|| match self.class {
            ClassSet::Car => vec![ClassSpec::car()],
            ClassSet::Pedcyc => vec![ClassSpec::pedestrian(), ClassSpec::cyclist()],
        })
    }

    pub fn architecture(&self) -> Architecture {
        let mut arch = match self.class {
            ClassSet::Car => Architecture::car(),
            ClassSet::Pedcyc => Architecture::ped_cyc(),
        };
        if arch.n_classes != self.class_specs().len() {
            arch = Architecture::standard(arch.pfn_channels, arch.blocks[0].stride, self.class_specs().len());
        }
        arch
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        self.grid_spec().validate()?;
        for c in self.class_specs() {
            c.validate()?;
        }
        self.loss.validate()?;
        self.postproc.validate()?;
        self.augment.validate()?;
        self.architecture().validate()?;
        let b = &self.bench;
        if b.resolutions.is_empty() || b.resolutions.len() != b.max_pillars.len() || b.repeats == 0 {
            return Err(CliError::Config(
                "bench needs matching, non-empty resolutions and max_pillars lists and repeats >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.paths
            .data_root
            .as_deref()
            .ok_or_else(|| CliError::Config("no data root (use --data-root or paths.data_root)".into()))
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output path (use --out or paths.out)".into()))
    }

    pub fn weights(&self) -> Result<&Path, CliError> {
        self.paths
            .weights
            .as_deref()
            .ok_or_else(|| CliError::Config("no weights file (use --weights or paths.weights)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[loss]\nbeta_lok = 1.0").is_err());
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::from_toml("seed = 3\nclass = \"pedcyc\"\n[paths]\nout = \"a\"").unwrap();
        c.apply(&Overrides { seed: Some(9), out: Some("b".into()), ..Default::default() });
        assert_eq!(c.seed, 9);
        assert_eq!(c.paths.out.as_deref(), Some(Path::new("b")));
        assert_eq!(c.class, ClassSet::Pedcyc);
        assert_eq!(c.architecture().n_classes, 2);
    }

    #[test]
    fn resolution_flag_snaps_grid() {
        let mut c = RunConfig::default();
        c.apply(&Overrides { resolution: Some(0.24), ..Default::default() });
        assert!(c.validate().is_ok());
        assert_eq!(c.grid_spec().resolution, 0.24);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.jobs = 0;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let c = RunConfig::from_toml("[postproc]\nscore_threshold = 2.0").unwrap();
        assert!(c.validate().is_err());
    }
}
