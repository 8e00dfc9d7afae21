//! Versioned run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, command
//! flags. The hash covers the effective configuration after all overrides.

use std::path::{Path, PathBuf};

use coremac::pipeline::DeadZone;
use coremac::report::UnitCosts;
use coremac::{BodyDac, LadderSpec, MismatchSpec, Params, Timing, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "coremac/run-config";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the four MNIST IDX files, gzipped or not.
    pub mnist_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Downsampled image side `m`; the array has `m * m` features.
    pub side: usize,
    /// Training images held out for validation.
    pub validation_records: usize,
    pub split_seed: u64,
    pub ladder: LadderSpec<f64>,
    pub dac: BodyDac<f64>,
    pub dead_zone: DeadZone,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            side: 9,
            validation_records: coremac::data::VALIDATION_RECORDS,
            split_seed: 7,
            ladder: LadderSpec::default(),
            dac: BodyDac::default(),
            dead_zone: DeadZone::Matched,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ideal,
    Circuit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub mode: Mode,
    /// Evaluate only the first `limit` test images.
    pub limit: Option<usize>,
    /// Training images used to calibrate `I_t`.
    pub calibration_images: usize,
    /// Largest calibration-set line drop as a fraction of `V_DD`.
    pub calibration_fraction: f64,
    /// Waveform sampling stride in integration steps.
    pub waveform_every: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            mode: Mode::Circuit,
            limit: None,
            calibration_images: 1000,
            calibration_fraction: 0.5,
            waveform_every: 5,
        }
    }
}

/// Inclusive `lo..=hi` grid with spacing `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationSection {
    pub mismatch: MismatchSpec<f64>,
    pub runs: usize,
    /// Monte Carlo subset size per class.
    pub per_class: usize,
    pub subset_seed: u64,
    /// When set, search for the array σ giving this mean degradation (points).
    pub target_degradation: Option<f64>,
    pub sides: Range,
    pub temperature_c: Range,
    pub vdd_v: Range,
    /// Test images used by the temperature and supply sweeps.
    pub sweep_images: usize,
}

impl Default for VariationSection {
    fn default() -> Self {
        Self {
            mismatch: MismatchSpec::default(),
            runs: 1000,
            per_class: 10,
            subset_seed: 11,
            target_degradation: None,
            sides: Range {
                lo: 6.0,
                hi: 28.0,
                step: 1.0,
            },
            temperature_c: Range {
                lo: -30.0,
                hi: 125.0,
                step: 5.0,
            },
            vdd_v: Range {
                lo: 0.6,
                hi: 1.2,
                step: 0.1,
            },
            sweep_images: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub bins: usize,
    pub node_nm: f64,
    pub speed_mhz: f64,
    pub costs: UnitCosts,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            bins: 20,
            node_nm: 45.0,
            speed_mhz: 100.0,
            costs: UnitCosts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub version: u32,
    pub paths: Paths,
    pub pipeline: PipelineSection,
    pub train: TrainConfig,
    pub device: Params,
    pub timing: Timing,
    pub simulate: SimulateSection,
    pub variation: VariationSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            paths: Paths::default(),
            pipeline: PipelineSection::default(),
            train: TrainConfig::default(),
            device: Params::default(),
            timing: Timing::default(),
            simulate: SimulateSection::default(),
            variation: VariationSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema != SCHEMA || cfg.version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "expected schema {SCHEMA} version {SCHEMA_VERSION}, found {} version {}",
                cfg.schema, cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Defaults, or the given file.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let side = self.pipeline.side;
        if !(coremac::data::MIN_SIDE..=coremac::data::MAX_SIDE).contains(&side) {
            return Err(CliError::Config(format!(
                "pipeline.side {side} outside {}..={}",
                coremac::data::MIN_SIDE,
                coremac::data::MAX_SIDE
            )));
        }
        self.pipeline.ladder.validate()?;
        self.pipeline.dac.validate()?;
        if let DeadZone::Ratio(r) = self.pipeline.dead_zone {
            if !(0.0..1.0).contains(&r) {
                return Err(CliError::Config(format!(
                    "dead-zone ratio {r} outside [0, 1)"
                )));
            }
        }
        self.train.validate()?;
        self.device.validate()?;
        self.timing.validate()?;
        self.variation.mismatch.validate()?;
        let s = &self.simulate;
        if s.calibration_images == 0 || s.waveform_every == 0 {
            return Err(CliError::Config(
                "simulate.calibration_images and waveform_every must be positive".into(),
            ));
        }
        if !(s.calibration_fraction > 0.0 && s.calibration_fraction < 1.0) {
            return Err(CliError::Config(
                "simulate.calibration_fraction must lie in (0, 1)".into(),
            ));
        }
        let v = &self.variation;
        if v.runs == 0 {
            return Err(CliError::Usage("variation.runs must be at least 1".into()));
        }
        if v.per_class == 0 || v.sweep_images == 0 {
            return Err(CliError::Config(
                "variation.per_class and sweep_images must be positive".into(),
            ));
        }
        if self.report.bins == 0 {
            return Err(CliError::Config("report.bins must be positive".into()));
        }
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.pipeline.ladder.bits, 5);
        assert_eq!(cfg.pipeline.dac.bits, 6);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg =
            RunConfig::from_json(r#"{"pipeline": {"side": 12}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.pipeline.side, 12);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn wrong_schema_and_unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema": "other"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pipeline": {"sides": 9}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.train.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        c.pipeline.side = 40;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.variation.runs = 0;
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
        let mut c = RunConfig::default();
        c.simulate.calibration_fraction = 1.5;
        assert!(c.validate().is_err());
    }
}
