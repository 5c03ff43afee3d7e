//! Pipeline configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::Context;
use latentwire::dsp::StftConfig;
use latentwire::edgewire::DeviceProfile;
use latentwire::eval::SplitBy;
use latentwire::gbdt::GbdtParams;
use latentwire::ingest::{SynthConfig, WindowSpec};
use latentwire::quant::Precision;
use latentwire::vae::{TrainConfig, VaeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            models: "models".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
    pub split_by: SplitBy,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            folds: 10,
            split_by: SplitBy::Event,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    /// Storage precision for `quantize`.
    pub precision: Precision,
    /// Precision of latent values in frames and latent files.
    pub wire_precision: Precision,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            precision: Precision::F16,
            wire_precision: Precision::F16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSection {
    /// `jetson`, `raspi` or `custom:<path to TOML profile>`.
    pub profile: String,
    pub battery_mah: f64,
    pub battery_volts: f64,
    pub duty: f64,
    pub bench_repetitions: usize,
}

impl Default for DeviceSection {
    fn default() -> Self {
        DeviceSection {
            profile: "jetson".into(),
            battery_mah: 27_000.0,
            battery_volts: 5.0,
            duty: 1.0,
            bench_repetitions: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gbdt: GbdtParams,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub device: DeviceSection,
}

/// Values given on the command line; each replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub latent_dim: Option<usize>,
    pub split_by: Option<SplitBy>,
    pub profile: Option<String>,
}

/// A loaded configuration with paths resolved against the config file's
/// directory.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: PipelineConfig,
    pub base: PathBuf,
    pub hash: String,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError::new(format!("invalid config: {}", one_line(&e.to_string()))).into())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = o.latent_dim {
            self.vae.latent_dim = d;
        }
        if let Some(s) = o.split_by {
            self.eval.split_by = s;
        }
        if let Some(p) = &o.profile {
            self.device.profile = p.clone();
        }
        self.train.seed = self.seed.wrapping_add(1);
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let checks = [
            self.window.validate(),
            self.stft.validate(),
            self.vae.validate(),
            self.train.validate(),
        ];
        for c in checks {
            c.map_err(|e| UsageError::new(format!("invalid config: {e}")))?;
        }
        if self.eval.folds < 2 {
            return Err(UsageError::new("invalid config: eval.folds must be at least 2").into());
        }
        if self.quant.wire_precision == Precision::F64 {
            return Err(UsageError::new("invalid config: wire precision must be f32 or f16").into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed_for(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add(stage as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Synth = 0,
    Classifier = 2,
    Folds = 3,
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Resolved> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError::new(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = PipelineConfig::from_toml(&text)?;
    config.apply(overrides);
    config.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let hash = config.hash();
    Ok(Resolved { config, base, hash })
}

impl Resolved {
    pub fn data(&self, name: &str) -> PathBuf {
        self.base.join(&self.config.paths.data).join(name)
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.base.join(&self.config.paths.models).join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.base.join(&self.config.paths.reports).join(name)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.base.join(&self.config.paths.reports)
    }

    pub fn profile(&self) -> anyhow::Result<DeviceProfile> {
        let spec = &self.config.device.profile;
        let profile = if let Some(path) = spec.strip_prefix("custom:") {
            let p = self.base.join(path);
            let text = std::fs::read_to_string(&p)
                .map_err(|e| UsageError::new(format!("cannot read device profile {}: {e}", p.display())))?;
            toml::from_str::<DeviceProfile>(&text)
                .map_err(|e| UsageError::new(format!("invalid device profile {}: {}", p.display(), one_line(&e.to_string()))))?
        } else {
            DeviceProfile::builtin(spec)
                .ok_or_else(|| UsageError::new(format!("unknown profile {spec:?}; use jetson, raspi or custom:<path>")))?
        };
        profile.validate().map_err(|e| UsageError::new(e.to_string()))?;
        Ok(profile)
    }
}

pub fn parse_profile(s: &str) -> Result<String, String> {
    if s == "jetson" || s == "raspi" || s.strip_prefix("custom:").is_some_and(|p| !p.is_empty()) {
        Ok(s.to_string())
    } else {
        Err("expected jetson, raspi or custom:<path>".into())
    }
}

pub fn read_file(path: &Path, what: &str) -> anyhow::Result<Vec<u8>> {
    if !path.exists() {
        return Err(UsageError::new(format!("missing artifact {}: {what}", path.display())).into());
    }
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.vae, VaeConfig::default());
        assert_eq!(c.eval.split_by, SplitBy::Event);
        assert_eq!(c.device.profile, "jetson");
    }

    #[test]
    fn overrides_change_hash() {
        let mut a = PipelineConfig::from_toml(MINIMAL).unwrap();
        a.apply(&Overrides::default());
        let mut b = a.clone();
        b.apply(&Overrides {
            latent_dim: Some(32),
            ..Default::default()
        });
        assert_eq!(b.vae.latent_dim, 32);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 16);
        let back = PipelineConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let e = PipelineConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn profile_flag_syntax() {
        assert!(parse_profile("jetson").is_ok());
        assert!(parse_profile("custom:dev.toml").is_ok());
        assert!(parse_profile("custom:").is_err());
        assert!(parse_profile("laptop").is_err());
    }
}
