//! The single TOML run document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dmad_core::adapter::AdapterConfig;
use dmad_core::data_synth::ProtocolConfig;
use dmad_core::distill::DistillConfig;
use dmad_core::explain_lime::LimeConfig;
use dmad_core::teacher_cnn::TeacherConfig;
use dmad_core::vit_lora::{LoraConfig, VitConfig};

use crate::error::{CliError, CliResult};

/// Adapter widths come from the teacher and student; only these are free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSettings {
    pub hidden: Option<usize>,
    pub dropout_rate: f64,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self { hidden: None, dropout_rate: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub data: ProtocolConfig,
    pub teacher: TeacherConfig,
    pub student: VitConfig,
    pub lora: LoraConfig,
    pub adapter: AdapterSettings,
    pub distill: DistillConfig,
    pub lime: LimeConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            d_in: self.teacher.embed_dim,
            d_out: self.student.dim,
            hidden: self.adapter.hidden,
            dropout_rate: self.adapter.dropout_rate,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.distill.seed = s;
            self.lime.seed = s;
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        let wrap =
            |section: &str, r: dmad_core::Result<()>| r.map_err(|e| CliError::Config(format!("[{section}] {e}")));
        wrap("data", self.data.validate())?;
        wrap("teacher", self.teacher.validate())?;
        wrap("student", self.student.validate())?;
        wrap("lora", self.lora.validate())?;
        wrap("adapter", self.adapter_config().validate())?;
        wrap("distill", self.distill.validate())?;
        wrap("lime", self.lime.validate())?;
        let sizes = [self.data.image_size, self.teacher.image_size, self.student.image_size];
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(CliError::Config(format!(
                "data.image_size, teacher.image_size and student.image_size must agree, got {sizes:?}"
            )));
        }
        if self.student.channels != 1 || self.teacher.in_channels != 1 {
            return Err(CliError::Config(
                "synthetic data is greyscale; teacher and student need one input channel".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::parse("[distill]\nlamda = 0.3\n").unwrap_err().to_string();
        assert!(err.contains("distill"), "{err}");
        assert!(err.contains("lamda"), "{err}");
        let err = RunConfig::parse("[student]\ndepth = \"four\"\n").unwrap_err().to_string();
        assert!(err.contains("student.depth"), "{err}");
    }

    #[test]
    fn cross_section_checks() {
        let err = RunConfig::parse("[student]\nimage_size = 16\npatch_size = 4\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::parse("[distill]\ntemperature = 0.0\n").is_err());
    }

    #[test]
    fn seed_override() {
        let cfg = RunConfig::default().with_seed(Some(9));
        assert_eq!((cfg.distill.seed, cfg.lime.seed), (9, 9));
    }
}
