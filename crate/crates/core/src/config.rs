//! System configuration: one TOML document with a table per component.
//!
//! Resolution order, lowest to highest precedence: built-in preset, config
//! file, the `VQSPEECH_SEED` environment variable, then `key.path=value`
//! overrides. Every field is addressable by its dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticConfig;
use crate::codec::{CodecConfig, RecurrentKind};
use crate::discriminators::DiscriminatorConfig;
use crate::dsp::SpectrogramConfig;
use crate::error::{io_err, Error, Result};
use crate::quantizer::QuantizerConfig;
use crate::training::TrainingConfig;

/// Environment variable that overrides `training.seed`.
pub const SEED_ENV: &str = "VQSPEECH_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Defaults to `vocab.txt` next to the manifest.
    pub vocab: Option<PathBuf>,
    /// Defaults to `<out_dir>/features`.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub codec: CodecConfig,
    pub quantizer: QuantizerConfig,
    pub discriminators: DiscriminatorConfig,
    pub acoustic: AcousticConfig,
    pub features: SpectrogramConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl SystemConfig {
    /// `desk` is the default scale; `tiny` is sized for tests and sweeps on one core.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or tiny)"))),
        }
    }

    pub fn tiny() -> Self {
        let latent = 16;
        let mut cfg = Self {
            codec: CodecConfig {
                channels: vec![4, 8, 16, 16],
                latent_dim: latent,
                lem_hidden: 16,
                recurrent: RecurrentKind::Lem,
                ..CodecConfig::default()
            },
            quantizer: QuantizerConfig { num_stages: 4, codebook_size: 64, dim: latent, ..QuantizerConfig::default() },
            discriminators: DiscriminatorConfig {
                periods: vec![2, 3, 5],
                mpd_channels: vec![4, 8, 8],
                msd_channels: vec![4, 8, 8],
                msd_kernel: 11,
                msd_groups: 4,
            },
            acoustic: AcousticConfig {
                d_model: 32,
                predictor_hidden: 32,
                cond_dim: 8,
                latent_dim: latent,
                ..AcousticConfig::default()
            },
            ..Self::default()
        };
        cfg.training.batch_size = 2;
        cfg.training.segment_samples = 6000;
        cfg.training.joint_segment_frames = 20;
        cfg.training.warmup_steps_with_skips = 50;
        cfg.training.lr = 1e-3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.quantizer.validate()?;
        self.discriminators.validate()?;
        self.acoustic.validate()?;
        self.features.validate()?;
        self.training.validate()?;
        let dims = [self.codec.latent_dim, self.quantizer.dim, self.acoustic.latent_dim];
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(Error::Config(format!(
                "codec.latent_dim ({}), quantizer.dim ({}) and acoustic.latent_dim ({}) must agree",
                dims[0], dims[1], dims[2]
            )));
        }
        if self.acoustic.n_mels != self.features.n_mels {
            return Err(Error::Config(format!(
                "acoustic.n_mels ({}) must equal features.n_mels ({})",
                self.acoustic.n_mels, self.features.n_mels
            )));
        }
        if (self.quantizer.frame_rate_hz - 80.0).abs() > 1e-12 {
            return Err(Error::Config(format!("quantizer.frame_rate_hz must be 80, got {}", self.quantizer.frame_rate_hz)));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets one field from `path=value`; `value` is parsed as a TOML value, else taken as a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
        let (path, raw) = (path.trim(), raw.trim());
        let value = parse_value(raw);
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut keys: Vec<&str> = path.split('.').collect();
        let leaf = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{path}`")))?;
        let mut table = doc.as_table_mut().expect("config is a table");
        for k in keys {
            table = table
                .get_mut(k)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section `{k}` in `{path}`")))?;
        }
        table.insert(leaf.to_string(), value);
        *self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{path}: {}", e.message())))?;
        Ok(())
    }

    /// Preset, then file, then the seed variable, then overrides; validated.
    pub fn resolve(preset: &str, file: Option<&Path>, seed_env: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::preset(preset)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let mut doc = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            let file_doc: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut doc, file_doc);
            cfg = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        }
        if let Some(seed) = seed_env {
            cfg.apply_override(&format!("training.seed={seed}"))?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "tiny"] {
            let cfg = SystemConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(SystemConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        }
        assert!(SystemConfig::preset("huge").is_err());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[training]\nlr = 0.002\nbatch_size = 3\n").unwrap();
        let base = SystemConfig::resolve("desk", None, None, &[]).unwrap();
        assert_eq!((base.training.lr, base.training.batch_size), (1e-4, 16));
        let from_file = SystemConfig::resolve("desk", Some(&file), None, &[]).unwrap();
        assert_eq!((from_file.training.lr, from_file.training.batch_size), (0.002, 3));
        let flagged = SystemConfig::resolve("desk", Some(&file), Some("9"), &["training.lr=0.5".into()]).unwrap();
        assert_eq!((flagged.training.lr, flagged.training.batch_size, flagged.training.seed), (0.5, 3, 9));
        let seeded = SystemConfig::resolve("desk", None, Some("9"), &["training.seed=4".into()]).unwrap();
        assert_eq!(seeded.training.seed, 4);
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = SystemConfig::default();
        let e = cfg.apply_override("training.segment_samples=1000").and_then(|_| cfg.validate()).unwrap_err();
        assert!(e.to_string().contains("segment_samples"), "{e}");
        let e = SystemConfig::default().apply_override("training.lrr=1").unwrap_err();
        assert!(e.to_string().contains("lrr"), "{e}");
        let e = SystemConfig::default().apply_override("nosuch.lr=1").unwrap_err();
        assert!(e.to_string().contains("nosuch"), "{e}");
        let mut cfg = SystemConfig::default();
        cfg.apply_override("quantizer.dim=64").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("quantizer.dim"));
        let mut cfg = SystemConfig::default();
        cfg.apply_override("data.manifest=corpus/manifest.jsonl").unwrap();
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("corpus/manifest.jsonl")));
    }
}
