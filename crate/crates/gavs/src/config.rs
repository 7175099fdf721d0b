//! Run configuration: defaults, then a JSON file, then `GAVS_SEED`, then
//! command-line flags.

use std::path::Path;

use gavs_core::data::DatasetSpec;
use gavs_core::{FusionMode, GavsConfig, TuningStrategy};
use sha2::{Digest, Sha256};

use crate::dataset::read_json;
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "GAVS_SEED";

/// Flag-level overrides; `None` leaves the file or default value alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub pretrain_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub margin: Option<f64>,
    pub strategy: Option<TuningStrategy>,
    pub mode: Option<FusionMode>,
    pub sap: Option<bool>,
    pub visual_adapters: Option<bool>,
    pub beta2: Option<f64>,
    pub check_finite: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut GavsConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.pretrain_steps {
            cfg.train.pretrain_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.margin {
            cfg.train.margin = v;
        }
        if let Some(v) = self.strategy {
            cfg.decoder.tuning_strategy = v;
        }
        if let Some(v) = self.mode {
            cfg.decoder.fusion_mode = v;
        }
        if let Some(v) = self.sap {
            cfg.sap.enabled = v;
        }
        if let Some(v) = self.visual_adapters {
            cfg.encoder.adapters_enabled = v;
        }
        if let Some(v) = self.beta2 {
            cfg.eval.beta2 = v;
        }
        if self.check_finite {
            cfg.train.check_finite = true;
        }
    }
}

pub fn parse_seed(raw: &str) -> Result<u64> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))
}

/// Resolves the configuration. `env_seed` is the raw value of `GAVS_SEED`,
/// passed in so callers and tests control the environment.
pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, flags: &Overrides) -> Result<GavsConfig> {
    let mut cfg: GavsConfig = match file {
        Some(path) => read_json(path)?,
        None => GavsConfig::default(),
    };
    if let Some(raw) = env_seed {
        cfg.seed = parse_seed(raw)?;
    }
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Sizes the model's input and output to a dataset.
pub fn fit_to_dataset(cfg: &mut GavsConfig, spec: &DatasetSpec) -> Result<()> {
    cfg.encoder.image_height = spec.image_size;
    cfg.encoder.image_width = spec.image_size;
    cfg.encoder.audio_in = spec.audio_dim();
    cfg.train.num_classes = spec.num_classes;
    cfg.validate()?;
    let (mh, mw) = cfg.mask_size();
    if mh != spec.mask_size || mw != spec.mask_size {
        return Err(Error::Config(format!(
            "dataset masks are {0}x{0} but the model predicts {mh}x{mw}; set mask_size = 4 * image_size / patch_size",
            spec.mask_size
        )));
    }
    Ok(())
}

/// Hex SHA-256 of the configuration's canonical JSON.
pub fn config_hash(cfg: &GavsConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_file_then_env_then_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 3, "train": {"steps": 17}}"#).unwrap();
        let none = Overrides::default();
        let cfg = resolve(Some(&path), None, &none).unwrap();
        assert_eq!((cfg.seed, cfg.train.steps), (3, 17));
        assert_eq!(cfg.train.lr, GavsConfig::default().train.lr);
        assert_eq!(resolve(Some(&path), Some("5"), &none).unwrap().seed, 5);
        let flag = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        assert_eq!(resolve(Some(&path), Some("5"), &flag).unwrap().seed, 9);
        assert!(resolve(None, Some("x"), &none).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"stepz": 1}}"#).unwrap();
        assert!(resolve(Some(&path), None, &Overrides::default()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = GavsConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        b.train.lambda = 0.0;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn dataset_sizes_the_model() {
        let mut cfg = GavsConfig::default();
        let spec = DatasetSpec {
            num_classes: 5,
            nuisance_dims: 2,
            ..DatasetSpec::default()
        };
        fit_to_dataset(&mut cfg, &spec).unwrap();
        assert_eq!((cfg.encoder.audio_in, cfg.train.num_classes), (7, 5));
        let bad = DatasetSpec {
            mask_size: 16,
            ..DatasetSpec::default()
        };
        assert!(fit_to_dataset(&mut cfg, &bad).is_err());
    }
}
