//! JSON experiment files and the train driver that writes run artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{save_checkpoint, train, DatasetSpec, EpochRecord, Meta, TrainConfig, TrainingLog};

fn default_bins() -> usize {
    100
}
fn default_images() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Activation slot probed by `histogram` and `dump-features`.
    #[serde(default)]
    pub layer: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Test images used by `dump-features`.
    #[serde(default = "default_images")]
    pub images: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            layer: 0,
            bins: default_bins(),
            images: default_images(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub analysis: AnalysisOptions,
}

/// The experiment a checkpoint was trained from, if [`run_training`] wrote it.
pub fn experiment_from_meta(meta: &Meta) -> Result<Option<ExperimentConfig>> {
    meta.get("experiment")
        .map(|v| {
            let cfg: ExperimentConfig =
                serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint experiment: {e}")))?;
            cfg.validate()?;
            Ok(cfg)
        })
        .transpose()
}

/// Files written by [`run_training`].
pub struct RunArtifacts {
    pub log: TrainingLog,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub config_path: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.analysis.bins == 0 {
            return Err(Error::Config("analysis.bins must be >= 1".into()));
        }
        if self.analysis.layer >= self.model.activation_slots() {
            return Err(Error::Config(format!(
                "analysis.layer {} out of range: model has {} activation layers",
                self.analysis.layer,
                self.model.activation_slots()
            )));
        }
        Ok(())
    }

    /// Every default made explicit; feeding this back in reproduces the run.
    pub fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.resolved(self.dataset.format),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Trains per `cfg` and writes `training_log.csv`, `model.ck` and
/// `resolved_config.json` into `out_dir`.
pub fn run_training(cfg: &ExperimentConfig, out_dir: &Path, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunArtifacts> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let train_set = cfg.dataset.load_train()?;
    let test_set = cfg.dataset.load_test()?;
    let mut outcome = train(&cfg.model, &cfg.train, &train_set, &test_set, on_epoch)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let p = out_dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let log_path = write("training_log.csv", outcome.log.to_csv().as_bytes())?;
    let config_path = write("resolved_config.json", cfg.to_json().as_bytes())?;
    let mut meta = Meta::new();
    meta.insert("seed".into(), cfg.train.seed.into());
    meta.insert("epochs".into(), cfg.train.epochs.into());
    meta.insert(
        "experiment".into(),
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    if let Some(acc) = outcome.log.final_test_acc() {
        meta.insert("final_test_acc".into(), acc.into());
    }
    let checkpoint_path = out_dir.join("model.ck");
    save_checkpoint(&mut outcome.model, &meta, &checkpoint_path)?;
    Ok(RunArtifacts {
        log: outcome.log,
        log_path,
        checkpoint_path,
        config_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"family": "vgg_small", "stage_widths": [8], "blocks_per_stage": [1]},
        "dataset": {"format": "idx", "train_files": ["a", "b"], "test_files": ["c", "d"],
                    "mean": [0.1307], "std": [0.3081]}
    }"#;

    #[test]
    fn defaults_and_resolution() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        let r = cfg.resolved();
        assert_eq!(r.train.lr_schedule, Some(vec![(1, 0.1), (2, 0.01)]));
        assert_eq!(r.train.augment, Some(false));
        let again = ExperimentConfig::from_json(&r.to_json()).unwrap();
        assert_eq!(again, r);
        assert_eq!(again.resolved(), r);
    }

    #[test]
    fn unknown_keys_fail_closed() {
        for (from, to) in [
            ("\"blocks_per_stage\"", "\"blocks_per_stag\""),
            ("\"mean\"", "\"means\""),
            ("\"model\"", "\"extra\": 1, \"model\""),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))), "{to}");
        }
    }

    #[test]
    fn analysis_layer_is_checked() {
        let text = MINIMAL.replacen("\"dataset\"", "\"analysis\": {\"layer\": 1}, \"dataset\"", 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }
}
