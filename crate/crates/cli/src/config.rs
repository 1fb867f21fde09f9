//! The JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use seqplace::datasets::{desk_sensor, make_benchmark_with, BenchmarkSpec, DatasetManifest};
use seqplace::model::ModelConfig;
use seqplace::overlap::{LabelParams, DEFAULT_DELTA, DEFAULT_POS_THRESHOLD};
use seqplace::rangeproj::SensorModel;
use seqplace::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The small model used for desk-scale runs and the self-test suite.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        c: 32,
        vlad_clusters: 32,
        seq_len_m: 20,
        leg_channels: vec![16, 32, 32],
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest; without one the synthetic benchmark is generated.
    pub manifest: Option<PathBuf>,
    pub synthetic_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// N values reported as AR@N.
    pub recall_at: Vec<usize>,
    /// Evaluates every `query_stride`-th eligible query.
    pub query_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall_at: vec![1, 5, 20],
            query_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapConfig {
    pub delta: f32,
    pub threshold: f32,
    /// Pairs farther apart than this (metres) are labelled 0 without
    /// reprojection.
    pub gate_radius: Option<f64>,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            threshold: DEFAULT_POS_THRESHOLD,
            gate_radius: None,
        }
    }
}

impl OverlapConfig {
    pub fn label_params(&self) -> LabelParams {
        LabelParams {
            delta: self.delta,
            pos_threshold: self.threshold,
            gate_radius: self.gate_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Defaults to the manifest's sensor, or the desk sensor for synthetic
    /// data.
    pub sensor: Option<SensorModel>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub overlap: OverlapConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> seqplace::Result<()> {
        if let Some(s) = &self.sensor {
            s.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.query_stride == 0 || self.eval.recall_at.contains(&0) {
            return Err(seqplace::Error::Config(
                "eval needs query_stride >= 1 and N >= 1".into(),
            ));
        }
        if !(self.overlap.delta > 0.0) || !(0.0..=1.0).contains(&self.overlap.threshold) {
            return Err(seqplace::Error::Config(
                "overlap needs delta > 0 and threshold in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Loads or generates the dataset and fills in the sensor.
    pub fn resolve(&mut self) -> Result<Dataset, CliError> {
        let (manifest, base) = match &self.data.manifest {
            Some(p) => {
                let m = DatasetManifest::read(p).map_err(|e| CliError::data(p.display(), e))?;
                if let Some(s) = &self.sensor {
                    if *s != m.sensor {
                        return Err(CliError::Usage(format!(
                            "config sensor differs from the sensor of {}",
                            p.display()
                        )));
                    }
                }
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (m, base)
            }
            None => {
                let spec = BenchmarkSpec {
                    sensor: self.sensor.unwrap_or_else(desk_sensor),
                    ..BenchmarkSpec::default()
                };
                let m = make_benchmark_with(self.data.synthetic_seed, &spec)
                    .map_err(|e| CliError::data("synthetic benchmark", e))?;
                (m, PathBuf::new())
            }
        };
        self.sensor = Some(manifest.sensor);
        Ok(Dataset { manifest, base })
    }
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Relative cloud paths resolve against this directory.
    pub base: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"cc": 3}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs_phase1": 2}}"#).unwrap();
        assert_eq!(c.train.epochs_phase1, 2);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn synthetic_resolution_fills_sensor() {
        let mut c = RunConfig::default();
        let d = c.resolve().unwrap();
        assert_eq!(c.sensor, Some(desk_sensor()));
        assert_eq!(d.manifest.scans.len(), 600);
    }
}
