//! Run configuration: strict JSON, presets, and dotted-path overrides.

use std::path::{Path, PathBuf};

use dmtj_core::model::{FeatureSource, ModelConfig};
use dmtj_core::optim::{AdamWConfig, Schedules};
use dmtj_core::synthetic::SyntheticShapesSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{IoError, IoResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub wd_start: f64,
    pub wd_final: f64,
    pub ema_start: f64,
    pub ema_final: f64,
}

impl ScheduleConfig {
    fn from_core(s: Schedules) -> Self {
        Self {
            epochs: s.total_epochs,
            warmup_epochs: s.warmup_epochs,
            lr_start: s.lr_start,
            lr_peak: s.lr_peak,
            lr_final: s.lr_final,
            wd_start: s.wd_start,
            wd_final: s.wd_final,
            ema_start: s.ema_start,
            ema_final: s.ema_final,
        }
    }

    pub fn desk() -> Self {
        Self::from_core(Schedules::desk(1))
    }

    pub fn paper() -> Self {
        Self::from_core(Schedules::paper(1))
    }

    pub fn resolve(&self, steps_per_epoch: usize) -> Schedules {
        Schedules {
            total_epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            steps_per_epoch,
            lr_start: self.lr_start,
            lr_peak: self.lr_peak,
            lr_final: self.lr_final,
            wd_start: self.wd_start,
            wd_final: self.wd_final,
            ema_start: self.ema_start,
            ema_final: self.ema_final,
        }
    }
}

/// Where pre-training and probe images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated shapes: pre-training, probe-train and probe-test sets use
    /// `spec.seed`, `spec.seed + 1` and `spec.seed + 2`.
    Synthetic {
        spec: SyntheticShapesSpec,
        train_count: usize,
        probe_train_count: usize,
        probe_test_count: usize,
    },
    /// Manifests of binary corpora; probe manifests need label sidecars.
    Corpus {
        train: PathBuf,
        probe_train: Option<PathBuf>,
        probe_test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub k_nn: usize,
    pub source: FeatureSource,
    pub linear_epochs: usize,
    pub linear_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k_nn: 20,
            source: FeatureSource::Target,
            linear_epochs: 200,
            linear_lr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub data: DataSource,
    pub batch_size: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Tiny,
    #[value(name = "paper-b16")]
    PaperB16,
}

impl RunConfig {
    /// Desk-scale defaults on the synthetic shapes benchmark.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::desk(),
            data: DataSource::Synthetic {
                spec: SyntheticShapesSpec::benchmark(),
                train_count: 320,
                probe_train_count: 300,
                probe_test_count: 300,
            },
            batch_size: 16,
            probe: ProbeConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/tiny"),
        }
    }

    /// ViT-B/16 at 224×224 with the full 600-epoch schedule. Far beyond a
    /// laptop; kept for configuration fidelity.
    pub fn paper_b16() -> Self {
        let model = ModelConfig::paper_base16();
        let mut spec = SyntheticShapesSpec::benchmark();
        spec.height = model.encoder.image_height;
        spec.width = model.encoder.image_width;
        spec.channels = model.encoder.channels;
        spec.radius = (20, 80);
        Self {
            model,
            schedule: ScheduleConfig::paper(),
            data: DataSource::Synthetic {
                spec,
                train_count: 320,
                probe_train_count: 300,
                probe_test_count: 300,
            },
            batch_size: 16,
            out_dir: PathBuf::from("runs/paper-b16"),
            ..Self::tiny()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => Self::tiny(),
            Preset::PaperB16 => Self::paper_b16(),
        }
    }

    /// Checks everything before any compute starts.
    pub fn validate(&self) -> IoResult<()> {
        self.model.validate()?;
        self.schedule.resolve(1).validate()?;
        let bad = |m: String| Err(IoError::Format(format!("config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.probe.k_nn == 0 {
            return bad("probe.k_nn must be positive".into());
        }
        if let DataSource::Synthetic {
            spec, train_count, ..
        } = &self.data
        {
            spec.validate()?;
            let enc = &self.model.encoder;
            if (spec.channels, spec.height, spec.width) != (enc.channels, enc.image_height, enc.image_width) {
                return bad(format!(
                    "synthetic images are {}x{}x{} but the encoder expects {}x{}x{}",
                    spec.channels, spec.height, spec.width, enc.channels, enc.image_height, enc.image_width
                ));
            }
            if *train_count < self.batch_size {
                return bad(format!("train_count {train_count} is smaller than one batch"));
            }
        }
        Ok(())
    }

    /// Parses strict JSON, rejecting unknown keys.
    pub fn from_json(text: &str) -> IoResult<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> IoResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and fall back to plain strings, so `window=all` and `k=4` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> IoResult<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| IoError::Format(format!("override {:?} is not key=value", o.as_ref())))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        Ok(serde_json::from_value(tree)?)
    }
}

/// Sets `tree[a][b]…` for `key = "a.b…"`; every segment must already exist.
pub fn set_path(tree: &mut Value, key: &str, value: Value) -> IoResult<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = node;
        let next = match here {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|n| items.get_mut(n)),
            _ => None,
        };
        let Some(next) = next else {
            return Err(IoError::Format(format!("unknown config key {key:?}")));
        };
        if i + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        node = next;
    }
    Err(IoError::Format("empty config key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dmtj_core::aggregation::HeadKind;
    use dmtj_core::neighbors::Window;

    #[test]
    fn json_round_trip() {
        for c in [RunConfig::tiny(), RunConfig::paper_b16()] {
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
            c.validate().unwrap();
        }
    }

    #[test]
    fn defaults_follow_the_method() {
        let c = RunConfig::tiny();
        assert_eq!(c.model.head.context, HeadKind::CrossAttention);
        assert_eq!(c.model.head.target, HeadKind::CrossAttention);
        assert_eq!(c.model.neighbors.window, Window::Size(3));
        assert_eq!(c.model.neighbors.k, 4);
        assert_eq!(c.model.objective, dmtj_core::model::Objective::Dmt);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: Value = serde_json::from_str(&RunConfig::tiny().to_json()).unwrap();
        v["model"]["bogus"] = Value::Bool(true);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        assert!(RunConfig::tiny().with_overrides(&["model.nope=1"]).is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::tiny()
            .with_overrides(&[
                "model.neighbors.window=all",
                "model.neighbors.k=1",
                "model.head.target=\"average-pool\"",
                "seed=7",
            ])
            .unwrap();
        assert_eq!(c.model.neighbors.window, Window::All);
        assert_eq!(c.model.neighbors.k, 1);
        assert_eq!(c.model.head.target, HeadKind::AveragePool);
        assert_eq!(c.seed, 7);
        assert!(RunConfig::tiny().with_overrides(&["seed=abc"]).is_err());
    }

    #[test]
    fn whole_config_validated() {
        let c = RunConfig::tiny().with_overrides(&["model.neighbors.window=4"]).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::tiny().with_overrides(&["batch_size=0"]).unwrap();
        assert!(c.validate().is_err());
    }
}
