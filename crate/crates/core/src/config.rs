//! Experiment configuration file (TOML).
//!
//! One file carries every sub-configuration. Unknown keys are rejected at
//! every level. Student dimensions come from the signal section; the
//! student table only picks a preset and optional overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DlinkError, Result};
use crate::probe::ProbeConfig;
use crate::router::RouterConfig;
use crate::student::{StudentConfig, Variant};
use crate::synth::{generate, EpochBatch, SignalConfig};
use crate::teacher::{InputDims, TeacherConfig};
use crate::training::{derive_seed, Ablation, Baseline, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total epochs generated before the stratified split.
    pub samples: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 600,
            split: [0.7, 0.15, 0.15],
        }
    }
}

/// Preset choice plus optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub variant: Variant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cnn_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cnn_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trans_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal_stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bottleneck_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_init: Option<f64>,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            variant: Variant::MicS,
            cnn_blocks: None,
            cnn_kernel: None,
            trans_blocks: None,
            heads: None,
            ffn_dim: None,
            spatial_stride: None,
            temporal_stride: None,
            bottleneck_dim: None,
            hidden_dim: None,
            dropout: None,
            alpha_init: None,
        }
    }
}

impl StudentSection {
    pub fn resolve(&self, dims: InputDims) -> StudentConfig {
        let mut c = StudentConfig::preset(self.variant, dims);
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { c.$f = v; } )*};
        }
        take!(cnn_blocks, cnn_kernel, trans_blocks, heads, ffn_dim, spatial_stride, temporal_stride, bottleneck_dim, hidden_dim, dropout, alpha_init);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_name: String,
    /// Relative paths are resolved against the output root, when one is set.
    pub output_dir: PathBuf,
    /// Independent training runs per distillation command.
    pub seeds: usize,
    pub data: DataConfig,
    pub signal: SignalConfig,
    pub teacher: TeacherConfig,
    pub student: StudentSection,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            output_dir: PathBuf::from("runs"),
            seeds: 1,
            data: DataConfig::default(),
            signal: SignalConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentSection::default(),
            router: RouterConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Train, validation and test partitions of one generated data set.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: EpochBatch,
    pub val: EpochBatch,
    pub test: EpochBatch,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DlinkError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DlinkError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            DlinkError::Config(m) => DlinkError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical serialisation: every field written, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DlinkError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlinkError::Config(m));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return bad(format!("run_name {:?} must be a non-empty single path component", self.run_name));
        }
        if self.seeds == 0 {
            return bad("seeds must be positive".into());
        }
        let split_sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|f| !(*f > 0.0)) || (split_sum - 1.0).abs() > 1e-9 {
            return bad(format!("data.split {:?} must be positive and sum to 1", self.data.split));
        }
        if self.data.samples < 3 * self.signal.num_classes {
            return bad(format!("data.samples {} too small for a three-way split", self.data.samples));
        }
        self.signal.validate()?;
        self.teacher.validate()?;
        if self.teacher.feature_dim != self.signal.patch_len {
            return bad(format!(
                "teacher.feature_dim {} must equal signal.patch_len {}",
                self.teacher.feature_dim, self.signal.patch_len
            ));
        }
        self.router.validate()?;
        if self.router.layers != self.teacher.layers {
            return bad(format!(
                "router.layers {} must equal teacher.layers {}",
                self.router.layers, self.teacher.layers
            ));
        }
        if self.router.temperature != self.train.temperature {
            return bad(format!(
                "router.temperature {} must equal train.temperature {}",
                self.router.temperature, self.train.temperature
            ));
        }
        self.train.validate()?;
        self.student_config(0, &Ablation::default())?;
        Ok(())
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            channels: self.signal.channels,
            segments: self.signal.segments,
            patch_len: self.signal.patch_len,
            num_classes: self.signal.num_classes,
        }
    }

    /// `output_dir/run_name`, under `root` when `output_dir` is relative.
    pub fn run_dir(&self, root: Option<&Path>) -> PathBuf {
        let base = match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        };
        base.join(&self.run_name)
    }

    pub fn student_config(&self, seed: u64, ablation: &Ablation) -> Result<StudentConfig> {
        let mut c = self.student.resolve(self.dims());
        c.mimic = ablation.mimic_mode();
        c.seed = derive_seed(seed, "student-init");
        c.validate()?;
        Ok(c)
    }

    pub fn router_config(&self, seed: u64) -> RouterConfig {
        RouterConfig {
            seed: derive_seed(seed, "router-init"),
            ..self.router.clone()
        }
    }

    pub fn train_config(&self, seed: u64, ablation: Ablation, baseline: Baseline) -> TrainConfig {
        TrainConfig {
            seed,
            ablation,
            baseline,
            ..self.train.clone()
        }
    }

    /// Generates the configured data set and splits it by class.
    pub fn splits(&self) -> Result<Splits> {
        let all = generate(&self.signal, self.data.samples)?;
        self.split(&all)
    }

    pub fn split(&self, all: &EpochBatch) -> Result<Splits> {
        let mut parts = all.stratified_split(&self.data.split, self.signal.seed).into_iter();
        let (train, val, test) = (parts.next(), parts.next(), parts.next());
        match (train, val, test) {
            (Some(train), Some(val), Some(test)) if !train.is_empty() && !val.is_empty() && !test.is_empty() => {
                Ok(Splits { train, val, test })
            }
            _ => Err(DlinkError::Config("data split left an empty partition".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
run_name = "smoke"
output_dir = "runs"

[signal]
sample_rate = 32.0
channels = 4
segments = 4
patch_len = 32
num_classes = 3
class_bands = [
  { low = 3.0, high = 6.0, amplitude = 1.0 },
  { low = 7.0, high = 10.0, amplitude = 1.0 },
  { low = 11.0, high = 14.0, amplitude = 1.0 },
]

[teacher]
layers = 4
feature_dim = 32

[router]
layers = 4

[train]
epochs = 3
"#;

    #[test]
    fn parses_and_round_trips_canonically() {
        let cfg = ExperimentConfig::from_toml_str(SMOKE).unwrap();
        assert_eq!(cfg.teacher.layers, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 2e-3);
        let canon = cfg.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&canon).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml_string().unwrap(), canon);
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let canon = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&canon).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for extra in ["bogus = 1\n", "[train]\nlearning_rate = 0.1\n", "[student]\nwidth = 3\n"] {
            let err = ExperimentConfig::from_toml_str(extra).unwrap_err();
            assert!(matches!(err, DlinkError::Config(_)), "{extra}: {err}");
        }
    }

    #[test]
    fn cross_section_constraints() {
        let base = ExperimentConfig::from_toml_str(SMOKE).unwrap();
        let mut c = base.clone();
        c.router.layers = 5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.router.temperature = 0.5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.teacher.feature_dim = 16;
        assert!(c.validate().is_err());
        let mut c = base;
        c.data.split = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn student_overrides_apply_over_the_preset() {
        let mut cfg = ExperimentConfig::from_toml_str(SMOKE).unwrap();
        cfg.student.hidden_dim = Some(17);
        let s = cfg.student_config(3, &Ablation::from_name("no_cnn").unwrap()).unwrap();
        assert_eq!(s.hidden_dim, 17);
        assert_eq!(s.spatial_stride, 4);
        assert_eq!(s.mimic, crate::student::MimicMode::NoCnn);
        assert_eq!(s.seed, derive_seed(3, "student-init"));
    }

    #[test]
    fn run_dir_respects_absolute_paths() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.run_dir(Some(Path::new("/r"))), PathBuf::from("/r/runs/default"));
        cfg.output_dir = PathBuf::from("/abs");
        assert_eq!(cfg.run_dir(Some(Path::new("/r"))), PathBuf::from("/abs/default"));
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_data() {
        let cfg = ExperimentConfig::from_toml_str(SMOKE).unwrap();
        let s = cfg.splits().unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), cfg.data.samples);
        assert!(s.train.len() > s.val.len());
    }
}
