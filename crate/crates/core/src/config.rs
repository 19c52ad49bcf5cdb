//! Declarative run configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colorspace::{ColorMode, YcbcrRange};
use crate::datapipe::synth::SynthConfig;
use crate::datapipe::{AugmentationPolicy, Jitter, ScalePolicy};
use crate::error::{Error, Result};
use crate::flowwarp::{AssemblyMode, InputSpec};
use crate::model::{FanMode, HeadKind, ModelConfig};
use crate::trainer::ScheduleSpec;

/// Names of the ablation axes, in table order.
pub const ABLATION_AXES: [&str; 9] = [
    "output_activation",
    "initialization",
    "color_space",
    "schedule",
    "photometric",
    "random_scale",
    "flow",
    "crop_size",
    "sequence_length",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub head: HeadKind,
    pub fan_mode: FanMode,
    pub base_width: usize,
    pub depth: usize,
    /// Add the blurry reference frame to the network output.
    pub reference_skip: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            head: HeadKind::Linear,
            fan_mode: FanMode::FanMax,
            base_width: 64,
            depth: 3,
            reference_skip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding one directory per split. Falls back to the
    /// `DEBLURLAB_DATA` environment variable in the CLI.
    pub root: Option<PathBuf>,
    pub train_split: String,
    /// Split used for best-checkpoint selection.
    pub val_split: Option<String>,
    pub test_split: String,
    pub sequence_length: usize,
    pub color_space: ColorMode,
    pub ycbcr_range: YcbcrRange,
    pub batch_size: usize,
    pub crops_per_example: usize,
    /// Decode every frame once up front instead of per batch.
    pub in_memory: bool,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
    /// Generate training data procedurally instead of reading `root`.
    pub synthetic: Option<SynthConfig>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            train_split: "train".into(),
            val_split: None,
            test_split: "test".into(),
            sequence_length: 5,
            color_space: ColorMode::Rgb,
            ycbcr_range: YcbcrRange::Full,
            batch_size: 64,
            crops_per_example: 8,
            in_memory: false,
            prefetch: 2,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSection {
    pub hue: f64,
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    pub probability: f64,
}

impl Default for JitterSection {
    fn default() -> Self {
        let j = Jitter::default();
        Self {
            hue: j.hue,
            contrast: [j.contrast.0, j.contrast.1],
            saturation: [j.saturation.0, j.saturation.1],
            probability: j.probability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSection {
    pub rotations: bool,
    pub flips: bool,
    /// Square crop edge; 0 trains on full frames.
    pub crop_size: usize,
    pub photometric: bool,
    pub random_scale: bool,
    /// Continuous scale range used when `scales` is empty.
    pub scale_range: [f64; 2],
    /// Discrete scale factors.
    pub scales: Vec<f64>,
    pub jitter: JitterSection,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        Self {
            rotations: true,
            flips: true,
            crop_size: 128,
            photometric: false,
            random_scale: false,
            scale_range: [0.25, 1.0],
            scales: Vec::new(),
            jitter: JitterSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// `.flo` files next to the frames.
    #[default]
    Files,
    /// Ground-truth trajectories of synthetic data.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub assembly: AssemblyMode,
    pub source: FlowSource,
    /// Label of the flow estimator that produced the files.
    pub estimator: String,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            assembly: AssemblyMode::Cat,
            source: FlowSource::Files,
            estimator: "pwc".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    Short,
    #[default]
    Long,
    Nah,
    Custom,
}

impl std::fmt::Display for SchedulePreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchedulePreset::Short => "short",
            SchedulePreset::Long => "long",
            SchedulePreset::Nah => "nah",
            SchedulePreset::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub preset: SchedulePreset,
    pub base_lr: f64,
    /// Required for `custom`, ignored otherwise.
    pub total_epochs: Option<usize>,
    pub halving_epochs: Option<Vec<usize>>,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_iterations: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            preset: SchedulePreset::Long,
            base_lr: 0.005,
            total_epochs: None,
            halving_epochs: None,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Validate every this many epochs; 0 disables validation.
    pub every_epochs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { every_epochs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub run_id: Option<String>,
    /// Periodic checkpoint cadence in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            run_id: None,
            checkpoint_every: 1,
        }
    }
}

/// Provenance written into manifests. Ignored when a manifest is read back
/// as a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunRecord {
    pub run_id: String,
    pub fingerprint: String,
    pub epochs_completed: usize,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub best_val_psnr: Option<f64>,
    pub axes: BTreeMap<String, String>,
    pub hyperparameters: BTreeMap<String, f64>,
    pub libraries: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub augmentation: AugmentationSection,
    pub flow: FlowSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
    pub output: OutputSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunRecord>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.sequence_length == 0 || self.data.sequence_length % 2 == 0 {
            return Err(Error::Config(format!(
                "data.sequence_length must be odd, got {}",
                self.data.sequence_length
            )));
        }
        if self.data.batch_size == 0
            || self.data.crops_per_example == 0
            || self.data.batch_size % self.data.crops_per_example != 0
        {
            return Err(Error::Config(format!(
                "data.batch_size {} must be a positive multiple of data.crops_per_example {}",
                self.data.batch_size, self.data.crops_per_example
            )));
        }
        if self.flow.source == FlowSource::Synthetic && self.flow.assembly.needs_flow() && self.data.synthetic.is_none() {
            return Err(Error::Config("flow.source = \"synthetic\" requires [data.synthetic]".into()));
        }
        if self.eval.every_epochs > 0 && self.data.val_split.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("validation splits are not available for synthetic data".into()));
        }
        self.model_config()?.validate()?;
        self.augmentation_policy()?.validate()?;
        self.schedule_spec()?;
        Ok(())
    }

    pub fn input_spec(&self) -> InputSpec {
        InputSpec {
            seq_len: self.data.sequence_length,
            assembly: self.flow.assembly,
            color: self.data.color_space,
            ycbcr_range: self.data.ycbcr_range,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let spec = self.input_spec();
        let cfg = ModelConfig {
            in_channels: spec.input_channels(),
            out_channels: spec.output_channels(),
            base_width: self.model.base_width,
            depth: self.model.depth,
            head: self.model.head,
            fan_mode: self.model.fan_mode,
            input_skip: self
                .model
                .reference_skip
                .then(|| spec.seq_len / 2 * spec.output_channels()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augmentation_policy(&self) -> Result<AugmentationPolicy> {
        let a = &self.augmentation;
        let random_scale = match (a.random_scale, a.scales.is_empty()) {
            (false, _) => ScalePolicy::Off,
            (true, true) => ScalePolicy::Continuous {
                lo: a.scale_range[0],
                hi: a.scale_range[1],
            },
            (true, false) => ScalePolicy::Discrete(a.scales.clone()),
        };
        let depth = u32::try_from(self.model.depth).map_err(|_| Error::Config("model.depth too large".into()))?;
        let policy = AugmentationPolicy {
            rotations: a.rotations,
            flips: a.flips,
            crop_size: (a.crop_size > 0).then_some(a.crop_size),
            photometric: a.photometric,
            jitter: Jitter {
                hue: a.jitter.hue,
                contrast: (a.jitter.contrast[0], a.jitter.contrast[1]),
                saturation: (a.jitter.saturation[0], a.jitter.saturation[1]),
                probability: a.jitter.probability,
            },
            random_scale,
            size_multiple: 1usize
                .checked_shl(depth)
                .ok_or_else(|| Error::Config("model.depth too large".into()))?,
        };
        policy
            .validate()
            .map_err(|e| Error::Config(format!("[augmentation]: {e}")))?;
        Ok(policy)
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        let s = &self.schedule;
        let spec = match s.preset {
            SchedulePreset::Short => ScheduleSpec::short(),
            SchedulePreset::Long => ScheduleSpec::long(),
            SchedulePreset::Nah => ScheduleSpec::nah(),
            SchedulePreset::Custom => {
                let total = s
                    .total_epochs
                    .ok_or_else(|| Error::Config("schedule.total_epochs is required for the custom preset".into()))?;
                ScheduleSpec::new(total, s.base_lr, s.halving_epochs.clone().unwrap_or_default())?
            }
        };
        if s.preset == SchedulePreset::Custom {
            Ok(spec)
        } else {
            ScheduleSpec::new(spec.total_epochs, s.base_lr, spec.halving_epochs)
        }
    }

    /// Value of every ablation axis, keyed as in [`ABLATION_AXES`].
    pub fn axes(&self) -> Vec<(String, String)> {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        let flow = match self.flow.assembly {
            AssemblyMode::None => "none".to_string(),
            mode => format!("{}+{}", self.flow.estimator, mode),
        };
        let crop = match self.augmentation.crop_size {
            0 => "full".to_string(),
            c => c.to_string(),
        };
        let values = [
            self.model.head.to_string(),
            self.model.fan_mode.to_string(),
            self.data.color_space.to_string(),
            self.schedule.preset.to_string(),
            yes_no(self.augmentation.photometric),
            yes_no(self.augmentation.random_scale),
            flow,
            crop,
            self.data.sequence_length.to_string(),
        ];
        ABLATION_AXES
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// FNV-1a hash of the configuration without its provenance record.
    pub fn fingerprint(&self) -> String {
        let mut bare = self.clone();
        bare.run = None;
        let text = bare.to_toml_string().unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn run_id(&self) -> String {
        self.output
            .run_id
            .clone()
            .unwrap_or_else(|| format!("run-{}", &self.fingerprint()[..8]))
    }

    /// Dataset root, falling back to `fallback` when the config names none.
    pub fn data_root(&self, fallback: Option<&Path>) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| fallback.map(Path::to_path_buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_row() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.model.head, HeadKind::Linear);
        assert_eq!(c.model.fan_mode, FanMode::FanMax);
        assert_eq!(c.data.color_space, ColorMode::Rgb);
        assert_eq!(c.schedule.preset, SchedulePreset::Long);
        assert!(!c.augmentation.photometric && !c.augmentation.random_scale);
        assert_eq!(c.flow.assembly, AssemblyMode::Cat);
        assert_eq!(c.augmentation.crop_size, 128);
        assert_eq!(c.data.sequence_length, 5);
        assert_eq!(c.model_config().unwrap().in_channels, 27);
        let axes = c.axes();
        assert_eq!(axes.len(), ABLATION_AXES.len());
        assert_eq!(axes[6].1, "pwc+cat");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[data]\ncolour_space = \"rgb\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("colour_space"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn round_trip_and_fingerprint() {
        let mut c = RunConfig::from_toml_str("seed = 3\n[model]\nhead = \"sigmoid\"\n").unwrap();
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        let fp = c.fingerprint();
        c.run = Some(RunRecord {
            run_id: "x".into(),
            ..Default::default()
        });
        assert_eq!(c.fingerprint(), fp);
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.fingerprint(), fp);
        c.seed = 4;
        assert_ne!(c.fingerprint(), fp);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[data]\nsequence_length = 4\n").is_err());
        assert!(RunConfig::from_toml_str("[data]\nbatch_size = 10\ncrops_per_example = 4\n").is_err());
        assert!(RunConfig::from_toml_str("[schedule]\npreset = \"custom\"\n").is_err());
        assert!(RunConfig::from_toml_str("[augmentation]\ncrop_size = 100\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nhead = \"tanh\"\n").is_err());
    }

    #[test]
    fn scale_policies() {
        let c = RunConfig::from_toml_str("[augmentation]\nrandom_scale = true\n").unwrap();
        assert_eq!(
            c.augmentation_policy().unwrap().random_scale,
            ScalePolicy::Continuous { lo: 0.25, hi: 1.0 }
        );
        let c = RunConfig::from_toml_str("[augmentation]\nrandom_scale = true\nscales = [0.5, 1.0]\n").unwrap();
        assert_eq!(
            c.augmentation_policy().unwrap().random_scale,
            ScalePolicy::Discrete(vec![0.5, 1.0])
        );
    }
}
