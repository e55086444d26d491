use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendKind, MockConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionSchedule;
use crate::geometry::Orientation;
use crate::guidance::GuidanceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Generate,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub shared: String,
    pub theme: String,
    /// Explicit per-image captions; when absent they are composed by the VLM.
    pub captions: Option<Vec<String>>,
    /// Per-image source descriptions for edit mode.
    pub source_captions: Option<Vec<String>>,
    /// Shared-content description of the sources; defaults to `shared`.
    pub source_shared: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub enabled: bool,
    pub depth_weight: f64,
    pub edge_weight: f64,
    /// Anneal strength linearly from 1 to 0 over the trajectory.
    pub anneal: bool,
    /// Strength used when `anneal` is off.
    pub strength: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            depth_weight: 0.5,
            edge_weight: 0.5,
            anneal: true,
            strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub no_guidance: bool,
    pub no_mff: bool,
    pub no_graph: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EditPreset {
    /// Balanced structure and appearance (w_ctrl 0.5).
    #[default]
    Balanced,
    /// Structure over editability (w_ctrl 0.8).
    Structure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub n_max: usize,
    pub n_min: usize,
    pub preset: EditPreset,
    /// Overrides the preset's control strength.
    pub w_ctrl: Option<f64>,
    pub fusion: FusionSchedule,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_max: 24,
            n_min: 10,
            preset: EditPreset::Balanced,
            w_ctrl: None,
            fusion: FusionSchedule {
                double_stream_min_t: 20,
                single_stream_min_t: 25,
                ..FusionSchedule::default()
            },
        }
    }
}

impl EditConfig {
    pub fn control_strength(&self) -> f64 {
        self.w_ctrl.unwrap_or(match self.preset {
            EditPreset::Balanced => 0.5,
            EditPreset::Structure => 0.8,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DebugConfig {
    /// Decode node latents after every step.
    pub decode_intermediate: bool,
    /// Write tapped features of every step to the run directory.
    pub dump_features: bool,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub input_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub run_id: Option<String>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub total_steps: usize,
    pub degree_cap: usize,
    pub conf_threshold: f32,
    /// Fraction of matches kept per pair.
    pub match_fraction: f64,
    /// Keep only mutual matches before fusion and guidance.
    pub symmetric_matches: bool,
    /// Canvas layout; chosen from the image aspect when absent.
    pub orientation: Option<Orientation>,
    pub backend: BackendKind,
    pub prompts: PromptConfig,
    pub fusion: FusionSchedule,
    pub guidance: GuidanceConfig,
    pub control: ControlConfig,
    pub ablation: AblationConfig,
    pub edit: EditConfig,
    pub mock: MockConfig,
    pub debug: DebugConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Generate,
            input_dir: None,
            output_dir: PathBuf::from("out"),
            run_id: None,
            seed: 0,
            width: 512,
            height: 512,
            total_steps: 25,
            degree_cap: 4,
            conf_threshold: crate::correspondence::DEFAULT_CONF_THRESHOLD,
            match_fraction: 1.0,
            symmetric_matches: true,
            orientation: None,
            backend: BackendKind::Mock,
            prompts: PromptConfig::default(),
            fusion: FusionSchedule::default(),
            guidance: GuidanceConfig::default(),
            control: ControlConfig::default(),
            ablation: AblationConfig::default(),
            edit: EditConfig::default(),
            mock: MockConfig::default(),
            debug: DebugConfig::default(),
        }
    }
}

/// Largest set the full method is validated for on the real backend.
pub const MAX_FULL_METHOD_IMAGES: usize = 20;

impl RunConfig {
    /// Range-check every numeric key.
    pub fn check(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{v} is not in [0, 1]")))
            }
        };
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if self.degree_cap == 0 {
            return Err(Error::config("degree_cap", "must be at least 1"));
        }
        unit("conf_threshold", self.conf_threshold as f64)?;
        if !(self.match_fraction > 0.0 && self.match_fraction <= 1.0) {
            return Err(Error::config("match_fraction", format!("{} is not in (0, 1]", self.match_fraction)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width", "image size must be non-zero"));
        }
        let ds = self.mock.downsample.max(1);
        if self.backend == BackendKind::Mock && (!self.width.is_multiple_of(ds) || !self.height.is_multiple_of(ds)) {
            return Err(Error::config(
                "width",
                format!("{}x{} is not a multiple of mock.downsample {ds}", self.width, self.height),
            ));
        }
        if self.backend == BackendKind::Mock && self.mock.total_steps != self.total_steps {
            return Err(Error::config(
                "mock.total_steps",
                format!("{} differs from total_steps {}", self.mock.total_steps, self.total_steps),
            ));
        }
        for (key, s) in [("fusion", &self.fusion), ("edit.fusion", &self.edit.fusion)] {
            if s.double_stream_min_t > self.total_steps || s.single_stream_min_t > self.total_steps {
                return Err(Error::config(
                    format!("{key}.double_stream_min_t"),
                    format!("thresholds must lie within 0..={}", self.total_steps),
                ));
            }
        }
        self.guidance.validate(self.total_steps)?;
        unit("control.depth_weight", self.control.depth_weight)?;
        unit("control.edge_weight", self.control.edge_weight)?;
        unit("control.strength", self.control.strength)?;
        if self.edit.n_max > self.total_steps {
            return Err(Error::config("edit.n_max", format!("{} exceeds total_steps", self.edit.n_max)));
        }
        if self.edit.n_min > self.edit.n_max {
            return Err(Error::config("edit.n_min", format!("{} exceeds edit.n_max", self.edit.n_min)));
        }
        unit("edit.w_ctrl", self.edit.control_strength())?;
        if self.mode == Mode::Edit && self.prompts.captions.is_some() && self.prompts.source_captions.is_none() {
            return Err(Error::config(
                "prompts.source_captions",
                "edit mode needs source captions alongside target captions",
            ));
        }
        for (key, caps) in [("prompts.captions", &self.prompts.captions), ("prompts.source_captions", &self.prompts.source_captions)]
        {
            if let (Some(a), Some(b)) = (caps, &self.prompts.captions) {
                if a.len() != b.len() {
                    return Err(Error::config(key, "caption lists differ in length"));
                }
            }
        }
        Ok(())
    }

    /// Check that referenced inputs exist.
    pub fn check_inputs(&self) -> Result<()> {
        let dir = self
            .input_dir
            .as_deref()
            .ok_or_else(|| Error::config("input_dir", "no input directory given"))?;
        if !dir.is_dir() {
            return Err(Error::config("input_dir", format!("{} is not a directory", dir.display())));
        }
        if self.prompts.shared.trim().is_empty() {
            return Err(Error::config("prompts.shared", "must not be empty"));
        }
        Ok(())
    }

    /// Run directory under the output root.
    pub fn run_dir(&self) -> PathBuf {
        let id = self.run_id.clone().unwrap_or_else(|| format!("run-{:016x}", self.seed));
        self.output_dir.join(id)
    }

    pub fn relative_to(mut self, base: &Path) -> Self {
        if let Some(d) = &self.input_dir {
            if d.is_relative() {
                self.input_dir = Some(base.join(d));
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        self
    }
}

/// Parse, default and range-check a TOML run config.
pub fn validate_config(raw: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(raw).map_err(|e| {
        let key = e.span().map(|s| raw[s].trim().to_string()).unwrap_or_default();
        Error::config(key, e.message().to_string())
    })?;
    cfg.check()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(path)?;
    let cfg = validate_config(&raw)?;
    Ok(cfg.relative_to(path.parent().unwrap_or(Path::new("."))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = validate_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.total_steps, 25);
        assert_eq!(cfg.degree_cap, 4);
        assert_eq!(cfg.guidance.lr_start, 0.016);
        assert_eq!(cfg.fusion.double_stream_min_t, 3);
        assert_eq!(cfg.edit.n_max, 24);
        assert_eq!(cfg.edit.n_min, 10);
        assert_eq!(cfg.edit.control_strength(), 0.5);
        assert_eq!(cfg.edit.fusion.double_stream_min_t, 20);
    }

    #[test]
    fn range_errors_name_their_key() {
        match validate_config("degree_cap = 0").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "degree_cap"),
            e => panic!("{e}"),
        }
        match validate_config("conf_threshold = 1.5").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "conf_threshold"),
            e => panic!("{e}"),
        }
        match validate_config("[guidance]\nlr_start = 0.001").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "guidance.lr_start"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = validate_config("[fusion]\nbogus = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(validate_config("colour = 3").is_err());
    }

    #[test]
    fn structure_preset() {
        let cfg = validate_config("mode = \"edit\"\n[edit]\npreset = \"structure\"").unwrap();
        assert_eq!(cfg.edit.control_strength(), 0.8);
    }
}
