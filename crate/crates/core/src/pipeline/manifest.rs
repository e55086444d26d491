use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::Result;
use crate::graph::ConsistencyGraph;

/// Stages of one sampler step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// All edge canvases denoised in one lockstep batch.
    DenoiseEdges,
    /// Per-image denoising when the graph is ablated.
    DenoiseImages,
    /// Source-side pass of a localized edit.
    DenoiseSource,
    /// Node versions averaged across edges.
    Consolidate,
    Guidance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub stages: Vec<Stage>,
    /// Hook interceptions that fused features.
    pub fused_calls: usize,
    pub control_strength: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guidance_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Replay record of a run. Wall-clock timings live in a separate file so
/// that manifests of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub backend: String,
    pub backend_version: String,
    pub matcher: String,
    pub graph: ConsistencyGraph,
    /// Whether the run denoised edge canvases (false under `no_graph`).
    pub pairwise: bool,
    pub mff: bool,
    pub guidance: bool,
    pub prompts: crate::prompts::PromptBundle,
    pub image_prompts: Vec<String>,
    pub edge_prompts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_edge_prompts: Vec<String>,
    /// Matches kept per ordered pair at feature resolution.
    pub match_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub outputs: Vec<OutputRecord>,
}

impl RunManifest {
    pub fn stage_sequence(&self) -> Vec<(usize, Stage)> {
        self.steps
            .iter()
            .flat_map(|s| s.stages.iter().map(move |&st| (s.t, st)))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Seconds spent per stage over the whole run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
    pub total: f64,
}

impl Timings {
    pub fn add(&mut self, stage: &str, seconds: f64) {
        *self.stages.entry(stage.to_string()).or_default() += seconds;
        self.total += seconds;
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
