//! Denoiser abstraction shared by the real diffusion-transformer backend and
//! the deterministic mock.
//!
//! A backend exposes its block catalog and runs a batch of latents through
//! one sampler step. Every block hands its key and value tensors (before
//! positional rotation) to an optional [`FeatureHook`], which sees the
//! whole batch at once so that cross-canvas fusion can happen in lockstep.

mod control;
mod mock;

use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{latent_grid, FeatureKind, FeatureMap, Latent, Stream};
use crate::geometry::Grid;
use crate::graph::EdgeLatent;

pub use control::{
    control_strength, extract_controls, ControlExtractor, ControlSignal, LuminanceDepth, SobelEdges,
};
pub use mock::{MockBackend, MockConfig, MockWeights};

/// Position of one transformer block within the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    /// Global execution order.
    pub id: usize,
    pub stream: Stream,
    /// Position among blocks of the same stream.
    pub index_in_stream: usize,
    /// Number of blocks of this stream.
    pub stream_len: usize,
}

/// Ordered list of blocks; double-stream blocks run first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCatalog {
    blocks: Vec<BlockInfo>,
}

impl BlockCatalog {
    pub fn new(n_double: usize, n_single: usize) -> Self {
        let double = (0..n_double).map(|k| BlockInfo {
            id: k,
            stream: Stream::Double,
            index_in_stream: k,
            stream_len: n_double,
        });
        let single = (0..n_single).map(|k| BlockInfo {
            id: n_double + k,
            stream: Stream::Single,
            index_in_stream: k,
            stream_len: n_single,
        });
        Self {
            blocks: double.chain(single).collect(),
        }
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Identifies a tapped feature tensor.
pub type TapKey = (usize, FeatureKind);

/// Which block features a denoise call returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapSelection {
    None,
    All,
    Blocks(Vec<usize>),
}

impl TapSelection {
    pub fn wants(&self, block: usize) -> bool {
        match self {
            TapSelection::None => false,
            TapSelection::All => true,
            TapSelection::Blocks(b) => b.contains(&block),
        }
    }
}

pub struct HookContext<'a> {
    pub timestep: usize,
    pub block: &'a BlockInfo,
    pub kind: FeatureKind,
}

/// Intercepts key/value tensors of every block for a whole batch.
///
/// Implementations may rewrite values but must keep every shape.
pub trait FeatureHook {
    fn intercept(&mut self, ctx: &HookContext<'_>, features: &mut [FeatureMap]) -> Result<()>;
}

/// Run a hook and verify it preserved all shapes.
pub(crate) fn run_hook(hook: &mut dyn FeatureHook, ctx: &HookContext<'_>, features: &mut [FeatureMap]) -> Result<()> {
    let shapes: Vec<_> = features.iter().map(|f| f.data.dim()).collect();
    hook.intercept(ctx, features)?;
    for (f, s) in features.iter().zip(shapes) {
        if f.data.dim() != s {
            return Err(Error::Contract(format!(
                "hook changed feature shape at block {} from {:?} to {:?}",
                ctx.block.id,
                s,
                f.data.dim()
            )));
        }
    }
    Ok(())
}

/// Control conditioning for one request, laid out like its latent canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCondition {
    /// Depth and edge maps at image resolution, concatenated like the latent.
    pub depth: Array2<f64>,
    pub edge: Array2<f64>,
    pub depth_weight: f64,
    pub edge_weight: f64,
    /// Conditioning strength in [0, 1].
    pub strength: f64,
}

impl ControlCondition {
    pub fn grid(&self) -> Grid {
        let (r, c) = self.depth.dim();
        Grid::new(r as u32, c as u32)
    }

    /// Join two conditions along the canvas axis of `orientation`.
    pub fn concat(a: &ControlCondition, b: &ControlCondition, orientation: crate::geometry::Orientation) -> Result<Self> {
        let axis = match orientation {
            crate::geometry::Orientation::Horizontal => ndarray::Axis(1),
            crate::geometry::Orientation::Vertical => ndarray::Axis(0),
        };
        let cat = |x: &Array2<f64>, y: &Array2<f64>| {
            ndarray::concatenate(axis, &[x.view(), y.view()]).map_err(|e| Error::arg(e.to_string()))
        };
        Ok(Self {
            depth: cat(&a.depth, &b.depth)?,
            edge: cat(&a.edge, &b.edge)?,
            depth_weight: a.depth_weight,
            edge_weight: a.edge_weight,
            strength: a.strength,
        })
    }
}

/// One latent in a denoise batch.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub latent: &'a Latent,
    pub prompt: &'a str,
    pub control: Option<&'a ControlCondition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    /// Velocity prediction, same shape as the latent.
    pub prediction: Latent,
    pub taps: BTreeMap<TapKey, FeatureMap>,
}

pub trait DenoiserBackend {
    fn name(&self) -> &str;

    /// Model/weights identity recorded in run manifests.
    fn version(&self) -> String;

    fn catalog(&self) -> &BlockCatalog;

    /// Sampler step count T.
    fn total_steps(&self) -> usize;

    fn latent_channels(&self) -> usize;

    /// Image pixels per latent cell along each axis.
    fn downsample(&self) -> u32;

    /// Per-image feature grid for a latent grid.
    fn feature_grid(&self, latent: Grid) -> Grid;

    /// Whether [`DenoiserBackend::feature_vjp`] is supported.
    fn differentiable(&self) -> bool;

    /// One sampler step for a batch. The hook, when present, is applied in
    /// block order to keys then values of every block.
    fn denoise(
        &self,
        batch: &[DenoiseRequest<'_>],
        timestep: usize,
        hook: Option<&mut dyn FeatureHook>,
        taps: &TapSelection,
    ) -> Result<Vec<DenoiseOutput>>;

    /// Pull back cotangents on hook-free tapped features to the latent.
    fn feature_vjp(
        &self,
        _request: &DenoiseRequest<'_>,
        _timestep: usize,
        _cotangents: &BTreeMap<TapKey, FeatureMap>,
    ) -> Result<Latent> {
        Err(Error::unavailable(self.name(), "backend is not differentiable"))
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<RgbImage>;
}

/// Check that a request's control map lines up with its latent.
pub(crate) fn check_geometry(req: &DenoiseRequest<'_>, downsample: u32) -> Result<()> {
    if let Some(c) = req.control {
        let lg = latent_grid(req.latent);
        let expected = Grid::new(lg.rows * downsample, lg.cols * downsample);
        if c.grid() != expected || c.edge.dim() != c.depth.dim() {
            return Err(Error::arg(format!(
                "control grid {} does not match latent grid {} at downsample {downsample}",
                c.grid(),
                lg
            )));
        }
        if !(0.0..=1.0).contains(&c.strength) {
            return Err(Error::arg(format!("control strength {} not in [0,1]", c.strength)));
        }
    }
    Ok(())
}

/// Denoise a single canvas. Returns the velocity prediction and the taps.
pub fn denoise_edge(
    backend: &dyn DenoiserBackend,
    z_ij: &EdgeLatent,
    prompt: &str,
    control: Option<&ControlCondition>,
    hook: Option<&mut dyn FeatureHook>,
    taps: &TapSelection,
) -> Result<(Latent, BTreeMap<TapKey, FeatureMap>)> {
    let req = DenoiseRequest {
        latent: z_ij.z(),
        prompt,
        control,
    };
    let mut out = backend.denoise(&[req], z_ij.timestep(), hook, taps)?;
    let o = out.pop().ok_or_else(|| Error::Invariant("backend returned no output".into()))?;
    Ok((o.prediction, o.taps))
}

/// Backend selection key of a run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Dit,
}

/// Construct the configured backend.
///
/// The diffusion-transformer backend needs model weights and an inference
/// runtime located through `SETFUSE_DIT_MODEL`; this build only links the
/// mock, so `dit` reports itself unavailable.
pub fn select_backend(kind: BackendKind, mock: &MockConfig) -> Result<Box<dyn DenoiserBackend>> {
    match kind {
        BackendKind::Mock => Ok(Box::new(MockBackend::new(mock.clone())?)),
        BackendKind::Dit => {
            let reason = match std::env::var("SETFUSE_DIT_MODEL") {
                Ok(path) => format!("model at {path} found, but no DiT inference runtime is linked into this build"),
                Err(_) => "SETFUSE_DIT_MODEL is not set and no DiT inference runtime is linked into this build".to_string(),
            };
            Err(Error::unavailable("dit", reason))
        }
    }
}
