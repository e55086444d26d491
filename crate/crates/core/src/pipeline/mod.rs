//! The set generation loop and its localized-editing variant.
//!
//! [`generate_set`] and [`edit_set`] take prepared inputs (images, control
//! maps, correspondences, prompts) and a backend; [`run`] prepares those
//! inputs from a config and writes the run directory.

mod config;
mod io;
mod manifest;

use std::collections::BTreeMap;
use std::time::Instant;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backend::{
    control_strength, BlockCatalog, ControlCondition, ControlSignal, DenoiseRequest, DenoiserBackend, TapSelection,
};
use crate::cache::FeatureRecord;
use crate::correspondence::{rescale_all, subsample_matches, symmetrize_all, CorrespondenceMap, PairMaps, PixelMatch};
use crate::error::{Error, Result, StageExt};
use crate::feature::{latent_grid, Latent};
use crate::fusion::{BatchItem, FusionSchedule, MultiviewFusion};
use crate::geometry::{Grid, ImageId, Orientation};
use crate::graph::{build_graph, consolidate_edges, make_edge_latent, ConsistencyGraph, EdgeLatent, NodeLatent};
use crate::guidance::{guidance_step, AdamState, Conditioning, GuidanceLayout};
use crate::prompts::{build_grid_prompt, build_image_prompt, PromptBundle};

pub use config::{
    load_config, validate_config, AblationConfig, ControlConfig, DebugConfig, EditConfig, EditPreset, Mode,
    PromptConfig, RunConfig, MAX_FULL_METHOD_IMAGES,
};
pub use io::{load_images, match_set, prepare_inputs, run, write_run, MatchOptions};
pub use manifest::{sha256_hex, OutputRecord, RunManifest, Stage, StepRecord, Timings};

/// Everything a run consumes besides its config and backend.
#[derive(Debug, Clone)]
pub struct SetInputs {
    pub images: Vec<RgbImage>,
    /// One per image; may be empty when control is disabled.
    pub controls: Vec<ControlSignal>,
    /// Ordered-pair correspondences at any resolution.
    pub maps: PairMaps,
    pub prompts: PromptBundle,
    /// Matcher identity recorded in the manifest.
    pub matcher: String,
}

/// Images and records produced by a run.
#[derive(Debug, Clone)]
pub struct SetOutput {
    pub images: Vec<RgbImage>,
    pub manifest: RunManifest,
    pub timings: Timings,
    /// Decoded node latents after each step, when requested.
    pub intermediates: Vec<(usize, Vec<RgbImage>)>,
    pub features: Vec<FeatureRecord>,
    /// The maps used for fusion and guidance, at feature resolution.
    pub feature_maps: PairMaps,
}

/// Bring maps to feature resolution and subsample them.
///
/// With `symmetric`, only mutual matches are kept and each pair is
/// subsampled consistently in both directions. Otherwise every ordered
/// map is subsampled on its own.
pub fn prepare_maps(maps: &PairMaps, grid: Grid, fraction: f64, seed: u64, symmetric: bool) -> Result<PairMaps> {
    let pair_seed = |i: ImageId, j: ImageId| seed ^ ((i as u64) << 32 | j as u64);
    let rescaled = rescale_all(maps, grid)?;
    if !symmetric {
        if fraction >= 1.0 {
            return Ok(rescaled);
        }
        return rescaled
            .iter()
            .map(|(&(i, j), m)| Ok(((i, j), subsample_matches(m, fraction, pair_seed(i, j))?)))
            .collect();
    }
    let sym = symmetrize_all(&rescaled)?;
    if fraction >= 1.0 {
        return Ok(sym);
    }
    let mut out = PairMaps::new();
    for ((i, j), m) in &sym {
        if i > j {
            continue;
        }
        let fwd = subsample_matches(m, fraction, pair_seed(*i, *j))?;
        let bwd = CorrespondenceMap::from_matches(
            (*j, *i),
            grid,
            fwd.iter().map(|e| PixelMatch {
                src: e.dst,
                dst: e.src,
                confidence: sym[&(*j, *i)].confidence(e.dst).unwrap_or(e.confidence),
            }),
        )?;
        out.insert((*i, *j), fwd);
        out.insert((*j, *i), bwd);
    }
    Ok(out)
}

/// Independent standard-normal noise for node `i`, from its own stream.
fn node_noise(seed: u64, stream: u64, shape: (usize, usize, usize)) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Latent::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

fn sigma(t: usize, total: usize) -> f64 {
    t as f64 / total as f64
}

/// Shared per-run state: which units denoise, and how.
struct Engine<'a> {
    cfg: &'a RunConfig,
    backend: &'a dyn DenoiserBackend,
    graph: ConsistencyGraph,
    maps: PairMaps,
    controls: &'a [ControlSignal],
    n: usize,
    shape: (usize, usize, usize),
    pairwise: bool,
    mff: bool,
    timings: Timings,
    features: Vec<FeatureRecord>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a RunConfig, backend: &'a dyn DenoiserBackend, inputs: &'a SetInputs) -> Result<(Self, Vec<Latent>)> {
        cfg.check()?;
        let n = inputs.images.len();
        if n < 2 {
            return Err(Error::arg(format!("a set needs at least 2 images, got {n}")));
        }
        if backend.total_steps() != cfg.total_steps {
            return Err(Error::config(
                "total_steps",
                format!("backend samples {} steps, config asks for {}", backend.total_steps(), cfg.total_steps),
            ));
        }
        inputs.prompts.validate(n)?;
        let (w, h) = inputs.images[0].dimensions();
        if inputs.images.iter().any(|im| im.dimensions() != (w, h)) {
            return Err(Error::arg("all images of a set must share one size"));
        }
        if cfg.control.enabled && inputs.controls.len() != n {
            return Err(Error::arg(format!("{} control signals for {n} images", inputs.controls.len())));
        }
        let sources: Vec<Latent> = inputs
            .images
            .iter()
            .map(|im| backend.encode(im))
            .collect::<Result<_>>()
            .stage("encode")?;
        let shape = sources[0].dim();
        let orientation = cfg.orientation.unwrap_or_else(|| Orientation::from_aspect(w, h));
        let graph = build_graph(n, cfg.degree_cap, cfg.seed).stage("graph")?.with_orientation(orientation);
        let fgrid = backend.feature_grid(latent_grid(&sources[0]));
        let maps = prepare_maps(&inputs.maps, fgrid, cfg.match_fraction, cfg.seed, cfg.symmetric_matches).stage("correspondence")?;
        Ok((
            Self {
                cfg,
                backend,
                graph,
                maps,
                controls: &inputs.controls,
                n,
                shape,
                pairwise: !cfg.ablation.no_graph,
                mff: !cfg.ablation.no_mff,
                timings: Timings::default(),
                features: Vec::new(),
            },
            sources,
        ))
    }

    fn units(&self) -> usize {
        if self.pairwise {
            self.graph.edges.len()
        } else {
            self.n
        }
    }

    fn items(&self) -> Vec<BatchItem> {
        if self.pairwise {
            self.graph
                .edges
                .iter()
                .map(|&pair| BatchItem::Canvas { pair, orientation: self.graph.orientation })
                .collect()
        } else {
            (0..self.n).map(|node| BatchItem::Single { node }).collect()
        }
    }

    fn unit_prompts(&self, shared: &str, captions: &[String]) -> Vec<String> {
        if self.pairwise {
            self.graph
                .edges
                .iter()
                .map(|&(i, j)| build_grid_prompt(shared, &captions[i], &captions[j], self.graph.orientation))
                .collect()
        } else {
            captions.iter().map(|c| build_image_prompt(shared, c)).collect()
        }
    }

    fn unit_controls(&self, strength: f64) -> Result<Vec<Option<ControlCondition>>> {
        if !self.cfg.control.enabled {
            return Ok(vec![None; self.units()]);
        }
        if self.pairwise {
            self.graph
                .edges
                .iter()
                .map(|&(i, j)| {
                    ControlCondition::concat(
                        &self.controls[i].condition(strength),
                        &self.controls[j].condition(strength),
                        self.graph.orientation,
                    )
                    .map(Some)
                })
                .collect()
        } else {
            Ok(self.controls.iter().map(|c| Some(c.condition(strength))).collect())
        }
    }

    fn unit_latents(&self, nodes: &BTreeMap<ImageId, NodeLatent>) -> Result<Vec<Latent>> {
        if self.pairwise {
            self.graph
                .edges
                .iter()
                .map(|&(i, j)| Ok(make_edge_latent(&nodes[&i], &nodes[&j], self.graph.orientation)?.into_z()))
                .collect()
        } else {
            Ok((0..self.n).map(|i| nodes[&i].z.clone()).collect())
        }
    }

    /// Velocities of every unit in one lockstep batch. Returns the number
    /// of fused hook calls.
    fn predict(
        &mut self,
        latents: &[Latent],
        prompts: &[String],
        controls: &[Option<ControlCondition>],
        schedule: &FusionSchedule,
        t: usize,
        stage: &'static str,
    ) -> Result<(Vec<Latent>, usize)> {
        let start = Instant::now();
        let batch: Vec<DenoiseRequest<'_>> = latents
            .iter()
            .zip(prompts)
            .zip(controls)
            .map(|((latent, prompt), control)| DenoiseRequest { latent, prompt, control: control.as_ref() })
            .collect();
        let taps = if self.cfg.debug.dump_features { TapSelection::All } else { TapSelection::None };
        let mut fusion = MultiviewFusion::new(schedule, &self.maps, self.items());
        let hook: Option<&mut dyn crate::backend::FeatureHook> = if self.mff { Some(&mut fusion) } else { None };
        let outs = self.backend.denoise(&batch, t, hook, &taps).stage(stage)?;
        let fused = fusion.active_calls;
        if self.cfg.debug.dump_features && stage != "denoise_source" {
            self.record_features(&outs, t)?;
        }
        self.timings.add(stage, start.elapsed().as_secs_f64());
        Ok((outs.into_iter().map(|o| o.prediction).collect(), fused))
    }

    fn record_features(&mut self, outs: &[crate::backend::DenoiseOutput], t: usize) -> Result<()> {
        let catalog: &BlockCatalog = self.backend.catalog();
        for (item, out) in self.items().into_iter().zip(outs) {
            for (&(block, kind), f) in &out.taps {
                let stream = catalog.blocks()[block].stream;
                let halves = match item {
                    BatchItem::Canvas { pair, orientation } => {
                        let (a, b) = f.split(orientation)?;
                        vec![(pair.0, a), (pair.1, b)]
                    }
                    BatchItem::Single { node } => vec![(node, f.clone())],
                };
                for (owner, map) in halves {
                    self.features.push(FeatureRecord { owner, block, stream, kind, timestep: t, map });
                }
            }
        }
        Ok(())
    }

    /// One Euler update of every unit, then consolidation across edges.
    fn advance(
        &mut self,
        latents: Vec<Latent>,
        velocities: &[Latent],
        dsigma: f64,
        t_next: usize,
    ) -> Result<BTreeMap<ImageId, NodeLatent>> {
        let start = Instant::now();
        let stepped: Vec<Latent> = latents.into_iter().zip(velocities).map(|(z, v)| z + &(v * dsigma)).collect();
        let out = if self.pairwise {
            let edges: Vec<EdgeLatent> = stepped
                .into_iter()
                .zip(&self.graph.edges)
                .map(|(z, &pair)| EdgeLatent::new(pair, z, self.graph.orientation, t_next))
                .collect::<Result<_>>()?;
            consolidate_edges(&self.graph, &edges).stage("consolidate")?
        } else {
            stepped
                .into_iter()
                .enumerate()
                .map(|(id, z)| (id, NodeLatent { id, z, timestep: t_next }))
                .collect()
        };
        self.timings.add("consolidate", start.elapsed().as_secs_f64());
        Ok(out)
    }

    fn denoise_stage(&self) -> Stage {
        if self.pairwise {
            Stage::DenoiseEdges
        } else {
            Stage::DenoiseImages
        }
    }

    fn decode(&mut self, nodes: &BTreeMap<ImageId, NodeLatent>) -> Result<Vec<RgbImage>> {
        let start = Instant::now();
        let out = (0..self.n).map(|i| self.backend.decode(&nodes[&i].z)).collect::<Result<Vec<_>>>().stage("decode")?;
        self.timings.add("decode", start.elapsed().as_secs_f64());
        Ok(out)
    }

    fn manifest(
        &self,
        inputs: &SetInputs,
        guidance: bool,
        edge_prompts: Vec<String>,
        source_edge_prompts: Vec<String>,
        steps: Vec<StepRecord>,
        warnings: Vec<String>,
    ) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.clone(),
            backend: self.backend.name().to_string(),
            backend_version: self.backend.version(),
            matcher: inputs.matcher.clone(),
            graph: self.graph.clone(),
            pairwise: self.pairwise,
            mff: self.mff,
            guidance,
            prompts: inputs.prompts.clone(),
            image_prompts: (0..self.n).map(|i| inputs.prompts.image_prompt(i)).collect(),
            edge_prompts,
            source_edge_prompts,
            match_counts: self.maps.iter().map(|((i, j), m)| (format!("{i}-{j}"), m.len())).collect(),
            warnings,
            steps,
            outputs: Vec::new(),
        }
    }

    fn finish(
        mut self,
        manifest: RunManifest,
        final_nodes: &BTreeMap<ImageId, NodeLatent>,
        intermediates: Vec<(usize, Vec<RgbImage>)>,
    ) -> Result<SetOutput> {
        let images = self.decode(final_nodes)?;
        Ok(SetOutput {
            images,
            manifest,
            timings: self.timings,
            intermediates,
            features: self.features,
            feature_maps: self.maps,
        })
    }
}

/// Generate a new set: joint denoising of all edge canvases with feature
/// fusion, consolidation of node latents, then feature guidance.
pub fn generate_set(cfg: &RunConfig, inputs: &SetInputs, backend: &dyn DenoiserBackend) -> Result<SetOutput> {
    let (mut eng, _sources) = Engine::new(cfg, backend, inputs)?;
    let total = cfg.total_steps;
    let mut warnings = inputs.prompts.warnings.clone();
    let guidance_on = cfg.guidance.enabled && !cfg.ablation.no_guidance;
    let mut gcfg = cfg.guidance.clone();
    gcfg.enabled = guidance_on;
    if guidance_on && !backend.differentiable() {
        warnings.push(format!("backend {} has no feature gradients; guidance disabled", backend.name()));
        gcfg.enabled = false;
    }

    let mut nodes: BTreeMap<ImageId, NodeLatent> = (0..eng.n)
        .map(|id| (id, NodeLatent { id, z: node_noise(cfg.seed, id as u64, eng.shape), timestep: total }))
        .collect();
    let prompts = eng.unit_prompts(&inputs.prompts.p_shared, &inputs.prompts.p_nonshared);
    let mut adam = AdamState::default();
    let mut steps = Vec::with_capacity(total);
    let mut intermediates = Vec::new();

    for t in (1..=total).rev() {
        let strength = if cfg.control.anneal { control_strength(t, total) } else { cfg.control.strength };
        let controls = eng.unit_controls(strength)?;
        let latents = eng.unit_latents(&nodes)?;
        let (v, fused) = eng.predict(&latents, &prompts, &controls, &cfg.fusion, t, "denoise")?;
        let mut stages = vec![eng.denoise_stage()];
        nodes = eng.advance(latents, &v, sigma(t - 1, total) - sigma(t, total), t - 1)?;
        if eng.pairwise {
            stages.push(Stage::Consolidate);
        }
        let mut record = StepRecord {
            t,
            stages,
            fused_calls: fused,
            control_strength: strength,
            guidance_loss: Vec::new(),
            guidance_lr: None,
        };
        if gcfg.active(t) {
            let start = Instant::now();
            let cond: Vec<Conditioning> = prompts
                .iter()
                .zip(controls)
                .map(|(p, c)| Conditioning { prompt: p.clone(), control: c })
                .collect();
            let layout = if eng.pairwise { GuidanceLayout::Canvas(cond) } else { GuidanceLayout::PerImage(cond) };
            let out = guidance_step(&nodes, &eng.graph, &eng.maps, backend, &gcfg, &layout, &mut adam, t)
                .stage("guidance")?;
            nodes = out.nodes;
            record.stages.push(Stage::Guidance);
            record.guidance_loss = out.losses;
            record.guidance_lr = Some(out.lr);
            warnings.extend(out.warnings);
            eng.timings.add("guidance", start.elapsed().as_secs_f64());
        }
        steps.push(record);
        if cfg.debug.decode_intermediate {
            intermediates.push((t - 1, eng.decode(&nodes)?));
        }
    }
    let manifest = eng.manifest(inputs, gcfg.enabled, prompts, Vec::new(), steps, warnings);
    eng.finish(manifest, &nodes, intermediates)
}

/// Localized edit of the sources: velocities are differences of target
/// and source predictions along a shared noisy path, with the same graph
/// and maps on both sides. Guidance is not applied.
pub fn edit_set(cfg: &RunConfig, inputs: &SetInputs, backend: &dyn DenoiserBackend) -> Result<SetOutput> {
    let source_captions = inputs
        .prompts
        .p_source
        .clone()
        .ok_or_else(|| Error::config("prompts.source_captions", "edit mode needs per-image source captions"))?;
    let (mut eng, sources) = Engine::new(cfg, backend, inputs)?;
    let total = cfg.total_steps;
    let ec = &cfg.edit;
    let strength = ec.control_strength();
    let source_shared = cfg.prompts.source_shared.clone().unwrap_or_else(|| inputs.prompts.p_shared.clone());
    let tar_prompts = eng.unit_prompts(&inputs.prompts.p_shared, &inputs.prompts.p_nonshared);
    let src_prompts = eng.unit_prompts(&source_shared, &source_captions);
    let controls = eng.unit_controls(strength)?;
    let x: BTreeMap<ImageId, NodeLatent> = sources
        .into_iter()
        .enumerate()
        .map(|(id, z)| (id, NodeLatent { id, z, timestep: total }))
        .collect();
    let mut z_edit = x.clone();
    let mut z_tar: Option<BTreeMap<ImageId, NodeLatent>> = None;
    let mut steps = Vec::new();
    let mut intermediates = Vec::new();

    for t in (1..=total).rev() {
        if t > ec.n_max {
            continue;
        }
        let (s_t, s_next) = (sigma(t, total), sigma(t - 1, total));
        let noisy_source = |id: ImageId| -> Latent {
            let eps = node_noise(cfg.seed, ((t as u64) << 32) | id as u64, eng.shape);
            &x[&id].z * (1.0 - s_t) + &(eps * s_t)
        };
        let mut stages = Vec::new();
        let fused;
        if t > ec.n_min {
            let z_src: BTreeMap<ImageId, NodeLatent> = (0..eng.n)
                .map(|id| (id, NodeLatent { id, z: noisy_source(id), timestep: t }))
                .collect();
            let z_t: BTreeMap<ImageId, NodeLatent> = (0..eng.n)
                .map(|id| {
                    let z = &z_edit[&id].z + &z_src[&id].z - &x[&id].z;
                    (id, NodeLatent { id, z, timestep: t })
                })
                .collect();
            let src_units = eng.unit_latents(&z_src)?;
            let tar_units = eng.unit_latents(&z_t)?;
            let (v_src, f_src) = eng.predict(&src_units, &src_prompts, &controls, &ec.fusion, t, "denoise_source")?;
            let (v_tar, f_tar) = eng.predict(&tar_units, &tar_prompts, &controls, &ec.fusion, t, "denoise")?;
            fused = f_src + f_tar;
            stages.extend([Stage::DenoiseSource, eng.denoise_stage()]);
            let delta: Vec<Latent> = v_tar.iter().zip(&v_src).map(|(a, b)| a - b).collect();
            let relabel = |m: &BTreeMap<ImageId, NodeLatent>| -> BTreeMap<ImageId, NodeLatent> {
                m.iter().map(|(&id, n)| (id, NodeLatent { id, z: n.z.clone(), timestep: t })).collect()
            };
            let edit_units = eng.unit_latents(&relabel(&z_edit))?;
            z_edit = eng.advance(edit_units, &delta, s_next - s_t, t - 1)?;
        } else {
            let current = z_tar.take().unwrap_or_else(|| {
                (0..eng.n)
                    .map(|id| {
                        let z = &z_edit[&id].z + &noisy_source(id) - &x[&id].z;
                        (id, NodeLatent { id, z, timestep: t })
                    })
                    .collect()
            });
            let units = eng.unit_latents(&current)?;
            let (v, f) = eng.predict(&units, &tar_prompts, &controls, &ec.fusion, t, "denoise")?;
            fused = f;
            stages.push(eng.denoise_stage());
            z_tar = Some(eng.advance(units, &v, s_next - s_t, t - 1)?);
        }
        if eng.pairwise {
            stages.push(Stage::Consolidate);
        }
        steps.push(StepRecord {
            t,
            stages,
            fused_calls: fused,
            control_strength: strength,
            guidance_loss: Vec::new(),
            guidance_lr: None,
        });
        if cfg.debug.decode_intermediate {
            let cur = z_tar.as_ref().unwrap_or(&z_edit).clone();
            intermediates.push((t - 1, eng.decode(&cur)?));
        }
    }
    let final_nodes = z_tar.unwrap_or(z_edit);
    let manifest = eng.manifest(inputs, false, tar_prompts, src_prompts, steps, inputs.prompts.warnings.clone());
    eng.finish(manifest, &final_nodes, intermediates)
}
