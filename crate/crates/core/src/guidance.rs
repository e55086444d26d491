//! Feature guidance: gradient refinement of node latents that pulls
//! matched denoiser features of every graph edge towards each other.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backend::{ControlCondition, DenoiseRequest, DenoiserBackend, TapKey, TapSelection};
use crate::correspondence::{CorrespondenceMap, PairMaps};
use crate::error::{Error, Result};
use crate::feature::{latent_grid, FeatureMap, Latent};
use crate::geometry::{Coord, ImageId, Orientation};
use crate::graph::{make_edge_latent, split_edge_latent, ConsistencyGraph, Edge, EdgeLatent, NodeLatent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    /// Guidance runs while `t > active_min_t`.
    pub active_min_t: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps_per_t: usize,
    /// Keep Adam moments across denoising steps instead of resetting them.
    pub persistent_moments: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            active_min_t: 10,
            lr_start: 0.016,
            lr_end: 0.002,
            steps_per_t: 1,
            persistent_moments: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::config(
                "guidance.lr_start",
                format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end),
            ));
        }
        if self.active_min_t > total_steps {
            return Err(Error::config(
                "guidance.active_min_t",
                format!("{} exceeds the {total_steps} sampler steps", self.active_min_t),
            ));
        }
        if self.steps_per_t == 0 {
            return Err(Error::config("guidance.steps_per_t", "must be at least 1"));
        }
        Ok(())
    }

    pub fn active(&self, t: usize) -> bool {
        self.enabled && t > self.active_min_t
    }
}

/// Linear learning-rate anneal: `lr_start` at `t = total_steps`, `lr_end` at 0.
pub fn lr_schedule(t: f64, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_end;
    }
    let frac = (t / total_steps as f64).clamp(0.0, 1.0);
    lr_end + (lr_start - lr_end) * frac
}

/// Features of the two slots of one edge for a single tap.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    pub edge: Edge,
    pub first: FeatureMap,
    pub second: FeatureMap,
}

/// Matches of an edge as (cell in first slot, cell in second slot).
fn edge_matches(edge: Edge, maps: &PairMaps) -> Vec<(Coord, Coord)> {
    if let Some(m) = maps.get(&edge) {
        return m.iter().map(|e| (e.src, e.dst)).collect();
    }
    if let Some(m) = maps.get(&(edge.1, edge.0)) {
        return m.iter().map(|e| (e.dst, e.src)).collect();
    }
    Vec::new()
}

fn check_resolution(map: Option<&CorrespondenceMap>, f: &FeatureMap) -> Result<()> {
    if let Some(m) = map {
        if m.resolution != f.grid() {
            return Err(Error::arg(format!(
                "map {:?} at {} but features at {}",
                m.pair,
                m.resolution,
                f.grid()
            )));
        }
    }
    Ok(())
}

/// Mean matched-feature distance over edges with at least one match.
///
/// Each edge contributes the mean L2 distance over its matches; edges
/// without matches are left out of the edge average.
pub fn guidance_loss(features: &[EdgeFeatures], maps: &PairMaps) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for ef in features {
        check_resolution(maps.get(&ef.edge).or(maps.get(&(ef.edge.1, ef.edge.0))), &ef.first)?;
        let matches = edge_matches(ef.edge, maps);
        if matches.is_empty() {
            continue;
        }
        let sum: f64 = matches
            .iter()
            .map(|&(a, b)| {
                let d = &ef.first.at(a) - &ef.second.at(b);
                d.dot(&d).sqrt()
            })
            .sum();
        total += sum / matches.len() as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Loss and per-slot cotangents for one tap, scaled by `weight`.
fn loss_and_cotangents(
    features: &[EdgeFeatures],
    maps: &PairMaps,
    weight: f64,
) -> Result<(f64, Vec<(FeatureMap, FeatureMap)>)> {
    let active = features.iter().filter(|ef| !edge_matches(ef.edge, maps).is_empty()).count();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for ef in features {
        check_resolution(maps.get(&ef.edge).or(maps.get(&(ef.edge.1, ef.edge.0))), &ef.first)?;
        let mut g1 = FeatureMap::new(Array3::zeros(ef.first.data.dim()));
        let mut g2 = FeatureMap::new(Array3::zeros(ef.second.data.dim()));
        let matches = edge_matches(ef.edge, maps);
        if !matches.is_empty() {
            let w = weight / (active as f64 * matches.len() as f64);
            for &(a, b) in &matches {
                let d = &ef.first.at(a) - &ef.second.at(b);
                let norm = d.dot(&d).sqrt();
                loss += w * norm;
                // subgradient 0 at coincident features
                if norm > 0.0 {
                    let unit = d / norm * w;
                    let mut ga = g1.at_mut(a);
                    ga += &unit;
                    let mut gb = g2.at_mut(b);
                    gb -= &unit;
                }
            }
        }
        grads.push((g1, g2));
    }
    Ok((loss, grads))
}

/// Prompt and control used for one guidance forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub prompt: String,
    pub control: Option<ControlCondition>,
}

/// How features for the loss are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceLayout {
    /// One canvas pass per edge, conditioning indexed by edge id.
    Canvas(Vec<Conditioning>),
    /// One pass per image, conditioning indexed by node id.
    PerImage(Vec<Conditioning>),
}

/// Loss over all taps and its gradient with respect to every node latent.
pub fn guidance_gradient(
    nodes: &BTreeMap<ImageId, NodeLatent>,
    graph: &ConsistencyGraph,
    maps: &PairMaps,
    backend: &dyn DenoiserBackend,
    layout: &GuidanceLayout,
    t: usize,
) -> Result<(f64, BTreeMap<ImageId, Latent>)> {
    let node = |i: ImageId| nodes.get(&i).ok_or_else(|| Error::Invariant(format!("missing node latent {i}")));
    let mut grads: BTreeMap<ImageId, Latent> = nodes.iter().map(|(&i, n)| (i, Array3::zeros(n.z.dim()))).collect();
    match layout {
        GuidanceLayout::Canvas(cond) => {
            if cond.len() != graph.edges.len() {
                return Err(Error::arg(format!("{} edge conditionings for {} edges", cond.len(), graph.edges.len())));
            }
            let canvases: Vec<EdgeLatent> = graph
                .edges
                .iter()
                .map(|&(i, j)| make_edge_latent(node(i)?, node(j)?, graph.orientation))
                .collect::<Result<_>>()?;
            let taps: Vec<BTreeMap<TapKey, FeatureMap>> = canvases
                .iter()
                .zip(cond)
                .map(|(c, k)| {
                    let req = DenoiseRequest { latent: c.z(), prompt: &k.prompt, control: k.control.as_ref() };
                    let mut out = backend.denoise(&[req], t, None, &TapSelection::All)?;
                    Ok(out.pop().map(|o| o.taps).unwrap_or_default())
                })
                .collect::<Result<_>>()?;
            let per_tap = split_canvas_taps(graph, &taps, graph.orientation)?;
            let (loss, cot) = tap_cotangents(&per_tap, maps)?;
            for (e, canvas) in canvases.iter().enumerate() {
                let cotangents: BTreeMap<TapKey, FeatureMap> = cot
                    .iter()
                    .map(|(key, slots)| {
                        let (a, b) = &slots[e];
                        Ok((*key, FeatureMap::concat(a, b, graph.orientation)?))
                    })
                    .collect::<Result<_>>()?;
                let req = DenoiseRequest {
                    latent: canvas.z(),
                    prompt: &cond[e].prompt,
                    control: cond[e].control.as_ref(),
                };
                let g = backend.feature_vjp(&req, t, &cotangents)?;
                let g = EdgeLatent::new(canvas.pair(), g, graph.orientation, t)?;
                let (gi, gj) = split_edge_latent(&g);
                *grads.get_mut(&gi.id).expect("node grad") += &gi.z;
                *grads.get_mut(&gj.id).expect("node grad") += &gj.z;
            }
            Ok((loss, grads))
        }
        GuidanceLayout::PerImage(cond) => {
            if cond.len() != graph.n {
                return Err(Error::arg(format!("{} node conditionings for {} nodes", cond.len(), graph.n)));
            }
            let taps: Vec<BTreeMap<TapKey, FeatureMap>> = (0..graph.n)
                .map(|i| {
                    let req = DenoiseRequest {
                        latent: &node(i)?.z,
                        prompt: &cond[i].prompt,
                        control: cond[i].control.as_ref(),
                    };
                    let mut out = backend.denoise(&[req], t, None, &TapSelection::All)?;
                    Ok(out.pop().map(|o| o.taps).unwrap_or_default())
                })
                .collect::<Result<_>>()?;
            let mut per_tap: BTreeMap<TapKey, Vec<EdgeFeatures>> = BTreeMap::new();
            for &(i, j) in &graph.edges {
                for (key, fi) in &taps[i] {
                    let fj = taps[j]
                        .get(key)
                        .ok_or_else(|| Error::Contract(format!("tap {key:?} missing for node {j}")))?;
                    per_tap.entry(*key).or_default().push(EdgeFeatures {
                        edge: (i, j),
                        first: fi.clone(),
                        second: fj.clone(),
                    });
                }
            }
            let (loss, cot) = tap_cotangents(&per_tap, maps)?;
            let mut node_cot: Vec<BTreeMap<TapKey, FeatureMap>> = vec![BTreeMap::new(); graph.n];
            for (key, slots) in &cot {
                for (e, &(i, j)) in graph.edges.iter().enumerate() {
                    let (a, b) = &slots[e];
                    add_cotangent(&mut node_cot[i], *key, a);
                    add_cotangent(&mut node_cot[j], *key, b);
                }
            }
            for (i, c) in node_cot.iter().enumerate() {
                if c.is_empty() {
                    continue;
                }
                let req = DenoiseRequest {
                    latent: &node(i)?.z,
                    prompt: &cond[i].prompt,
                    control: cond[i].control.as_ref(),
                };
                *grads.get_mut(&i).expect("node grad") += &backend.feature_vjp(&req, t, c)?;
            }
            Ok((loss, grads))
        }
    }
}

fn add_cotangent(acc: &mut BTreeMap<TapKey, FeatureMap>, key: TapKey, g: &FeatureMap) {
    match acc.get_mut(&key) {
        Some(existing) => existing.data += &g.data,
        None => {
            acc.insert(key, g.clone());
        }
    }
}

fn split_canvas_taps(
    graph: &ConsistencyGraph,
    taps: &[BTreeMap<TapKey, FeatureMap>],
    orientation: Orientation,
) -> Result<BTreeMap<TapKey, Vec<EdgeFeatures>>> {
    let mut per_tap: BTreeMap<TapKey, Vec<EdgeFeatures>> = BTreeMap::new();
    for (e, t) in taps.iter().enumerate() {
        for (key, f) in t {
            let (first, second) = f.split(orientation)?;
            per_tap.entry(*key).or_default().push(EdgeFeatures { edge: graph.edges[e], first, second });
        }
    }
    Ok(per_tap)
}

/// Cotangents of the two slots of every edge, per tap.
type TapCotangents = BTreeMap<TapKey, Vec<(FeatureMap, FeatureMap)>>;

/// Average over taps of the per-tap loss, with cotangents per tap and edge.
fn tap_cotangents(
    per_tap: &BTreeMap<TapKey, Vec<EdgeFeatures>>,
    maps: &PairMaps,
) -> Result<(f64, TapCotangents)> {
    let weight = if per_tap.is_empty() { 0.0 } else { 1.0 / per_tap.len() as f64 };
    let mut loss = 0.0;
    let mut out = BTreeMap::new();
    for (key, feats) in per_tap {
        let (l, g) = loss_and_cotangents(feats, maps, weight)?;
        loss += l;
        out.insert(*key, g);
    }
    Ok((loss, out))
}

/// Adam moments per node latent.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<ImageId, Latent>,
    v: BTreeMap<ImageId, Latent>,
    steps: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    fn update(&mut self, nodes: &mut BTreeMap<ImageId, NodeLatent>, grads: &BTreeMap<ImageId, Latent>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.steps);
        let c2 = 1.0 - Self::BETA2.powi(self.steps);
        for (id, g) in grads {
            let m = self.m.entry(*id).or_insert_with(|| Array3::zeros(g.dim()));
            let v = self.v.entry(*id).or_insert_with(|| Array3::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g);
            let z = &mut nodes.get_mut(id).expect("node for gradient").z;
            ndarray::Zip::from(z).and(&*m).and(&*v).for_each(|z, &m, &v| {
                *z -= lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
            });
        }
    }
}

/// Result of one guidance step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutcome {
    pub nodes: BTreeMap<ImageId, NodeLatent>,
    /// Loss before each optimizer update.
    pub losses: Vec<f64>,
    pub lr: f64,
    pub warnings: Vec<String>,
}

/// Refine node latents by `steps_per_t` Adam steps on the guidance loss.
///
/// Outside the active window the latents are returned untouched. A
/// backend without feature gradients disables guidance with a warning.
#[allow(clippy::too_many_arguments)]
pub fn guidance_step(
    nodes: &BTreeMap<ImageId, NodeLatent>,
    graph: &ConsistencyGraph,
    maps: &PairMaps,
    backend: &dyn DenoiserBackend,
    config: &GuidanceConfig,
    layout: &GuidanceLayout,
    state: &mut AdamState,
    t: usize,
) -> Result<GuidanceOutcome> {
    let lr = lr_schedule(t as f64, backend.total_steps(), config.lr_start, config.lr_end);
    let mut out = GuidanceOutcome { nodes: nodes.clone(), losses: Vec::new(), lr, warnings: Vec::new() };
    if !config.active(t) {
        return Ok(out);
    }
    if !backend.differentiable() {
        out.warnings.push(format!("backend {} has no feature gradients; guidance disabled", backend.name()));
        return Ok(out);
    }
    if let Some(n) = nodes.values().next() {
        let fg = backend.feature_grid(latent_grid(&n.z));
        if let Some(m) = maps.values().find(|m| m.resolution != fg) {
            return Err(Error::arg(format!("map {:?} at {} but feature grid is {fg}", m.pair, m.resolution)));
        }
    }
    if !config.persistent_moments {
        state.reset();
    }
    for _ in 0..config.steps_per_t {
        let (loss, grads) = guidance_gradient(&out.nodes, graph, maps, backend, layout, t)?;
        out.losses.push(loss);
        state.update(&mut out.nodes, &grads, lr);
    }
    Ok(out)
}
