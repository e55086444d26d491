//! Multiview feature fusion: averaging denoiser key/value features at
//! matched coordinates, within one canvas and across the whole graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{BlockInfo, FeatureHook, HookContext};
use crate::correspondence::{CorrespondenceMap, PairMaps};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Stream};
use crate::geometry::{Coord, ImageId, Orientation};

/// How a pairwise fusion writes its averages back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WriteBack {
    /// Both matched cells receive the common average.
    #[default]
    Symmetric,
    /// Only the first image's cells are updated.
    OneSided,
}

/// Which blocks fuse at which timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSchedule {
    /// Double-stream blocks fuse while `t > double_stream_min_t`.
    pub double_stream_min_t: usize,
    /// The selected single-stream blocks fuse while `t > single_stream_min_t`.
    pub single_stream_min_t: usize,
    /// How many trailing single-stream blocks are selected.
    pub single_stream_last: usize,
    pub write_back: WriteBack,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        Self {
            double_stream_min_t: 3,
            single_stream_min_t: 15,
            single_stream_last: 3,
            write_back: WriteBack::Symmetric,
        }
    }
}

/// Whether fusion runs for `block` at timestep `t`.
pub fn schedule_active(schedule: &FusionSchedule, t: usize, block: &BlockInfo) -> bool {
    match block.stream {
        Stream::Double => t > schedule.double_stream_min_t,
        Stream::Single => {
            let first_selected = block.stream_len.saturating_sub(schedule.single_stream_last);
            block.index_in_stream >= first_selected && t > schedule.single_stream_min_t
        }
    }
}

/// Fuse matched cells of one two-image canvas.
///
/// With [`WriteBack::Symmetric`] every matched pair ends up holding the same
/// vector. All averages are taken from the input; if several sources map to
/// one destination, the destination receives the mean of their averages.
pub fn fuse_pair(
    canvas: &FeatureMap,
    orientation: Orientation,
    map: &CorrespondenceMap,
    write_back: WriteBack,
) -> Result<FeatureMap> {
    let (f_i, f_j) = canvas.split(orientation)?;
    if map.resolution != f_i.grid() {
        return Err(Error::arg(format!(
            "map resolution {} differs from feature grid {}",
            map.resolution,
            f_i.grid()
        )));
    }
    if map.is_empty() {
        return Ok(canvas.clone());
    }
    let mut out_i = f_i.clone();
    let mut out_j = f_j.clone();
    let mut dst_sums: BTreeMap<Coord, (ndarray::Array1<f64>, usize)> = BTreeMap::new();
    for m in map.iter() {
        let avg = (&f_i.at(m.src) + &f_j.at(m.dst)) * 0.5;
        out_i.at_mut(m.src).assign(&avg);
        if write_back == WriteBack::Symmetric {
            let slot = dst_sums
                .entry(m.dst)
                .or_insert_with(|| (ndarray::Array1::zeros(avg.len()), 0));
            slot.0 += &avg;
            slot.1 += 1;
        }
    }
    for (c, (sum, count)) in dst_sums {
        out_j.at_mut(c).assign(&(sum / count as f64));
    }
    FeatureMap::concat(&out_i, &out_j, orientation)
}

/// Elementwise mean of a node's feature copies over its incident edges.
pub fn aggregate_incident(copies: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = copies
        .first()
        .ok_or_else(|| Error::Invariant("node has no incident feature copies".into()))?;
    let mut acc = first.data.clone();
    for c in &copies[1..] {
        if !c.same_shape(first) {
            return Err(Error::arg("incident feature copies differ in shape"));
        }
        acc += &c.data;
    }
    if copies.len() > 1 {
        acc /= copies.len() as f64;
    }
    Ok(FeatureMap::new(acc))
}

/// Graph-wide fusion of aggregated node features.
///
/// `f_i[c]` becomes the mean of `f̄_i[c]` and every defined `f̄_j[M_ij(c)]`;
/// undefined terms are left out of both sum and divisor. Cells matched in
/// no map keep their aggregated value.
pub fn fuse_graph(
    aggregated: &BTreeMap<ImageId, FeatureMap>,
    maps: &PairMaps,
) -> Result<BTreeMap<ImageId, FeatureMap>> {
    let Some(first) = aggregated.values().next() else {
        return Ok(BTreeMap::new());
    };
    if aggregated.values().any(|f| !f.same_shape(first)) {
        return Err(Error::arg("aggregated feature maps differ in shape"));
    }
    for ((i, j), m) in maps {
        if aggregated.contains_key(i) && aggregated.contains_key(j) && m.resolution != first.grid() {
            return Err(Error::arg(format!(
                "map {:?} resolution {} differs from feature grid {}",
                (i, j),
                m.resolution,
                first.grid()
            )));
        }
    }
    let mut out = aggregated.clone();
    for (&i, f_i) in aggregated {
        let mut sums: BTreeMap<Coord, (ndarray::Array1<f64>, usize)> = BTreeMap::new();
        for (&j, f_j) in aggregated {
            if j == i {
                continue;
            }
            let Some(m) = maps.get(&(i, j)) else { continue };
            for e in m.iter() {
                let slot = sums
                    .entry(e.src)
                    .or_insert_with(|| (f_i.at(e.src).to_owned(), 1));
                slot.0 += &f_j.at(e.dst);
                slot.1 += 1;
            }
        }
        let target = out.get_mut(&i).expect("node present");
        for (c, (sum, count)) in sums {
            target.at_mut(c).assign(&(sum / count as f64));
        }
    }
    Ok(out)
}

/// What one denoiser request in a batch holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchItem {
    Canvas { pair: (ImageId, ImageId), orientation: Orientation },
    Single { node: ImageId },
}

/// Feature hook applying fusion across a batch of canvases (or single images).
pub struct MultiviewFusion<'a> {
    pub schedule: &'a FusionSchedule,
    /// Ordered-pair maps at feature resolution.
    pub maps: &'a PairMaps,
    pub items: Vec<BatchItem>,
    /// Count of (block, kind) interceptions that fused.
    pub active_calls: usize,
}

impl<'a> MultiviewFusion<'a> {
    pub fn new(schedule: &'a FusionSchedule, maps: &'a PairMaps, items: Vec<BatchItem>) -> Self {
        Self {
            schedule,
            maps,
            items,
            active_calls: 0,
        }
    }

    fn apply(&self, features: &mut [FeatureMap]) -> Result<()> {
        if features.len() != self.items.len() {
            return Err(Error::Contract(format!(
                "hook got {} feature maps for {} batch items",
                features.len(),
                self.items.len()
            )));
        }
        if let [BatchItem::Canvas { pair, orientation }] = self.items[..] {
            if let Some(m) = self.maps.get(&pair) {
                features[0] = fuse_pair(&features[0], orientation, m, self.schedule.write_back)?;
            }
            return Ok(());
        }

        let mut copies: BTreeMap<ImageId, Vec<FeatureMap>> = BTreeMap::new();
        for (item, f) in self.items.iter().zip(features.iter()) {
            match *item {
                BatchItem::Canvas { pair, orientation } => {
                    let (a, b) = f.split(orientation)?;
                    copies.entry(pair.0).or_default().push(a);
                    copies.entry(pair.1).or_default().push(b);
                }
                BatchItem::Single { node } => copies.entry(node).or_default().push(f.clone()),
            }
        }
        let mut aggregated = BTreeMap::new();
        for (id, cs) in &copies {
            let refs: Vec<&FeatureMap> = cs.iter().collect();
            aggregated.insert(*id, aggregate_incident(&refs)?);
        }
        let fused = fuse_graph(&aggregated, self.maps)?;
        for (item, f) in self.items.iter().zip(features.iter_mut()) {
            *f = match *item {
                BatchItem::Canvas { pair, orientation } => FeatureMap::concat(&fused[&pair.0], &fused[&pair.1], orientation)?,
                BatchItem::Single { node } => fused[&node].clone(),
            };
        }
        Ok(())
    }
}

impl FeatureHook for MultiviewFusion<'_> {
    fn intercept(&mut self, ctx: &HookContext<'_>, features: &mut [FeatureMap]) -> Result<()> {
        if !schedule_active(self.schedule, ctx.timestep, ctx.block) {
            return Ok(());
        }
        self.active_calls += 1;
        self.apply(features)
    }
}
