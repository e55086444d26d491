//! Pairwise consistency graph: nodes are per-image latents, edges are
//! two-image canvases denoised jointly.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{latent_axis, Latent};
use crate::geometry::{ImageId, Orientation};

pub const DEFAULT_DEGREE_CAP: usize = 4;

/// Edge `{i, j}` stored with `i < j`. The first image occupies the left
/// (or top) half of the canvas.
pub type Edge = (ImageId, ImageId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyGraph {
    pub n: usize,
    /// Sorted ascending; the index is the edge id.
    pub edges: Vec<Edge>,
    pub degree_cap: usize,
    pub seed: u64,
    pub orientation: Orientation,
}

impl ConsistencyGraph {
    pub fn degree(&self, i: ImageId) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == i || b == i).count()
    }

    /// Ids of the edges touching `i`, ascending.
    pub fn incident(&self, i: ImageId) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, &(a, b))| a == i || b == i)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }
}

/// Build the graph over `n` images with every degree at most `degree_cap`.
///
/// Complete when `n <= degree_cap + 1`. Otherwise a seeded random
/// Hamiltonian cycle is laid down first, so the graph is connected, and the
/// remaining capacity is filled with random extra edges.
pub fn build_graph(n: usize, degree_cap: usize, seed: u64) -> Result<ConsistencyGraph> {
    if n < 2 {
        return Err(Error::arg(format!("a consistency graph needs at least 2 nodes, got {n}")));
    }
    if degree_cap < 1 {
        return Err(Error::arg("degree cap must be at least 1"));
    }
    let mut edges = Vec::new();
    if n <= degree_cap + 1 {
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
    } else {
        if degree_cap < 2 {
            return Err(Error::arg(format!(
                "degree cap {degree_cap} cannot keep {n} nodes connected"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<ImageId> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut degree = vec![0usize; n];
        let mut present = vec![vec![false; n]; n];
        let mut add = |a: ImageId, b: ImageId, edges: &mut Vec<Edge>, degree: &mut Vec<usize>| {
            let (a, b) = (a.min(b), a.max(b));
            present[a][b] = true;
            degree[a] += 1;
            degree[b] += 1;
            edges.push((a, b));
        };
        for k in 0..n {
            add(order[k], order[(k + 1) % n], &mut edges, &mut degree);
        }
        let mut candidates: Vec<Edge> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !edges.contains(&(i, j)))
            .collect();
        candidates.shuffle(&mut rng);
        for (i, j) in candidates {
            if degree[i] < degree_cap && degree[j] < degree_cap {
                add(i, j, &mut edges, &mut degree);
            }
        }
        edges.sort_unstable();
    }
    Ok(ConsistencyGraph {
        n,
        edges,
        degree_cap,
        seed,
        orientation: Orientation::Horizontal,
    })
}

/// A node latent at a given timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLatent {
    pub id: ImageId,
    pub z: Latent,
    pub timestep: usize,
}

/// A two-image canvas latent. The extent along the orientation axis is
/// always even.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLatent {
    pair: Edge,
    z: Latent,
    orientation: Orientation,
    timestep: usize,
}

impl EdgeLatent {
    /// Wrap a canvas latent, rejecting odd extents along the split axis.
    pub fn new(pair: Edge, z: Latent, orientation: Orientation, timestep: usize) -> Result<Self> {
        let len = z.len_of(Axis(latent_axis(orientation)));
        if !len.is_multiple_of(2) || len == 0 {
            return Err(Error::arg(format!("canvas extent {len} cannot be split in two")));
        }
        Ok(Self {
            pair,
            z,
            orientation,
            timestep,
        })
    }

    pub fn pair(&self) -> Edge {
        self.pair
    }

    pub fn z(&self) -> &Latent {
        &self.z
    }

    pub fn into_z(self) -> Latent {
        self.z
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }
}

/// Concatenate two node latents into a canvas latent.
pub fn make_edge_latent(z_i: &NodeLatent, z_j: &NodeLatent, orientation: Orientation) -> Result<EdgeLatent> {
    if z_i.z.dim() != z_j.z.dim() {
        return Err(Error::arg(format!(
            "node latent shapes differ: {:?} vs {:?}",
            z_i.z.dim(),
            z_j.z.dim()
        )));
    }
    if z_i.timestep != z_j.timestep {
        return Err(Error::arg(format!(
            "node latents at different timesteps: {} vs {}",
            z_i.timestep, z_j.timestep
        )));
    }
    let z = ndarray::concatenate(Axis(latent_axis(orientation)), &[z_i.z.view(), z_j.z.view()])
        .map_err(|e| Error::arg(e.to_string()))?;
    EdgeLatent::new((z_i.id, z_j.id), z, orientation, z_i.timestep)
}

/// Split a canvas latent back into its two node latents.
pub fn split_edge_latent(z_ij: &EdgeLatent) -> (NodeLatent, NodeLatent) {
    let axis = Axis(latent_axis(z_ij.orientation));
    let half = z_ij.z.len_of(axis) / 2;
    let (a, b) = z_ij.z.view().split_at(axis, half);
    (
        NodeLatent {
            id: z_ij.pair.0,
            z: a.to_owned(),
            timestep: z_ij.timestep,
        },
        NodeLatent {
            id: z_ij.pair.1,
            z: b.to_owned(),
            timestep: z_ij.timestep,
        },
    )
}

/// Per-node elementwise mean over all versions, summed in the given order.
pub fn consolidate(versions: &BTreeMap<ImageId, Vec<NodeLatent>>) -> Result<BTreeMap<ImageId, NodeLatent>> {
    let mut out = BTreeMap::new();
    for (&id, vs) in versions {
        let first = vs
            .first()
            .ok_or_else(|| Error::Invariant(format!("node {id} has no latent versions")))?;
        let mut acc = first.z.clone();
        for v in &vs[1..] {
            if v.z.dim() != first.z.dim() || v.timestep != first.timestep {
                return Err(Error::Invariant(format!("versions of node {id} disagree in shape or timestep")));
            }
            acc += &v.z;
        }
        if vs.len() > 1 {
            acc /= vs.len() as f64;
        }
        out.insert(
            id,
            NodeLatent {
                id,
                z: acc,
                timestep: first.timestep,
            },
        );
    }
    Ok(out)
}

/// Split every edge canvas and average each node's versions, visiting edges
/// in ascending edge id order.
pub fn consolidate_edges(graph: &ConsistencyGraph, edges: &[EdgeLatent]) -> Result<BTreeMap<ImageId, NodeLatent>> {
    let mut versions: BTreeMap<ImageId, Vec<NodeLatent>> = BTreeMap::new();
    for e in edges {
        let (a, b) = split_edge_latent(e);
        versions.entry(a.id).or_default().push(a);
        versions.entry(b.id).or_default().push(b);
    }
    for i in 0..graph.n {
        if !versions.contains_key(&i) {
            return Err(Error::Invariant(format!("node {i} is not covered by any edge")));
        }
    }
    consolidate(&versions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn node(id: usize, z: Latent) -> NodeLatent {
        NodeLatent { id, z, timestep: 7 }
    }

    #[test]
    fn complete_graphs_for_small_sets() {
        assert_eq!(build_graph(5, 4, 0).unwrap().edges.len(), 10);
        assert_eq!(build_graph(2, 4, 0).unwrap().edges, vec![(0, 1)]);
        assert!(build_graph(1, 4, 0).is_err());
        assert!(build_graph(4, 0, 0).is_err());
        assert!(build_graph(4, 1, 0).is_err());
        assert_eq!(build_graph(2, 1, 0).unwrap().edges.len(), 1);
    }

    #[test]
    fn nine_nodes_cap_four() {
        let g = build_graph(9, 4, 42).unwrap();
        assert!(g.edges.len() <= 18);
        assert!(g.edges.len() >= 9);
        assert!(g.is_connected());
        for i in 0..9 {
            assert!(g.degree(i) <= 4);
        }
        assert_eq!(g, build_graph(9, 4, 42).unwrap());
    }

    proptest! {
        #[test]
        fn graph_invariants(n in 2usize..=15, cap in 2usize..=6, seed: u64) {
            let g = build_graph(n, cap, seed).unwrap();
            prop_assert!(g.is_connected());
            for i in 0..n {
                prop_assert!(g.degree(i) <= cap.min(n - 1));
            }
            prop_assert!(g.edges.len() <= cap * n);
            prop_assert!(g.edges.iter().all(|&(a, b)| a < b));
            if n <= cap + 1 {
                prop_assert_eq!(g.edges.len(), n * (n - 1) / 2);
            }
        }
    }

    #[test]
    fn edge_latent_shapes() {
        let a = node(0, Array3::zeros((4, 8, 8)));
        let b = node(1, Array3::ones((4, 8, 8)));
        let h = make_edge_latent(&a, &b, Orientation::Horizontal).unwrap();
        assert_eq!(h.z().dim(), (4, 8, 16));
        let v = make_edge_latent(&a, &b, Orientation::Vertical).unwrap();
        assert_eq!(v.z().dim(), (4, 16, 8));
        let (x, y) = split_edge_latent(&h);
        assert_eq!(x, a);
        assert_eq!(y, b);
        assert!(x.z.iter().all(|&v| v == 0.0) && y.z.iter().all(|&v| v == 1.0));

        let c = node(2, Array3::zeros((4, 8, 6)));
        assert!(make_edge_latent(&a, &c, Orientation::Horizontal).is_err());
        let mut d = b.clone();
        d.timestep = 3;
        assert!(make_edge_latent(&a, &d, Orientation::Horizontal).is_err());
        assert!(EdgeLatent::new((0, 1), Array3::zeros((4, 8, 7)), Orientation::Horizontal, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_inverts_make(vals in prop::collection::vec(-1e3f64..1e3, 2 * 3 * 2 * 4), vertical: bool) {
            let a = node(0, Array3::from_shape_vec((3, 2, 4), vals[..24].to_vec()).unwrap());
            let b = node(1, Array3::from_shape_vec((3, 2, 4), vals[24..].to_vec()).unwrap());
            let o = if vertical { Orientation::Vertical } else { Orientation::Horizontal };
            let (x, y) = split_edge_latent(&make_edge_latent(&a, &b, o).unwrap());
            prop_assert_eq!(x, a);
            prop_assert_eq!(y, b);
        }
    }

    #[test]
    fn consolidate_means() {
        let v = Array3::from_shape_fn((2, 2, 2), |(a, b, c)| (a as f64 - b as f64) * 1.5 + c as f64);
        let one = BTreeMap::from([(0, vec![node(0, v.clone())])]);
        assert_eq!(consolidate(&one).unwrap()[&0].z, v);

        let pair = BTreeMap::from([(0, vec![node(0, v.clone()), node(0, -&v)])]);
        assert!(consolidate(&pair).unwrap()[&0].z.iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vs: Vec<Latent> = (0..3)
            .map(|_| Array3::from_shape_fn((1, 2, 2), |_| StandardNormal.sample(&mut rng)))
            .collect();
        let map = BTreeMap::from([(4, vs.iter().cloned().map(|z| node(4, z)).collect())]);
        let got = consolidate(&map).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for z in &vs {
                    s += z[[0, r, c]];
                }
                assert!((got[&4].z[[0, r, c]] - s / 3.0).abs() < 1e-12);
            }
        }

        let empty = BTreeMap::from([(0, Vec::new())]);
        assert!(matches!(consolidate(&empty), Err(Error::Invariant(_))));
    }

    #[test]
    fn consolidate_edges_requires_full_cover() {
        let g = build_graph(3, 4, 0).unwrap();
        let z = |id| node(id, Array3::zeros((1, 2, 2)));
        let e = make_edge_latent(&z(0), &z(1), Orientation::Horizontal).unwrap();
        assert!(consolidate_edges(&g, &[e]).is_err());
    }
}
