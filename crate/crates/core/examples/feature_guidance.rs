//! Ten guidance steps on random node latents with the mock backend.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setfuse::backend::{MockBackend, MockConfig};
use setfuse::correspondence::{CorrespondenceMap, PairMaps, PixelMatch};
use setfuse::geometry::{Coord, Grid};
use setfuse::graph::{build_graph, NodeLatent};
use setfuse::guidance::{guidance_step, AdamState, Conditioning, GuidanceConfig, GuidanceLayout};

pub fn run_example() -> setfuse::Result<()> {
    let backend = MockBackend::new(MockConfig::default())?;
    let graph = build_graph(4, 4, 3)?;
    let grid = Grid::new(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut maps = PairMaps::new();
    for &(i, j) in &graph.edges {
        let matches = grid.iter().filter(|c| (c.row + c.col) % 3 == 0).map(|c| PixelMatch {
            src: c,
            dst: Coord::new(c.col, c.row),
            confidence: 0.9,
        });
        maps.insert((i, j), CorrespondenceMap::from_matches((i, j), grid, matches)?);
    }
    let mut nodes: BTreeMap<_, _> = (0..4)
        .map(|id| (id, NodeLatent { id, z: Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(-1.0..1.0)), timestep: 20 }))
        .collect();
    let layout = GuidanceLayout::Canvas(
        graph.edges.iter().map(|_| Conditioning { prompt: "a red ball".into(), control: None }).collect(),
    );
    let cfg = GuidanceConfig::default();
    let mut adam = AdamState::default();
    for step in 0..10 {
        let out = guidance_step(&nodes, &graph, &maps, &backend, &cfg, &layout, &mut adam, 20)?;
        println!("step {step}: loss {:.5} (lr {:.4})", out.losses[0], out.lr);
        nodes = out.nodes;
    }
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
