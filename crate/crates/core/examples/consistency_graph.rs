//! Build a degree-capped graph over nine images, form edge canvases from
//! node latents and consolidate them back.

use ndarray::Array3;
use setfuse::geometry::Orientation;
use setfuse::graph::{build_graph, consolidate_edges, make_edge_latent, NodeLatent};

pub fn run_example() -> setfuse::Result<()> {
    let graph = build_graph(9, 4, 17)?.with_orientation(Orientation::Horizontal);
    println!("{} edges, connected: {}", graph.edges.len(), graph.is_connected());
    for i in 0..graph.n {
        println!("  node {i}: degree {}", graph.degree(i));
    }

    let nodes: Vec<NodeLatent> = (0..graph.n)
        .map(|id| NodeLatent { id, z: Array3::from_elem((4, 2, 2), id as f64), timestep: 25 })
        .collect();
    let canvases = graph
        .edges
        .iter()
        .map(|&(i, j)| make_edge_latent(&nodes[i], &nodes[j], graph.orientation))
        .collect::<setfuse::Result<Vec<_>>>()?;
    println!("canvas shape {:?}", canvases[0].z().dim());

    let merged = consolidate_edges(&graph, &canvases)?;
    for (id, n) in &merged {
        assert_eq!(n.z, nodes[*id].z);
    }
    println!("consolidation returns every untouched node unchanged");
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
