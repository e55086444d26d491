//! Pairwise and graph-wide feature fusion on tiny hand-made feature maps,
//! and the default fusion schedule.

use ndarray::Array3;
use setfuse::backend::BlockCatalog;
use setfuse::correspondence::{CorrespondenceMap, PairMaps, PixelMatch};
use setfuse::feature::FeatureMap;
use setfuse::fusion::{fuse_graph, fuse_pair, schedule_active, FusionSchedule, WriteBack};
use setfuse::geometry::{Coord, Grid, Orientation};

fn constant(v: f64) -> FeatureMap {
    FeatureMap::new(Array3::from_elem((2, 2, 3), v))
}

fn one_match(pair: (usize, usize), src: (u32, u32), dst: (u32, u32)) -> setfuse::Result<CorrespondenceMap> {
    let m = PixelMatch { src: Coord::new(src.0, src.1), dst: Coord::new(dst.0, dst.1), confidence: 1.0 };
    CorrespondenceMap::from_matches(pair, Grid::new(2, 2), [m])
}

pub fn run_example() -> setfuse::Result<()> {
    let canvas = FeatureMap::concat(&constant(0.0), &constant(4.0), Orientation::Horizontal)?;
    let fused = fuse_pair(&canvas, Orientation::Horizontal, &one_match((0, 1), (0, 0), (1, 1))?, WriteBack::Symmetric)?;
    let (a, b) = fused.split(Orientation::Horizontal)?;
    println!("pair: f0[0,0] = {}, f1[1,1] = {}", a.at(Coord::new(0, 0))[0], b.at(Coord::new(1, 1))[0]);

    let feats = [(0, constant(0.0)), (1, constant(3.0)), (2, constant(6.0))].into();
    let maps: PairMaps = [
        ((0, 1), one_match((0, 1), (0, 0), (0, 0))?),
        ((0, 2), one_match((0, 2), (0, 0), (0, 0))?),
    ]
    .into();
    let out = fuse_graph(&feats, &maps)?;
    println!("graph: f0[0,0] = {} (mean of 0, 3, 6)", out[&0].at(Coord::new(0, 0))[0]);

    let schedule = FusionSchedule::default();
    let catalog = BlockCatalog::new(2, 4);
    for t in [25, 16, 15, 4, 3] {
        let active: Vec<usize> = catalog.blocks().iter().filter(|b| schedule_active(&schedule, t, b)).map(|b| b.id).collect();
        println!("t={t:>2}: fused blocks {active:?}");
    }
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
