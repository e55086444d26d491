//! Dense matches between two views of the same object, filtered to mutual
//! matches and brought down to a feature grid.

use image::{Rgb, RgbImage};
use setfuse::correspondence::{compute_matches, rescale_map, symmetrize_map, PatchNccMatcher};
use setfuse::geometry::Grid;

fn view(shift: i32) -> RgbImage {
    RgbImage::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as i32 - 32 - shift, y as i32 - 30);
        if dx * dx + dy * dy < 144 {
            Rgb([230, (x * 3) as u8, 40])
        } else {
            Rgb([(x * 4) as u8, 80, (y * 4) as u8])
        }
    })
}

pub fn run_example() -> setfuse::Result<()> {
    let (a, b) = (view(-6), view(6));
    let matcher = PatchNccMatcher::default();
    let fwd = compute_matches(&a, &b, (0, 1), &matcher, 0.05)?;
    let bwd = compute_matches(&b, &a, (1, 0), &matcher, 0.05)?;
    println!("raw matches: 0->1 {}, 1->0 {}", fwd.map.len(), bwd.map.len());

    let (m01, m10) = symmetrize_map(&fwd.map, &bwd.map)?;
    println!("mutual matches: {}", m01.len());
    assert_eq!(m01.len(), m10.len());

    let coarse = rescale_map(&m01, Grid::new(8, 8))?;
    println!("at 8x8: {} matches", coarse.len());
    for m in coarse.iter().take(5) {
        println!("  {:?} -> {:?} ({:.2})", m.src, m.dst, m.confidence);
    }
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
