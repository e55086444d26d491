#![allow(dead_code)]

use image::{Rgb, RgbImage};
use setfuse::backend::{extract_controls, LuminanceDepth, MockBackend, MockConfig, SobelEdges};
use setfuse::correspondence::{CorrespondenceMap, PairMaps, PixelMatch};
use setfuse::geometry::{Coord, Grid};
use setfuse::pipeline::{RunConfig, SetInputs};
use setfuse::prompts::PromptBundle;

/// A disc on a gradient background, shifted per image.
pub fn disc_image(size: u32, shift: i32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let (cx, cy) = (size as i32 / 2 + shift, size as i32 / 2);
        let (dx, dy) = (x as i32 - cx, y as i32 - cy);
        if dx * dx + dy * dy < (size as i32 / 4).pow(2) {
            Rgb([220, 60, 40])
        } else {
            Rgb([(x * 255 / size) as u8, 90, (y * 255 / size) as u8])
        }
    })
}

/// Matches of the shifted disc at latent resolution, for every ordered pair.
pub fn shift_maps(shifts: &[i32], grid: Grid, cell: i32) -> PairMaps {
    let mut maps = PairMaps::new();
    for (i, &si) in shifts.iter().enumerate() {
        for (j, &sj) in shifts.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = (sj - si) / cell;
            let matches = grid.iter().filter_map(|c| {
                let col = c.col as i32 + d;
                (col >= 0 && col < grid.cols as i32 && (c.row + c.col) % 2 == 0).then(|| PixelMatch {
                    src: c,
                    dst: Coord::new(c.row, col as u32),
                    confidence: 0.9,
                })
            });
            maps.insert((i, j), CorrespondenceMap::from_matches((i, j), grid, matches).unwrap());
        }
    }
    maps
}

pub fn small_config() -> RunConfig {
    RunConfig { width: 32, height: 32, seed: 7, ..RunConfig::default() }
}

pub fn mock() -> MockBackend {
    MockBackend::new(MockConfig::default()).unwrap()
}

pub fn inputs(n: usize, size: u32) -> SetInputs {
    let shifts: Vec<i32> = (0..n as i32).map(|k| (k % 3) * 8 - 8).collect();
    let images: Vec<RgbImage> = shifts.iter().map(|&s| disc_image(size, s)).collect();
    let controls = extract_controls(&images, &LuminanceDepth, &SobelEdges, (0.5, 0.5), None).unwrap();
    let grid = Grid::new(size / 8, size / 8);
    let mut prompts = PromptBundle::fallback("a red ball", "watercolor", n);
    prompts.p_nonshared = (0..n).map(|i| format!("a watercolor scene, view {i}")).collect();
    prompts.p_source = Some((0..n).map(|i| format!("a photo, view {i}")).collect());
    SetInputs { images, controls, maps: shift_maps(&shifts, grid, 8), prompts, matcher: "synthetic".into() }
}
