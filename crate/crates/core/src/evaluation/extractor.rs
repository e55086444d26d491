use image::RgbImage;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::{Coord, Grid};

/// Patch-level image descriptor used by the metrics.
///
/// Kept separate from the pipeline's matcher so that the metric does not
/// reward agreement with the matches used for generation.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, image: &RgbImage) -> Result<FeatureMap>;
}

/// Per-patch colour and gradient statistics on a fixed patch grid.
///
/// Each patch yields mean RGB, RGB standard deviation, and mean absolute
/// horizontal and vertical luminance gradients, centred per image.
#[derive(Debug, Clone)]
pub struct PatchStats {
    pub grid: Grid,
}

impl Default for PatchStats {
    fn default() -> Self {
        Self { grid: Grid::new(16, 16) }
    }
}

impl FeatureExtractor for PatchStats {
    fn name(&self) -> &str {
        "patch-stats"
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureMap> {
        let (w, h) = image.dimensions();
        let (rows, cols) = (self.grid.rows, self.grid.cols);
        if rows == 0 || cols == 0 || w < cols || h < rows {
            return Err(Error::arg(format!("{w}x{h} image cannot be split into a {} patch grid", self.grid)));
        }
        let lum = |x: u32, y: u32| {
            let p = image.get_pixel(x.min(w - 1), y.min(h - 1));
            (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
        };
        let mut data = Array3::zeros((rows as usize, cols as usize, 8));
        for r in 0..rows {
            for c in 0..cols {
                let (y0, y1) = (r * h / rows, (r + 1) * h / rows);
                let (x0, x1) = (c * w / cols, (c + 1) * w / cols);
                let mut sum = [0.0; 3];
                let mut sq = [0.0; 3];
                let (mut gx, mut gy) = (0.0, 0.0);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x, y);
                        for k in 0..3 {
                            let v = p[k] as f64 / 255.0;
                            sum[k] += v;
                            sq[k] += v * v;
                        }
                        gx += (lum(x + 1, y) - lum(x, y)).abs();
                        gy += (lum(x, y + 1) - lum(x, y)).abs();
                    }
                }
                let cell = [r as usize, c as usize];
                for k in 0..3 {
                    let mean = sum[k] / count;
                    data[[cell[0], cell[1], k]] = mean;
                    data[[cell[0], cell[1], 3 + k]] = (sq[k] / count - mean * mean).max(0.0).sqrt();
                }
                data[[cell[0], cell[1], 6]] = gx / count;
                data[[cell[0], cell[1], 7]] = gy / count;
            }
        }
        for k in 0..8 {
            let mut lane = data.index_axis_mut(ndarray::Axis(2), k);
            let mean = lane.mean().unwrap_or(0.0);
            lane -= mean;
        }
        Ok(FeatureMap::new(data))
    }
}

/// Foreground cells of a feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    cells: Array2<bool>,
}

impl ForegroundMask {
    pub fn new(cells: Array2<bool>) -> Self {
        Self { cells }
    }

    pub fn full(grid: Grid) -> Self {
        Self { cells: Array2::from_elem((grid.rows as usize, grid.cols as usize), true) }
    }

    pub fn grid(&self) -> Grid {
        let (r, c) = self.cells.dim();
        Grid::new(r as u32, c as u32)
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.cells.get((c.row as usize, c.col as usize)).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Cells whose mean mask luminance is at least half scale.
    pub fn from_mask_image(mask: &image::GrayImage, grid: Grid) -> Result<Self> {
        let (w, h) = mask.dimensions();
        if grid.rows == 0 || grid.cols == 0 || w < grid.cols || h < grid.rows {
            return Err(Error::arg(format!("mask of {w}x{h} cannot cover a {grid} grid")));
        }
        let cells = Array2::from_shape_fn((grid.rows as usize, grid.cols as usize), |(r, c)| {
            let (y0, y1) = (r as u32 * h / grid.rows, (r as u32 + 1) * h / grid.rows);
            let (x0, x1) = (c as u32 * w / grid.cols, (c as u32 + 1) * w / grid.cols);
            let mut sum = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += mask.get_pixel(x, y)[0] as u64;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as u64;
            sum * 2 >= n * 255
        });
        Ok(Self { cells })
    }
}

/// Background removal for source images, at a requested grid.
pub trait ForegroundMasker: Send + Sync {
    fn name(&self) -> &str;
    fn mask(&self, image: &RgbImage, grid: Grid) -> Result<ForegroundMask>;
}
