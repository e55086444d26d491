use std::path::Path;

use image::RgbImage;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::ControlCondition;
use crate::cache::{read_control, write_control, ControlRecord};
use crate::error::{Error, Result};
use crate::geometry::ImageId;

/// Depth and edge maps for one source image, at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub depth: Array2<f32>,
    pub edge: Array2<f32>,
    pub depth_weight: f64,
    pub edge_weight: f64,
    pub provenance: String,
}

impl ControlSignal {
    /// Conditioning at a given strength.
    pub fn condition(&self, strength: f64) -> ControlCondition {
        ControlCondition {
            depth: self.depth.mapv(f64::from),
            edge: self.edge.mapv(f64::from),
            depth_weight: self.depth_weight,
            edge_weight: self.edge_weight,
            strength,
        }
    }
}

/// Produces a single-channel map in [0, 1] at image resolution.
pub trait ControlExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, image: &RgbImage) -> Result<Array2<f32>>;
}

fn luminance(image: &RgbImage) -> Array2<f32> {
    let (w, h) = image.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let p = image.get_pixel(x as u32, y as u32);
        (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
    })
}

fn normalize(mut m: Array2<f32>) -> Array2<f32> {
    let lo = m.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo > 1e-6 {
        m.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        m.fill(0.5);
    }
    m
}

/// Blurred luminance as a depth proxy for runs without a depth network.
#[derive(Debug, Clone, Default)]
pub struct LuminanceDepth;

impl ControlExtractor for LuminanceDepth {
    fn name(&self) -> &str {
        "luminance-depth"
    }

    fn extract(&self, image: &RgbImage) -> Result<Array2<f32>> {
        let blurred = image::imageops::blur(image, 2.0);
        Ok(normalize(luminance(&blurred)))
    }
}

/// Sobel gradient magnitude as an edge map.
#[derive(Debug, Clone, Default)]
pub struct SobelEdges;

impl ControlExtractor for SobelEdges {
    fn name(&self) -> &str {
        "sobel-edges"
    }

    fn extract(&self, image: &RgbImage) -> Result<Array2<f32>> {
        let lum = luminance(image);
        let (h, w) = lum.dim();
        let at = |y: isize, x: isize| lum[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
        let mag = Array2::from_shape_fn((h, w), |(y, x)| {
            let (y, x) = (y as isize, x as isize);
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            (gx * gx + gy * gy).sqrt()
        });
        // flat images have no edges; keep them at zero rather than 0.5
        if mag.iter().all(|&v| v < 1e-6) {
            return Ok(Array2::zeros((h, w)));
        }
        Ok(normalize(mag))
    }
}

fn cache_key(image: &RgbImage, depth: &str, edge: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hasher.update(depth.as_bytes());
    hasher.update([0]);
    hasher.update(edge.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// Depth and edge maps for every image, optionally cached on disk.
///
/// Cache entries are keyed by image content and extractor names, so a
/// second call on the same inputs does not touch the extractors.
pub fn extract_controls(
    images: &[RgbImage],
    depth: &dyn ControlExtractor,
    edge: &dyn ControlExtractor,
    weights: (f64, f64),
    cache_dir: Option<&Path>,
) -> Result<Vec<ControlSignal>> {
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let provenance = format!("{}+{}", depth.name(), edge.name());
    images
        .iter()
        .enumerate()
        .map(|(id, img)| {
            let cached = cache_dir.map(|d| d.join(format!("control_{}.sfc", cache_key(img, depth.name(), edge.name()))));
            if let Some(path) = cached.as_deref().filter(|p| p.exists()) {
                let rec = read_control(path)?;
                return Ok(ControlSignal {
                    depth: rec.depth,
                    edge: rec.edge,
                    depth_weight: weights.0,
                    edge_weight: weights.1,
                    provenance: rec.provenance,
                });
            }
            let (w, h) = img.dimensions();
            let d = depth.extract(img)?;
            let e = edge.extract(img)?;
            let expected = (h as usize, w as usize);
            if d.dim() != expected || e.dim() != expected {
                return Err(Error::Contract(format!(
                    "extractor returned {:?}/{:?} for a {w}x{h} image",
                    d.dim(),
                    e.dim()
                )));
            }
            if let Some(path) = &cached {
                write_control(
                    path,
                    &ControlRecord {
                        image: id as ImageId,
                        provenance: provenance.clone(),
                        depth: d.clone(),
                        edge: e.clone(),
                    },
                )?;
            }
            Ok(ControlSignal {
                depth: d,
                edge: e,
                depth_weight: weights.0,
                edge_weight: weights.1,
                provenance: provenance.clone(),
            })
        })
        .collect()
}

/// Linear control anneal: 1 at `t = total_steps`, 0 at `t = 0`.
pub fn control_strength(t: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    t.min(total_steps) as f64 / total_steps as f64
}
