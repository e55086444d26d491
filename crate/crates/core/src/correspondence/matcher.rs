use image::{imageops, RgbImage};

use super::PixelMatch;
use crate::error::{Error, Result};
use crate::geometry::{Coord, Grid};

/// A dense matcher producing raw matches in pixel space of the first image.
///
/// Implementations must be deterministic: the same image pair always
/// yields the same raw matches.
pub trait MatcherBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Grid the matcher internally works at.
    fn native_resolution(&self) -> Grid;

    /// Raw, unfiltered matches. May contain several candidates per source.
    fn raw_matches(&self, img_i: &RgbImage, img_j: &RgbImage) -> Result<Vec<PixelMatch>>;
}

/// Windowed normalized cross-correlation block matcher.
///
/// Works on a downsampled grayscale copy of both images. It is a small,
/// dependency-free stand-in for learned dense matchers; confidences are the
/// clipped NCC score. Flat patches produce no match.
#[derive(Debug, Clone)]
pub struct PatchNccMatcher {
    pub working: Grid,
    pub patch_radius: i32,
    pub search_radius: i32,
}

impl Default for PatchNccMatcher {
    fn default() -> Self {
        Self {
            working: Grid::new(48, 48),
            patch_radius: 2,
            search_radius: 8,
        }
    }
}

struct Gray {
    rows: i32,
    cols: i32,
    px: Vec<f64>,
}

impl Gray {
    fn from_image(img: &RgbImage, grid: Grid) -> Self {
        let small = imageops::resize(img, grid.cols, grid.rows, imageops::FilterType::Triangle);
        let px = small
            .pixels()
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        Self {
            rows: grid.rows as i32,
            cols: grid.cols as i32,
            px,
        }
    }

    fn at(&self, r: i32, c: i32) -> f64 {
        let r = r.clamp(0, self.rows - 1);
        let c = c.clamp(0, self.cols - 1);
        self.px[(r * self.cols + c) as usize]
    }

    /// Zero-mean, unit-norm patch; `None` when the patch is flat.
    fn patch(&self, r: i32, c: i32, radius: i32) -> Option<Vec<f64>> {
        let mut v = Vec::with_capacity(((2 * radius + 1) * (2 * radius + 1)) as usize);
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                v.push(self.at(r + dr, c + dc));
            }
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Some(v)
    }
}

impl PatchNccMatcher {
    /// Search offsets ordered by distance then row-major, zero first.
    fn offsets(&self) -> Vec<(i32, i32)> {
        let r = self.search_radius;
        let mut offs: Vec<(i32, i32)> = (-r..=r).flat_map(|dr| (-r..=r).map(move |dc| (dr, dc))).collect();
        offs.sort_by_key(|&(dr, dc)| (dr * dr + dc * dc, dr, dc));
        offs
    }
}

impl MatcherBackend for PatchNccMatcher {
    fn name(&self) -> &str {
        "patch-ncc"
    }

    fn native_resolution(&self) -> Grid {
        self.working
    }

    fn raw_matches(&self, img_i: &RgbImage, img_j: &RgbImage) -> Result<Vec<PixelMatch>> {
        if self.working.rows == 0 || self.working.cols == 0 {
            return Err(Error::arg("matcher working grid must be non-empty"));
        }
        let (w, h) = img_i.dimensions();
        let gi = Gray::from_image(img_i, self.working);
        let gj = Gray::from_image(img_j, self.working);
        let pr = self.patch_radius;
        let patches_j: Vec<Option<Vec<f64>>> = (0..gj.rows)
            .flat_map(|r| (0..gj.cols).map(move |c| (r, c)))
            .map(|(r, c)| gj.patch(r, c, pr))
            .collect();
        let offsets = self.offsets();
        let to_pixel = |cell: i32, cells: i32, pixels: u32| -> u32 {
            (((2 * cell + 1) as u64 * pixels as u64) / (2 * cells as u64)) as u32
        };

        let mut out = Vec::new();
        for r in 0..gi.rows {
            for c in 0..gi.cols {
                let Some(pi) = gi.patch(r, c, pr) else { continue };
                let mut best: Option<(f64, i32, i32)> = None;
                for &(dr, dc) in &offsets {
                    let (rj, cj) = (r + dr, c + dc);
                    if rj < 0 || cj < 0 || rj >= gj.rows || cj >= gj.cols {
                        continue;
                    }
                    let Some(pj) = &patches_j[(rj * gj.cols + cj) as usize] else { continue };
                    let ncc: f64 = pi.iter().zip(pj).map(|(a, b)| a * b).sum();
                    if best.is_none_or(|(s, _, _)| ncc > s) {
                        best = Some((ncc, rj, cj));
                    }
                }
                if let Some((score, rj, cj)) = best {
                    let src = Coord::new(to_pixel(r, gi.rows, h), to_pixel(c, gi.cols, w));
                    let dst = Coord::new(to_pixel(rj, gj.rows, h), to_pixel(cj, gj.cols, w));
                    out.push(PixelMatch {
                        src,
                        dst,
                        confidence: score.clamp(0.0, 1.0) as f32,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::compute_matches;
    use image::Rgb;

    fn textured(w: u32, h: u32, seed: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 7 + y * 13 + seed) ^ (x * y + seed * 31)) % 251;
            Rgb([v as u8, (v * 3 % 251) as u8, (255 - v) as u8])
        })
    }

    #[test]
    fn identical_images_match_identically() {
        let img = textured(96, 96, 5);
        let res = compute_matches(&img, &img, (0, 1), &PatchNccMatcher::default(), 0.05).unwrap();
        assert!(!res.map.is_empty());
        assert!(res.warnings.is_empty());
        for m in res.map.iter() {
            assert_eq!(m.src, m.dst);
            assert!(m.confidence > 0.05);
        }
    }

    #[test]
    fn disjoint_scenes_at_high_threshold_give_empty_map() {
        let gradient = RgbImage::from_fn(96, 96, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 128]));
        let noise = textured(96, 96, 17);
        let res = compute_matches(&gradient, &noise, (0, 1), &PatchNccMatcher::default(), 0.99).unwrap();
        assert!(res.map.is_empty());
        assert_eq!(res.warnings.len(), 1);
    }

    #[test]
    fn matcher_is_deterministic() {
        let a = textured(64, 64, 1);
        let b = textured(64, 64, 2);
        let m = PatchNccMatcher::default();
        assert_eq!(m.raw_matches(&a, &b).unwrap(), m.raw_matches(&a, &b).unwrap());
    }
}
