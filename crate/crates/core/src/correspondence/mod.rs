//! Dense pairwise 2D correspondences between source images.
//!
//! Matches are the only signal used to decide which content is shared
//! across a set. They are computed once at source resolution and then
//! re-expressed at whatever grid a consumer needs (latent, feature).

mod matcher;

use std::collections::BTreeMap;

use image::RgbImage;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Coord, Grid, ImageId};

pub use matcher::{MatcherBackend, PatchNccMatcher};

/// Confidence cut applied to raw matcher output by default.
pub const DEFAULT_CONF_THRESHOLD: f32 = 0.05;

/// One match from a cell of image i to a cell of image j.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMatch {
    pub src: Coord,
    pub dst: Coord,
    pub confidence: f32,
}

/// A partial coordinate mapping `M_ij` between two images of the same grid.
///
/// Keyed by source coordinate, so at most one entry per source exists.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub pair: (ImageId, ImageId),
    pub resolution: Grid,
    entries: BTreeMap<Coord, (Coord, f32)>,
}

impl CorrespondenceMap {
    pub fn empty(pair: (ImageId, ImageId), resolution: Grid) -> Self {
        Self {
            pair,
            resolution,
            entries: BTreeMap::new(),
        }
    }

    /// Build from raw matches, keeping the best match per source coordinate.
    ///
    /// Ties on confidence keep the lexicographically smaller destination.
    pub fn from_matches(
        pair: (ImageId, ImageId),
        resolution: Grid,
        matches: impl IntoIterator<Item = PixelMatch>,
    ) -> Result<Self> {
        let mut map = Self::empty(pair, resolution);
        for m in matches {
            map.insert(m)?;
        }
        Ok(map)
    }

    /// Insert a match, resolving a clash on the same source by max confidence.
    pub fn insert(&mut self, m: PixelMatch) -> Result<()> {
        if !self.resolution.contains(m.src) || !self.resolution.contains(m.dst) {
            return Err(Error::arg(format!(
                "match {:?}->{:?} outside {} grid",
                m.src, m.dst, self.resolution
            )));
        }
        if !(0.0..=1.0).contains(&m.confidence) {
            return Err(Error::arg(format!("confidence {} not in [0,1]", m.confidence)));
        }
        match self.entries.get(&m.src) {
            Some(&(dst, conf)) if conf > m.confidence || (conf == m.confidence && dst <= m.dst) => {}
            _ => {
                self.entries.insert(m.src, (m.dst, m.confidence));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `M_ij(c)` when defined.
    pub fn get(&self, c: Coord) -> Option<Coord> {
        self.entries.get(&c).map(|&(d, _)| d)
    }

    pub fn confidence(&self, c: Coord) -> Option<f32> {
        self.entries.get(&c).map(|&(_, conf)| conf)
    }

    /// Entries in ascending source order.
    pub fn iter(&self) -> impl Iterator<Item = PixelMatch> + '_ {
        self.entries.iter().map(|(&src, &(dst, confidence))| PixelMatch {
            src,
            dst,
            confidence,
        })
    }

    /// The matched source domain `C_i`.
    pub fn domain(&self) -> impl Iterator<Item = Coord> + '_ {
        self.entries.keys().copied()
    }
}

/// Outcome of a matcher call: the filtered map and any warnings raised.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub map: CorrespondenceMap,
    pub warnings: Vec<String>,
}

/// Run a matcher on an image pair and keep matches above `conf_threshold`.
pub fn compute_matches(
    img_i: &RgbImage,
    img_j: &RgbImage,
    pair: (ImageId, ImageId),
    backend: &dyn MatcherBackend,
    conf_threshold: f32,
) -> Result<MatchResult> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::arg(format!("confidence threshold {conf_threshold} not in [0,1]")));
    }
    if img_i.dimensions() != img_j.dimensions() {
        return Err(Error::arg(format!(
            "image sizes differ: {:?} vs {:?}",
            img_i.dimensions(),
            img_j.dimensions()
        )));
    }
    let (w, h) = img_i.dimensions();
    let raw = backend.raw_matches(img_i, img_j)?;
    let map = CorrespondenceMap::from_matches(
        pair,
        Grid::new(h, w),
        raw.into_iter().filter(|m| m.confidence > conf_threshold),
    )?;
    let mut warnings = Vec::new();
    if map.is_empty() {
        warnings.push(format!(
            "no matches above confidence {conf_threshold} for pair {pair:?}"
        ));
    }
    Ok(MatchResult { map, warnings })
}

fn rescale_axis(c: u32, from: u32, to: u32) -> u32 {
    // Cell-centre mapping: the target cell containing the source cell's centre.
    let scaled = ((2 * c as u64 + 1) * to as u64) / (2 * from as u64);
    (scaled as u32).min(to - 1)
}

/// Re-express a map on another grid.
///
/// Collisions on a target source cell keep the highest confidence entry,
/// then the lexicographically first original source.
pub fn rescale_map(map: &CorrespondenceMap, target: Grid) -> Result<CorrespondenceMap> {
    if target.rows == 0 || target.cols == 0 {
        return Err(Error::arg("target resolution must be at least 1x1"));
    }
    if target == map.resolution {
        return Ok(map.clone());
    }
    let from = map.resolution;
    let scale = |c: Coord| {
        Coord::new(
            rescale_axis(c.row, from.rows, target.rows),
            rescale_axis(c.col, from.cols, target.cols),
        )
    };
    let mut entries: BTreeMap<Coord, (Coord, f32)> = BTreeMap::new();
    // Ascending source order, so a strict `>` keeps the first source on ties.
    for m in map.iter() {
        let src = scale(m.src);
        let dst = scale(m.dst);
        match entries.get(&src) {
            Some(&(_, conf)) if conf >= m.confidence => {}
            _ => {
                entries.insert(src, (dst, m.confidence));
            }
        }
    }
    Ok(CorrespondenceMap {
        pair: map.pair,
        resolution: target,
        entries,
    })
}

/// Keep `round(fraction * len)` entries chosen uniformly without replacement.
pub fn subsample_matches(map: &CorrespondenceMap, fraction: f64, seed: u64) -> Result<CorrespondenceMap> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("match fraction {fraction} not in (0, 1]")));
    }
    let n = map.len();
    let keep = (fraction * n as f64).round() as usize;
    if keep == n {
        return Ok(map.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<PixelMatch> = map.iter().collect();
    let picked = index::sample(&mut rng, n, keep);
    let mut out = CorrespondenceMap::empty(map.pair, map.resolution);
    for i in picked.iter() {
        let m = all[i];
        out.entries.insert(m.src, (m.dst, m.confidence));
    }
    Ok(out)
}

/// Restrict a pair of opposite maps to their mutually consistent entries.
///
/// `c -> c'` survives iff `map_ji` sends `c'` back to `c`; the outputs are
/// exact inverses of each other.
pub fn symmetrize_map(
    map_ij: &CorrespondenceMap,
    map_ji: &CorrespondenceMap,
) -> Result<(CorrespondenceMap, CorrespondenceMap)> {
    if map_ij.resolution != map_ji.resolution {
        return Err(Error::arg(format!(
            "resolution mismatch: {} vs {}",
            map_ij.resolution, map_ji.resolution
        )));
    }
    if map_ij.pair != (map_ji.pair.1, map_ji.pair.0) {
        return Err(Error::arg(format!(
            "maps {:?} and {:?} are not opposite directions of one pair",
            map_ij.pair, map_ji.pair
        )));
    }
    let mut fwd = CorrespondenceMap::empty(map_ij.pair, map_ij.resolution);
    let mut bwd = CorrespondenceMap::empty(map_ji.pair, map_ji.resolution);
    for m in map_ij.iter() {
        if map_ji.get(m.dst) == Some(m.src) {
            fwd.entries.insert(m.src, (m.dst, m.confidence));
            let back = map_ji.confidence(m.dst).unwrap_or(m.confidence);
            bwd.entries.insert(m.dst, (m.src, back));
        }
    }
    Ok((fwd, bwd))
}

/// All ordered-pair maps of a set, keyed by `(i, j)`.
pub type PairMaps = BTreeMap<(ImageId, ImageId), CorrespondenceMap>;

/// Rescale every map in a collection to `target`.
pub fn rescale_all(maps: &PairMaps, target: Grid) -> Result<PairMaps> {
    maps.iter()
        .map(|(&k, m)| Ok((k, rescale_map(m, target)?)))
        .collect()
}

/// Symmetrize every opposite-direction pair present in `maps`.
///
/// A direction whose reverse is missing is dropped.
pub fn symmetrize_all(maps: &PairMaps) -> Result<PairMaps> {
    let mut out = PairMaps::new();
    for (&(i, j), m) in maps {
        if i >= j {
            continue;
        }
        if let Some(rev) = maps.get(&(j, i)) {
            let (a, b) = symmetrize_map(m, rev)?;
            out.insert((i, j), a);
            out.insert((j, i), b);
        }
    }
    Ok(out)
}

/// Subsample every map with a per-pair seed derived from `seed`.
pub fn subsample_all(maps: &PairMaps, fraction: f64, seed: u64) -> Result<PairMaps> {
    maps.iter()
        .map(|(&(i, j), m)| {
            let pair_seed = seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Ok(((i, j), subsample_matches(m, fraction, pair_seed)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(sr: u32, sc: u32, dr: u32, dc: u32, conf: f32) -> PixelMatch {
        PixelMatch {
            src: Coord::new(sr, sc),
            dst: Coord::new(dr, dc),
            confidence: conf,
        }
    }

    #[test]
    fn insert_keeps_best_match_per_source() {
        let mut m = CorrespondenceMap::empty((0, 1), Grid::new(4, 4));
        m.insert(pm(1, 1, 2, 2, 0.3)).unwrap();
        m.insert(pm(1, 1, 3, 3, 0.9)).unwrap();
        m.insert(pm(1, 1, 0, 0, 0.9)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(Coord::new(1, 1)), Some(Coord::new(0, 0)));
    }

    #[test]
    fn out_of_bounds_match_rejected() {
        let mut m = CorrespondenceMap::empty((0, 1), Grid::new(4, 4));
        assert!(m.insert(pm(4, 0, 0, 0, 0.5)).is_err());
        assert!(m.insert(pm(0, 0, 0, 0, 1.5)).is_err());
    }

    #[test]
    fn rescale_exact_halving() {
        let m = CorrespondenceMap::from_matches((0, 1), Grid::new(512, 512), [pm(256, 256, 100, 300, 0.8)]).unwrap();
        let r = rescale_map(&m, Grid::new(32, 32)).unwrap();
        assert_eq!(r.resolution, Grid::new(32, 32));
        assert_eq!(r.get(Coord::new(16, 16)), Some(Coord::new(6, 18)));
    }

    #[test]
    fn rescale_collision_keeps_max_confidence() {
        // (0,0) and (0,1) on 4x4 both land in cell (0,0) of a 2x2 grid.
        let m = CorrespondenceMap::from_matches(
            (0, 1),
            Grid::new(4, 4),
            [pm(0, 0, 3, 3, 0.4), pm(0, 1, 0, 2, 0.7)],
        )
        .unwrap();
        let r = rescale_map(&m, Grid::new(2, 2)).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.get(Coord::new(0, 0)), Some(Coord::new(0, 1)));
        assert_eq!(r.confidence(Coord::new(0, 0)), Some(0.7));

        // Equal confidence: the lexicographically first source wins.
        let tie = CorrespondenceMap::from_matches(
            (0, 1),
            Grid::new(4, 4),
            [pm(0, 0, 3, 3, 0.5), pm(0, 1, 0, 2, 0.5)],
        )
        .unwrap();
        let r = rescale_map(&tie, Grid::new(2, 2)).unwrap();
        assert_eq!(r.get(Coord::new(0, 0)), Some(Coord::new(1, 1)));
    }

    #[test]
    fn rescale_to_own_resolution_is_identity() {
        let m = CorrespondenceMap::from_matches((0, 1), Grid::new(5, 7), [pm(4, 6, 1, 2, 0.2), pm(0, 0, 4, 6, 1.0)]).unwrap();
        assert_eq!(rescale_map(&m, Grid::new(5, 7)).unwrap(), m);
        assert!(rescale_map(&m, Grid::new(0, 3)).is_err());
    }

    #[test]
    fn subsample_cardinality_and_subset() {
        let grid = Grid::new(10, 10);
        let m = CorrespondenceMap::from_matches((0, 1), grid, grid.iter().map(|c| PixelMatch { src: c, dst: c, confidence: 0.5 })).unwrap();
        assert_eq!(subsample_matches(&m, 1.0, 3).unwrap(), m);
        let half = subsample_matches(&m, 0.5, 3).unwrap();
        assert_eq!(half.len(), 50);
        for e in half.iter() {
            assert_eq!(m.get(e.src), Some(e.dst));
        }
        assert_eq!(half, subsample_matches(&m, 0.5, 3).unwrap());
        assert!(subsample_matches(&m, 0.0, 3).is_err());
        assert!(subsample_matches(&m, -0.1, 3).is_err());
    }

    #[test]
    fn symmetrize_cases() {
        let g = Grid::new(4, 4);
        let ij = CorrespondenceMap::from_matches((0, 1), g, [pm(0, 0, 1, 1, 0.5), pm(2, 2, 3, 3, 0.6), pm(3, 0, 0, 3, 0.7)]).unwrap();
        let exact_inv = CorrespondenceMap::from_matches((1, 0), g, ij.iter().map(|m| pm(m.dst.row, m.dst.col, m.src.row, m.src.col, m.confidence))).unwrap();
        let (a, b) = symmetrize_map(&ij, &exact_inv).unwrap();
        assert_eq!(a, ij);
        assert_eq!(b, exact_inv);

        let (a, b) = symmetrize_map(&ij, &CorrespondenceMap::empty((1, 0), g)).unwrap();
        assert!(a.is_empty() && b.is_empty());

        // Only (0,0)<->(1,1) and (2,2)<->(3,3) round-trip; (0,3) maps elsewhere.
        let ji = CorrespondenceMap::from_matches((1, 0), g, [pm(1, 1, 0, 0, 0.5), pm(3, 3, 2, 2, 0.6), pm(0, 3, 1, 0, 0.7)]).unwrap();
        let (a, b) = symmetrize_map(&ij, &ji).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        assert_eq!(a.get(Coord::new(3, 0)), None);

        let other = CorrespondenceMap::empty((1, 0), Grid::new(8, 8));
        assert!(symmetrize_map(&ij, &other).is_err());
    }

    fn arb_map_on(grid: Grid) -> impl Strategy<Value = CorrespondenceMap> {
        let (r, c) = (grid.rows, grid.cols);
        prop::collection::vec((0..r, 0..c, 0..r, 0..c, 0.0f32..=1.0), 0..40).prop_map(move |raw| {
            CorrespondenceMap::from_matches(
                (0, 1),
                grid,
                raw.into_iter().map(|(a, b, x, y, conf)| pm(a, b, x, y, conf)),
            )
            .unwrap()
        })
    }

    fn arb_map(max_side: u32) -> impl Strategy<Value = CorrespondenceMap> {
        (1..=max_side, 1..=max_side).prop_flat_map(|(r, c)| arb_map_on(Grid::new(r, c)))
    }

    fn arb_divisible() -> impl Strategy<Value = (CorrespondenceMap, u32)> {
        (1u32..=4, 1u32..=4, 1u32..=2)
            .prop_flat_map(|(r, c, k)| (arb_map_on(Grid::new(r * k, c * k)), Just(k)))
    }

    proptest! {
        #[test]
        fn rescale_roundtrip_loses_only_collisions((m, k) in arb_divisible()) {
            let big = m.resolution;
            let coarse = Grid::new(big.rows / k, big.cols / k);
            let down = rescale_map(&m, coarse).unwrap();
            let back = rescale_map(&down, big).unwrap();
            // brute-force count of distinct coarse cells hit by the sources
            let mut cells = std::collections::BTreeSet::new();
            for e in m.iter() {
                cells.insert((e.src.row / k, e.src.col / k));
            }
            prop_assert_eq!(down.len(), cells.len());
            prop_assert_eq!(back.len(), cells.len());
        }

        #[test]
        fn symmetrized_maps_round_trip(a in arb_map(6), b in arb_map(6)) {
            let ji = CorrespondenceMap::from_matches((1, 0), a.resolution,
                b.iter().filter(|m| a.resolution.contains(m.src) && a.resolution.contains(m.dst))).unwrap();
            let (f, g) = symmetrize_map(&a, &ji).unwrap();
            prop_assert_eq!(f.len(), g.len());
            for e in f.iter() {
                prop_assert_eq!(g.get(e.dst), Some(e.src));
            }
        }

        #[test]
        fn subsample_is_deterministic(m in arb_map(8), frac in 0.01f64..=1.0, seed: u64) {
            let a = subsample_matches(&m, frac, seed).unwrap();
            let b = subsample_matches(&m, frac, seed).unwrap();
            prop_assert_eq!(a.len(), (frac * m.len() as f64).round() as usize);
            prop_assert_eq!(a, b);
        }
    }
}
