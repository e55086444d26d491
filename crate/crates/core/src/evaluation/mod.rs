//! Consistency and adherence metrics for generated sets.

mod adherence;
mod analysis;
mod benchmark;
mod extractor;
mod twoafc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{cosine, FeatureMap};
use crate::geometry::{Coord, ImageId};

pub use adherence::{clip_adherence, ClipScorer, HttpClipScorer};
pub use analysis::{analyze_features, matched_feature_similarity, similarity_table_tsv, SimilarityRow};
pub use benchmark::{load_benchmark, BenchmarkIndex, BenchmarkSet, Category, EditSpec, MAX_SET_SIZE, MIN_SET_SIZE};
pub use extractor::{FeatureExtractor, ForegroundMask, ForegroundMasker, PatchStats};
pub use twoafc::{compose_comparison, vlm_2afc, TwoAfcRecord, Verdict, TWO_AFC_QUESTION, TWO_AFC_SYSTEM_PROMPT};

/// Temperature of the score transform.
pub const MATCHSIM_TAU: f64 = 0.6;

/// Patch-level nearest neighbours from image `i` to image `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnCorrespondence {
    pub pair: (ImageId, ImageId),
    pub entries: Vec<(Coord, Coord)>,
    pub extractor: String,
}

/// For every foreground patch of `feat_i`, the most cosine-similar
/// foreground patch of `feat_j`. Ties keep the first patch in row-major
/// order.
pub fn nn_correspondences(
    feat_i: &FeatureMap,
    feat_j: &FeatureMap,
    mask_i: Option<&ForegroundMask>,
    mask_j: Option<&ForegroundMask>,
    pair: (ImageId, ImageId),
    extractor: &str,
) -> Result<(NnCorrespondence, Vec<String>)> {
    if feat_i.dim() != feat_j.dim() {
        return Err(Error::arg(format!("feature dims differ: {} vs {}", feat_i.dim(), feat_j.dim())));
    }
    for (m, f) in [(mask_i, feat_i), (mask_j, feat_j)] {
        if let Some(m) = m {
            if m.grid() != f.grid() {
                return Err(Error::arg(format!("mask grid {} differs from feature grid {}", m.grid(), f.grid())));
            }
        }
    }
    let fg = |m: Option<&ForegroundMask>, c: Coord| m.is_none_or(|m| m.contains(c));
    let candidates: Vec<Coord> = feat_j.grid().iter().filter(|&c| fg(mask_j, c)).collect();
    let mut entries = Vec::new();
    if !candidates.is_empty() {
        for p in feat_i.grid().iter().filter(|&c| fg(mask_i, c)) {
            let a = feat_i.at(p);
            let mut best = (f64::NEG_INFINITY, candidates[0]);
            for &q in &candidates {
                let s = cosine(a, feat_j.at(q));
                if s > best.0 {
                    best = (s, q);
                }
            }
            entries.push((p, best.1));
        }
    }
    let mut warnings = Vec::new();
    if entries.is_empty() {
        warnings.push(format!("pair {pair:?} has no foreground patches"));
    }
    Ok((NnCorrespondence { pair, entries, extractor: extractor.to_string() }, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub pair: (ImageId, ImageId),
    pub similarity: f64,
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub pairs: Vec<PairSimilarity>,
    pub mean_similarity: f64,
    pub score: f64,
    pub tau: f64,
    pub pair_count: usize,
    pub warnings: Vec<String>,
}

/// `exp((s - 1) / tau)`.
pub fn matchsim_transform(mean_similarity: f64, tau: f64) -> f64 {
    ((mean_similarity - 1.0) / tau).exp()
}

/// Consistency of outputs at nearest-neighbour correspondences found on
/// the sources. Every ordered pair is evaluated; pairs without
/// correspondences are left out of the mean.
pub fn dino_matchsim(
    source_feats: &[FeatureMap],
    output_feats: &[FeatureMap],
    masks: Option<&[ForegroundMask]>,
    extractor: &str,
) -> Result<ConsistencyReport> {
    let n = source_feats.len();
    if n < 2 || output_feats.len() != n {
        return Err(Error::arg(format!(
            "need >= 2 aligned feature maps, got {} sources and {} outputs",
            n,
            output_feats.len()
        )));
    }
    for (s, o) in source_feats.iter().zip(output_feats) {
        if s.grid() != o.grid() {
            return Err(Error::arg(format!("output grid {} is not aligned with source grid {}", o.grid(), s.grid())));
        }
    }
    if let Some(m) = masks {
        if m.len() != n {
            return Err(Error::arg(format!("{} masks for {n} images", m.len())));
        }
    }
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (nn, w) = nn_correspondences(
                &source_feats[i],
                &source_feats[j],
                masks.map(|m| &m[i]),
                masks.map(|m| &m[j]),
                (i, j),
                extractor,
            )?;
            warnings.extend(w);
            if nn.entries.is_empty() {
                continue;
            }
            let sum: f64 = nn
                .entries
                .iter()
                .map(|&(p, q)| cosine(output_feats[i].at(p), output_feats[j].at(q)))
                .sum();
            pairs.push(PairSimilarity { pair: (i, j), similarity: sum / nn.entries.len() as f64, matches: nn.entries.len() });
        }
    }
    if pairs.is_empty() {
        return Err(Error::arg("no image pair has foreground correspondences"));
    }
    let mean = pairs.iter().map(|p| p.similarity).sum::<f64>() / pairs.len() as f64;
    Ok(ConsistencyReport {
        pair_count: pairs.len(),
        pairs,
        mean_similarity: mean,
        score: matchsim_transform(mean, MATCHSIM_TAU),
        tau: MATCHSIM_TAU,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn brute_force(fi: &FeatureMap, fj: &FeatureMap) -> Vec<(Coord, Coord)> {
        let g = fi.grid();
        let gj = fj.grid();
        let mut out = Vec::new();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let p = Coord::new(r, c);
                let mut best: Option<(f64, Coord)> = None;
                for r2 in 0..gj.rows {
                    for c2 in 0..gj.cols {
                        let q = Coord::new(r2, c2);
                        let mut dot = 0.0;
                        let mut na = 0.0;
                        let mut nb = 0.0;
                        for k in 0..fi.dim() {
                            let (x, y) = (fi.data[[r as usize, c as usize, k]], fj.data[[r2 as usize, c2 as usize, k]]);
                            dot += x * y;
                            na += x * x;
                            nb += y * y;
                        }
                        let s = if na == 0.0 || nb == 0.0 { 0.0 } else { (dot / (na * nb).sqrt()).clamp(-1.0, 1.0) };
                        if best.is_none_or(|(b, _)| s > b) {
                            best = Some((s, q));
                        }
                    }
                }
                out.push((p, best.unwrap().1));
            }
        }
        out
    }

    fn arb_pair() -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
        (1usize..=8, 1usize..=8, 1usize..=4).prop_flat_map(|(r, c, d)| {
            let n = r * c * d;
            (
                proptest::collection::vec(-3i32..=3, n),
                proptest::collection::vec(-3i32..=3, n),
            )
                .prop_map(move |(a, b)| {
                    let f = |v: Vec<i32>| FeatureMap::new(Array3::from_shape_vec((r, c, d), v.into_iter().map(f64::from).collect()).unwrap());
                    (f(a), f(b))
                })
        })
    }

    proptest! {
        #[test]
        fn nn_equals_exhaustive_search((fi, fj) in arb_pair()) {
            let (nn, _) = nn_correspondences(&fi, &fj, None, None, (0, 1), "t").unwrap();
            prop_assert_eq!(nn.entries, brute_force(&fi, &fj));
        }
    }

    #[test]
    fn permutation_is_recovered() {
        let fi = FeatureMap::new(array![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]]);
        let mut fj = fi.clone();
        let perm = [(0, 0, 1, 1), (0, 1, 1, 0), (1, 0, 0, 0), (1, 1, 0, 1)];
        for &(r, c, r2, c2) in &perm {
            fj.at_mut(Coord::new(r2, c2)).assign(&fi.at(Coord::new(r, c)));
        }
        let (nn, _) = nn_correspondences(&fi, &fj, None, None, (0, 1), "t").unwrap();
        let expect: Vec<_> = perm.iter().map(|&(r, c, r2, c2)| (Coord::new(r, c), Coord::new(r2, c2))).collect();
        assert_eq!(nn.entries, expect);
    }

    #[test]
    fn ties_go_to_first_patch() {
        let f = FeatureMap::new(Array3::from_elem((2, 3, 2), 1.0));
        let (nn, _) = nn_correspondences(&f, &f, None, None, (0, 1), "t").unwrap();
        assert!(nn.entries.iter().all(|&(_, q)| q == Coord::new(0, 0)));
    }

    #[test]
    fn empty_foreground_warns() {
        let f = FeatureMap::zeros(Grid::new(2, 2), 3);
        let m = ForegroundMask::new(ndarray::Array2::from_elem((2, 2), false));
        let (nn, w) = nn_correspondences(&f, &f, Some(&m), None, (0, 1), "t").unwrap();
        assert!(nn.entries.is_empty());
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn identical_outputs_score_one() {
        let feats: Vec<FeatureMap> = (0..3)
            .map(|k| FeatureMap::new(Array3::from_shape_fn((3, 3, 4), |(r, c, d)| ((r * 7 + c * 3 + d + k) % 5) as f64 - 1.7)))
            .collect();
        let same = vec![feats[0].clone(); 3];
        let rep = dino_matchsim(&same, &same, None, "t").unwrap();
        assert_eq!(rep.mean_similarity, 1.0);
        assert_eq!(rep.score, 1.0);
    }

    #[test]
    fn orthogonal_outputs() {
        let src = vec![FeatureMap::new(array![[[1.0, 0.0]]]), FeatureMap::new(array![[[1.0, 0.0]]])];
        let out = vec![FeatureMap::new(array![[[1.0, 0.0]]]), FeatureMap::new(array![[[0.0, 1.0]]])];
        let rep = dino_matchsim(&src, &out, None, "t").unwrap();
        assert_eq!(rep.mean_similarity, 0.0);
        assert!((rep.score - (-1.0f64 / 0.6).exp()).abs() < 1e-12);
        assert!((rep.score - 0.1889).abs() < 1e-4);
    }

    #[test]
    fn misaligned_outputs_are_rejected() {
        let a = FeatureMap::zeros(Grid::new(2, 2), 2);
        let b = FeatureMap::zeros(Grid::new(2, 3), 2);
        assert!(dino_matchsim(&[a.clone(), a.clone()], &[a, b], None, "t").is_err());
    }

    #[test]
    fn transform_is_monotone_and_bounded() {
        let mut prev = 0.0;
        for k in -10..=10 {
            let s = k as f64 / 10.0;
            let v = matchsim_transform(s, MATCHSIM_TAU);
            assert!(v > prev && v <= 1.0);
            prev = v;
        }
    }
}
