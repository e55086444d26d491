use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::cache::FeatureRecord;
use crate::correspondence::PairMaps;
use crate::error::{Error, Result};
use crate::feature::{cosine, FeatureKind, FeatureMap, Stream};
use crate::fusion::aggregate_incident;
use crate::geometry::ImageId;

fn unit_sum(f: &FeatureMap) -> (Array1<f64>, usize) {
    let mut acc = Array1::zeros(f.dim());
    let mut n = 0;
    for c in f.grid().iter() {
        let v = f.at(c);
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            acc += &(&v / norm);
        }
        n += 1;
    }
    (acc, n)
}

/// Mean cosine at matched cells, and the mean cosine over all cell pairs
/// of distinct images as a baseline.
pub fn matched_feature_similarity(features: &BTreeMap<ImageId, FeatureMap>, maps: &PairMaps) -> Result<(f64, f64)> {
    let mut matched = (0.0, 0usize);
    for ((i, j), m) in maps {
        let (Some(fi), Some(fj)) = (features.get(i), features.get(j)) else { continue };
        if m.resolution != fi.grid() || m.resolution != fj.grid() {
            return Err(Error::arg(format!("map {:?} at {} but features at {}", (i, j), m.resolution, fi.grid())));
        }
        for e in m.iter() {
            matched.0 += cosine(fi.at(e.src), fj.at(e.dst));
            matched.1 += 1;
        }
    }
    // mean over all (p, q) of cos = dot of summed unit vectors / (P Q)
    let sums: BTreeMap<ImageId, (Array1<f64>, usize)> = features.iter().map(|(&i, f)| (i, unit_sum(f))).collect();
    let mut baseline = (0.0, 0usize);
    for (i, (si, ni)) in &sums {
        for (j, (sj, nj)) in &sums {
            if i != j && *ni > 0 && *nj > 0 {
                baseline.0 += si.dot(sj) / (*ni * *nj) as f64;
                baseline.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok((mean(matched), mean(baseline)))
}

/// One row of the per-block similarity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub timestep: usize,
    pub block: usize,
    pub stream: Stream,
    pub kind: FeatureKind,
    pub matched: f64,
    pub baseline: f64,
}

type Groups<'a> = BTreeMap<(usize, usize, FeatureKind), (Stream, BTreeMap<ImageId, Vec<&'a FeatureMap>>)>;

/// Similarity per (timestep, block, kind) from dumped run features.
/// Several copies of one image's features are averaged first.
pub fn analyze_features(records: &[FeatureRecord], maps: &PairMaps) -> Result<Vec<SimilarityRow>> {
    let mut groups: Groups = BTreeMap::new();
    for r in records {
        let g = groups
            .entry((r.timestep, r.block, r.kind))
            .or_insert_with(|| (r.stream, BTreeMap::new()));
        g.1.entry(r.owner).or_default().push(&r.map);
    }
    let mut rows = Vec::new();
    for ((timestep, block, kind), (stream, owners)) in groups.into_iter().rev() {
        let feats: BTreeMap<ImageId, FeatureMap> = owners
            .into_iter()
            .map(|(i, copies)| Ok((i, aggregate_incident(&copies)?)))
            .collect::<Result<_>>()?;
        let (matched, baseline) = matched_feature_similarity(&feats, maps)?;
        rows.push(SimilarityRow { timestep, block, stream, kind, matched, baseline });
    }
    Ok(rows)
}

/// Tab-separated table with a header row, ready for plotting.
pub fn similarity_table_tsv(rows: &[SimilarityRow]) -> String {
    let mut s = String::from("timestep\tblock\tstream\tkind\tmatched\tbaseline\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:?}\t{:?}\t{:.6}\t{:.6}",
            r.timestep, r.block, r.stream, r.kind, r.matched, r.baseline
        );
    }
    s
}
