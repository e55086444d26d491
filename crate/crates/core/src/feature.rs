use ndarray::{s, Array3, ArrayView1, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Coord, Grid, Orientation};

/// A latent tensor laid out as (channels, rows, cols).
pub type Latent = Array3<f64>;

/// Which transformer block family a feature map was tapped from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Double,
    Single,
}

/// Key or value projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Key,
    Value,
}

/// Dense per-cell feature vectors laid out as (rows, cols, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(grid: Grid, dim: usize) -> Self {
        Self::new(Array3::zeros((grid.rows as usize, grid.cols as usize, dim)))
    }

    pub fn grid(&self) -> Grid {
        let (r, c, _) = self.data.dim();
        Grid::new(r as u32, c as u32)
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    /// The pooled vector `f[c]`.
    pub fn at(&self, c: Coord) -> ArrayView1<'_, f64> {
        self.data.slice(s![c.row as usize, c.col as usize, ..])
    }

    pub fn at_mut(&mut self, c: Coord) -> ArrayViewMut1<'_, f64> {
        self.data.slice_mut(s![c.row as usize, c.col as usize, ..])
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// Split a two-image canvas map into its (first, second) halves.
    pub fn split(&self, orientation: Orientation) -> Result<(FeatureMap, FeatureMap)> {
        let axis = feature_axis(orientation);
        let len = self.data.len_of(Axis(axis));
        if !len.is_multiple_of(2) {
            return Err(Error::arg(format!(
                "cannot split feature canvas with odd extent {len} along axis {axis}"
            )));
        }
        let (a, b) = self.data.view().split_at(Axis(axis), len / 2);
        Ok((FeatureMap::new(a.to_owned()), FeatureMap::new(b.to_owned())))
    }

    /// Place two equally shaped maps on a canvas.
    pub fn concat(a: &FeatureMap, b: &FeatureMap, orientation: Orientation) -> Result<FeatureMap> {
        if !a.same_shape(b) {
            return Err(Error::arg(format!(
                "feature shapes differ: {:?} vs {:?}",
                a.data.dim(),
                b.data.dim()
            )));
        }
        let data = ndarray::concatenate(
            Axis(feature_axis(orientation)),
            &[a.data.view(), b.data.view()],
        )
        .map_err(|e| Error::arg(e.to_string()))?;
        Ok(FeatureMap::new(data))
    }
}

fn feature_axis(orientation: Orientation) -> usize {
    match orientation {
        Orientation::Horizontal => 1,
        Orientation::Vertical => 0,
    }
}

pub(crate) fn latent_axis(orientation: Orientation) -> usize {
    match orientation {
        Orientation::Horizontal => 2,
        Orientation::Vertical => 1,
    }
}

/// Spatial grid of a latent.
pub fn latent_grid(z: &Latent) -> Grid {
    let (_, r, c) = z.dim();
    Grid::new(r as u32, c as u32)
}

/// Cosine similarity; zero when either vector has zero norm.
///
/// Computed as `dot / sqrt(|a|²·|b|²)` so identical vectors give exactly 1.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let dot = a.dot(&b);
    let na = a.dot(&a);
    let nb = b.dot(&b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn split_inverts_concat() {
        let a = FeatureMap::new(Array3::from_shape_fn((2, 3, 2), |(r, c, d)| (r * 10 + c * 2 + d) as f64));
        let b = FeatureMap::new(a.data.mapv(|v| -v));
        for o in [Orientation::Horizontal, Orientation::Vertical] {
            let grid = FeatureMap::concat(&a, &b, o).unwrap();
            let (x, y) = grid.split(o).unwrap();
            assert_eq!(x, a);
            assert_eq!(y, b);
        }
    }

    #[test]
    fn cosine_of_identical_vectors_is_exactly_one() {
        let v = array![0.3, -1.7, 2.2, 1e-3];
        assert_eq!(cosine(v.view(), v.view()), 1.0);
        let z = array![0.0, 0.0, 0.0, 0.0];
        assert_eq!(cosine(v.view(), z.view()), 0.0);
    }
}
