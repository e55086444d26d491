//! A small linear stand-in for a diffusion transformer.
//!
//! Each block projects the residual stream to keys and values with fixed
//! per-cell matrices and writes them back: `h += P K + Q V`, `K = A h`,
//! `V = B h`. With no hooks the whole map is linear in the latent, so its
//! feature Jacobian is available in closed form.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_geometry, run_hook, BlockCatalog, ControlCondition, DenoiseOutput, DenoiseRequest, DenoiserBackend, FeatureHook, HookContext, TapKey, TapSelection};
use crate::error::{Error, Result};
use crate::feature::{FeatureKind, FeatureMap, Latent};
use crate::geometry::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    pub channels: usize,
    pub feature_dim: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub downsample: u32,
    pub total_steps: usize,
    /// Seed for the fixed block weights.
    pub weight_seed: u64,
    /// Scale of the write-back matrices P and Q.
    pub mix_scale: f64,
    /// Gain of the control term in the velocity.
    pub control_gain: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            feature_dim: 8,
            double_blocks: 2,
            single_blocks: 4,
            downsample: 8,
            total_steps: 25,
            weight_seed: 0x5e7f,
            mix_scale: 0.1,
            control_gain: 2.0,
        }
    }
}

/// Fixed matrices of one mock block.
#[derive(Debug, Clone)]
pub struct MockWeights {
    /// Key projection, D×C.
    pub a: Array2<f64>,
    /// Value projection, D×C.
    pub b: Array2<f64>,
    /// Key write-back, C×D.
    pub p: Array2<f64>,
    /// Value write-back, C×D.
    pub q: Array2<f64>,
}

impl MockWeights {
    /// Residual transfer `I + P A + Q B` of the block without hooks.
    pub fn transfer(&self) -> Array2<f64> {
        let c = self.a.ncols();
        Array2::eye(c) + self.p.dot(&self.a) + self.q.dot(&self.b)
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    catalog: BlockCatalog,
    weights: Vec<MockWeights>,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

/// FNV-1a; stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Channel-mixing matrix applied at every cell: (C,H,W) -> (H,W,D).
fn project(m: &Array2<f64>, h: &Latent) -> FeatureMap {
    let (c, rows, cols) = h.dim();
    let flat = h.to_shape((c, rows * cols)).expect("contiguous latent");
    let out = m.dot(&flat); // D x HW
    let d = out.nrows();
    let owned = out.t().as_standard_layout().into_owned();
    FeatureMap::new(owned.into_shape_with_order((rows, cols, d)).expect("shape"))
}

/// Inverse layout of [`project`]: (H,W,D) -> (C,H,W) through a C×D matrix.
fn back_project(m: &Array2<f64>, f: &FeatureMap) -> Latent {
    let (rows, cols, d) = f.data.dim();
    let flat = f.data.to_shape((rows * cols, d)).expect("contiguous features");
    let out = m.dot(&flat.t()); // C x HW
    let c = out.nrows();
    out.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, rows, cols))
        .expect("shape")
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self> {
        if config.channels < 3 || config.feature_dim == 0 || config.downsample == 0 || config.total_steps == 0 {
            return Err(Error::arg("mock backend needs >= 3 channels, non-zero feature dim, downsample and steps"));
        }
        let catalog = BlockCatalog::new(config.double_blocks, config.single_blocks);
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let (c, d) = (config.channels, config.feature_dim);
        let proj = 1.0 / (c as f64).sqrt();
        let mix = config.mix_scale / (d as f64).sqrt();
        let weights = (0..catalog.len())
            .map(|_| MockWeights {
                a: gaussian(d, c, proj, &mut rng),
                b: gaussian(d, c, proj, &mut rng),
                p: gaussian(c, d, mix, &mut rng),
                q: gaussian(c, d, mix, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            catalog,
            weights,
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn weights(&self) -> &[MockWeights] {
        &self.weights
    }

    /// Scalar prompt gain applied to the block output.
    pub fn prompt_gain(prompt: &str) -> f64 {
        0.8 + 0.4 * ((fnv1a(prompt.as_bytes()) % 10_000) as f64 / 10_000.0)
    }

    /// Per-channel weight of the control term.
    fn channel_tint(c: usize) -> f64 {
        [1.0, 0.7, 0.4, 1.0].get(c).copied().unwrap_or(0.0)
    }

    /// Bias-free step: the block stack on `z`, without prompt gain or control.
    pub fn mock_step(
        &self,
        z: &Latent,
        timestep: usize,
        hook: Option<&mut dyn FeatureHook>,
    ) -> Result<(Latent, BTreeMap<TapKey, FeatureMap>)> {
        let mut outs = self.run_blocks(&[z], timestep, hook, &TapSelection::All)?;
        Ok(outs.pop().expect("one output"))
    }

    fn run_blocks(
        &self,
        latents: &[&Latent],
        timestep: usize,
        mut hook: Option<&mut dyn FeatureHook>,
        taps: &TapSelection,
    ) -> Result<Vec<(Latent, BTreeMap<TapKey, FeatureMap>)>> {
        for z in latents {
            if z.dim().0 != self.config.channels {
                return Err(Error::arg(format!(
                    "latent has {} channels, backend expects {}",
                    z.dim().0,
                    self.config.channels
                )));
            }
        }
        let mut hs: Vec<Latent> = latents.iter().map(|z| z.as_standard_layout().into_owned()).collect();
        let mut tapped: Vec<BTreeMap<TapKey, FeatureMap>> = vec![BTreeMap::new(); hs.len()];
        for (block, w) in self.catalog.blocks().iter().zip(&self.weights) {
            let mut keys: Vec<FeatureMap> = hs.iter().map(|h| project(&w.a, h)).collect();
            let mut values: Vec<FeatureMap> = hs.iter().map(|h| project(&w.b, h)).collect();
            if let Some(h) = hook.as_deref_mut() {
                let ctx = HookContext { timestep, block, kind: FeatureKind::Key };
                run_hook(h, &ctx, &mut keys)?;
                let ctx = HookContext { timestep, block, kind: FeatureKind::Value };
                run_hook(h, &ctx, &mut values)?;
            }
            for (k, h) in hs.iter_mut().enumerate() {
                *h += &back_project(&w.p, &keys[k]);
                *h += &back_project(&w.q, &values[k]);
            }
            if taps.wants(block.id) {
                for (k, (key, value)) in keys.into_iter().zip(values).enumerate() {
                    tapped[k].insert((block.id, FeatureKind::Key), key);
                    tapped[k].insert((block.id, FeatureKind::Value), value);
                }
            }
        }
        Ok(hs.into_iter().zip(tapped).collect())
    }

    /// Control term of the velocity, pooled onto the latent grid.
    fn control_term(&self, control: &ControlCondition, latent: Grid) -> Latent {
        let ds = self.config.downsample as usize;
        let (rows, cols) = (latent.rows as usize, latent.cols as usize);
        let combined = &control.depth * control.depth_weight + &control.edge * control.edge_weight;
        let area = (ds * ds) as f64;
        let pooled = Array2::from_shape_fn((rows, cols), |(r, c)| {
            combined
                .slice(ndarray::s![r * ds..(r + 1) * ds, c * ds..(c + 1) * ds])
                .sum()
                / area
        });
        let centre = 0.5 * (control.depth_weight + control.edge_weight);
        let gain = self.config.control_gain * control.strength;
        Array3::from_shape_fn((self.config.channels, rows, cols), |(ch, r, c)| {
            -gain * Self::channel_tint(ch) * (pooled[[r, c]] - centre)
        })
    }
}

impl DenoiserBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn version(&self) -> String {
        format!(
            "mock-linear/c{}-d{}-b{}+{}-seed{:x}",
            self.config.channels,
            self.config.feature_dim,
            self.config.double_blocks,
            self.config.single_blocks,
            self.config.weight_seed
        )
    }

    fn catalog(&self) -> &BlockCatalog {
        &self.catalog
    }

    fn total_steps(&self) -> usize {
        self.config.total_steps
    }

    fn latent_channels(&self) -> usize {
        self.config.channels
    }

    fn downsample(&self) -> u32 {
        self.config.downsample
    }

    fn feature_grid(&self, latent: Grid) -> Grid {
        latent
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn denoise(
        &self,
        batch: &[DenoiseRequest<'_>],
        timestep: usize,
        hook: Option<&mut dyn FeatureHook>,
        taps: &TapSelection,
    ) -> Result<Vec<DenoiseOutput>> {
        for req in batch {
            check_geometry(req, self.config.downsample)?;
        }
        let latents: Vec<&Latent> = batch.iter().map(|r| r.latent).collect();
        let outs = self.run_blocks(&latents, timestep, hook, taps)?;
        Ok(batch
            .iter()
            .zip(outs)
            .map(|(req, (h, taps))| {
                let mut prediction = h * Self::prompt_gain(req.prompt);
                if let Some(c) = req.control {
                    prediction += &self.control_term(c, crate::feature::latent_grid(req.latent));
                }
                DenoiseOutput { prediction, taps }
            })
            .collect())
    }

    fn feature_vjp(
        &self,
        request: &DenoiseRequest<'_>,
        _timestep: usize,
        cotangents: &BTreeMap<TapKey, FeatureMap>,
    ) -> Result<Latent> {
        let (c, rows, cols) = request.latent.dim();
        let mut g: Latent = Array3::zeros((c, rows, cols));
        for (block, w) in self.catalog.blocks().iter().zip(&self.weights).rev() {
            let t = w.transfer();
            let flat = g.to_shape((c, rows * cols)).expect("contiguous").to_owned();
            let mut next = t.t().dot(&flat).into_shape_with_order((c, rows, cols)).expect("shape");
            if let Some(gk) = cotangents.get(&(block.id, FeatureKind::Key)) {
                next += &back_project(&w.a.t().to_owned(), gk);
            }
            if let Some(gv) = cotangents.get(&(block.id, FeatureKind::Value)) {
                next += &back_project(&w.b.t().to_owned(), gv);
            }
            g = next;
        }
        Ok(g)
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        let ds = self.config.downsample;
        let (w, h) = image.dimensions();
        if w % ds != 0 || h % ds != 0 || w == 0 || h == 0 {
            return Err(Error::arg(format!("image {w}x{h} is not a multiple of the downsample factor {ds}")));
        }
        let (rows, cols) = ((h / ds) as usize, (w / ds) as usize);
        let mut z = Array3::zeros((self.config.channels, rows, cols));
        let area = (ds * ds) as f64;
        for r in 0..rows {
            for c in 0..cols {
                let mut rgb = [0.0f64; 3];
                for y in 0..ds {
                    for x in 0..ds {
                        let p = image.get_pixel(c as u32 * ds + x, r as u32 * ds + y);
                        for k in 0..3 {
                            rgb[k] += p[k] as f64;
                        }
                    }
                }
                let rgb = rgb.map(|v| v / area / 127.5 - 1.0);
                for (ch, v) in rgb.iter().enumerate() {
                    z[[ch, r, c]] = *v;
                }
                if self.config.channels > 3 {
                    z[[3, r, c]] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                }
            }
        }
        Ok(z)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        if latent.dim().0 < 3 {
            return Err(Error::arg("latent needs at least 3 channels to decode"));
        }
        let ds = self.config.downsample;
        let (_, rows, cols) = latent.dim();
        let to_u8 = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        let channels: Vec<_> = (0..3).map(|c| latent.index_axis(Axis(0), c)).collect();
        Ok(RgbImage::from_fn(cols as u32 * ds, rows as u32 * ds, |x, y| {
            let (r, c) = ((y / ds) as usize, (x / ds) as usize);
            Rgb([to_u8(channels[0][[r, c]]), to_u8(channels[1][[r, c]]), to_u8(channels[2][[r, c]])])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::denoise_edge;
    use crate::geometry::Orientation;
    use crate::graph::EdgeLatent;

    fn backend() -> MockBackend {
        MockBackend::new(MockConfig::default()).unwrap()
    }

    fn randn(shape: (usize, usize, usize), seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    /// Closed form of the hook-free stack: h_L = (prod T_b) z, with an
    /// optional override of one block's values.
    fn closed_form(b: &MockBackend, z: &Latent, zero_values_at: Option<usize>) -> Latent {
        let (c, rows, cols) = z.dim();
        let mut out = Array3::zeros((c, rows, cols));
        for r in 0..rows {
            for col in 0..cols {
                let mut h = z.slice(ndarray::s![.., r, col]).to_owned();
                for (k, w) in b.weights().iter().enumerate() {
                    let key = w.a.dot(&h);
                    let value = if zero_values_at == Some(k) { ndarray::Array1::zeros(w.b.nrows()) } else { w.b.dot(&h) };
                    h = &h + &w.p.dot(&key) + &w.q.dot(&value);
                }
                out.slice_mut(ndarray::s![.., r, col]).assign(&h);
            }
        }
        out
    }

    struct ZeroValues(usize);
    impl FeatureHook for ZeroValues {
        fn intercept(&mut self, ctx: &HookContext<'_>, f: &mut [FeatureMap]) -> Result<()> {
            if ctx.block.id == self.0 && ctx.kind == FeatureKind::Value {
                f.iter_mut().for_each(|m| m.data.fill(0.0));
            }
            Ok(())
        }
    }

    struct Shrink;
    impl FeatureHook for Shrink {
        fn intercept(&mut self, _: &HookContext<'_>, f: &mut [FeatureMap]) -> Result<()> {
            f[0] = FeatureMap::zeros(Grid::new(1, 1), 1);
            Ok(())
        }
    }

    #[test]
    fn zero_latent_gives_zero_output() {
        let b = backend();
        let (pred, feats) = b.mock_step(&Array3::zeros((4, 3, 3)), 10, None).unwrap();
        assert!(pred.iter().all(|&v| v == 0.0));
        assert!(feats.values().all(|f| f.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn step_is_homogeneous() {
        let b = backend();
        let z = randn((4, 3, 5), 1);
        let (p1, f1) = b.mock_step(&z, 10, None).unwrap();
        let (p2, f2) = b.mock_step(&(&z * 2.0), 10, None).unwrap();
        assert!(p2.iter().zip(p1.iter()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12));
        for (k, f) in &f1 {
            assert!(f2[k].data.iter().zip(f.data.iter()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12));
        }
    }

    #[test]
    fn no_hook_matches_closed_form() {
        let b = backend();
        let z = randn((4, 4, 8), 2);
        let edge = EdgeLatent::new((0, 1), z.clone(), Orientation::Horizontal, 12).unwrap();
        let (pred, _) = denoise_edge(&b, &edge, "p", None, None, &TapSelection::None).unwrap();
        let expected = closed_form(&b, &z, None) * MockBackend::prompt_gain("p");
        assert!(pred.iter().zip(expected.iter()).all(|(a, e)| (a - e).abs() < 1e-12));
    }

    #[test]
    fn zeroed_value_hook_matches_closed_form() {
        let b = backend();
        let z = randn((4, 2, 4), 3);
        let edge = EdgeLatent::new((0, 1), z.clone(), Orientation::Horizontal, 12).unwrap();
        let mut hook = ZeroValues(1);
        let (pred, _) = denoise_edge(&b, &edge, "p", None, Some(&mut hook), &TapSelection::None).unwrap();
        let (plain, _) = denoise_edge(&b, &edge, "p", None, None, &TapSelection::None).unwrap();
        let expected = closed_form(&b, &z, Some(1)) * MockBackend::prompt_gain("p");
        assert!(pred.iter().zip(expected.iter()).all(|(a, e)| (a - e).abs() < 1e-12));
        assert!(pred.iter().zip(plain.iter()).any(|(a, p)| (a - p).abs() > 1e-6));
        let (again, _) = denoise_edge(&b, &edge, "p", None, Some(&mut ZeroValues(1)), &TapSelection::None).unwrap();
        assert_eq!(pred, again);
    }

    #[test]
    fn shape_changing_hook_is_a_contract_violation() {
        let b = backend();
        let z = randn((4, 2, 2), 4);
        let err = b.mock_step(&z, 5, Some(&mut Shrink)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let b = backend();
        let z = randn((4, 2, 3), 5);
        // linear functional: sum of tapped features weighted by a fixed random cotangent
        let (_, feats) = b.mock_step(&z, 10, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cot: BTreeMap<TapKey, FeatureMap> = feats
            .iter()
            .map(|(k, f)| (*k, FeatureMap::new(f.data.mapv(|_| StandardNormal.sample(&mut rng)))))
            .collect();
        let objective = |z: &Latent| -> f64 {
            let (_, f) = b.mock_step(z, 10, None).unwrap();
            f.iter().map(|(k, m)| (&m.data * &cot[k].data).sum()).sum()
        };
        let req = DenoiseRequest { latent: &z, prompt: "", control: None };
        let grad = b.feature_vjp(&req, 10, &cot).unwrap();
        let eps = 1e-5;
        for (idx, g) in grad.indexed_iter() {
            let mut zp = z.clone();
            zp[idx] += eps;
            let mut zm = z.clone();
            zm[idx] -= eps;
            let fd = (objective(&zp) - objective(&zm)) / (2.0 * eps);
            assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "{idx:?}: {fd} vs {g}");
        }
    }

    #[test]
    fn control_geometry_is_checked() {
        let b = backend();
        let z = randn((4, 2, 4), 7);
        let bad = ControlCondition {
            depth: Array2::zeros((16, 16)),
            edge: Array2::zeros((16, 16)),
            depth_weight: 0.5,
            edge_weight: 0.5,
            strength: 1.0,
        };
        let req = DenoiseRequest { latent: &z, prompt: "", control: Some(&bad) };
        assert!(matches!(b.denoise(&[req], 3, None, &TapSelection::None), Err(Error::Argument(_))));
        let ok = ControlCondition { depth: Array2::zeros((16, 32)), edge: Array2::zeros((16, 32)), ..bad };
        let req = DenoiseRequest { latent: &z, prompt: "", control: Some(&ok) };
        assert!(b.denoise(&[req], 3, None, &TapSelection::None).is_ok());
    }

    #[test]
    fn encode_decode_round_trip_on_flat_cells() {
        let b = backend();
        let img = RgbImage::from_fn(16, 8, |x, _| if x < 8 { Rgb([255, 0, 128]) } else { Rgb([10, 200, 30]) });
        let z = b.encode(&img).unwrap();
        assert_eq!(z.dim(), (4, 1, 2));
        let back = b.decode(&z).unwrap();
        assert_eq!(back.dimensions(), (16, 8));
        for (p, q) in img.pixels().zip(back.pixels()) {
            for k in 0..3 {
                assert!((p[k] as i32 - q[k] as i32).abs() <= 1);
            }
        }
        assert!(b.encode(&RgbImage::new(10, 8)).is_err());
    }
}
