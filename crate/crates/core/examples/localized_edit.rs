//! Edit a set in place: the source prompts describe the inputs, the target
//! prompts the wanted change.

use image::{Rgb, RgbImage};
use setfuse::backend::{extract_controls, DenoiserBackend, LuminanceDepth, MockBackend, MockConfig, SobelEdges};
use setfuse::correspondence::PatchNccMatcher;
use setfuse::pipeline::{edit_set, match_set, MatchOptions, Mode, RunConfig, SetInputs};
use setfuse::prompts::PromptBundle;

fn view(shift: i32) -> RgbImage {
    RgbImage::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as i32 - 32 - shift, y as i32 - 32);
        if dx * dx + dy * dy < 196 {
            Rgb([220, 60, 40])
        } else {
            Rgb([40, 120 + (y * 2) as u8, 60])
        }
    })
}

fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    let total: u64 = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y) as u64).sum();
    total as f64 / a.as_raw().len() as f64
}

pub fn run_example() -> setfuse::Result<()> {
    let images: Vec<RgbImage> = [-6, 0, 6].into_iter().map(view).collect();
    let (maps, _) = match_set(&images, &PatchNccMatcher::default(), &MatchOptions { threshold: 0.05, cache_dir: None })?;
    let mut prompts = PromptBundle::fallback("a red ball", "made of glass", 3);
    prompts.p_source = Some((0..3).map(|i| format!("a red ball on grass, view {i}")).collect());
    let inputs = SetInputs {
        controls: extract_controls(&images, &LuminanceDepth, &SobelEdges, (0.5, 0.5), None)?,
        images,
        maps,
        prompts,
        matcher: "patch-ncc".into(),
    };
    let cfg = RunConfig { mode: Mode::Edit, width: 64, height: 64, ..RunConfig::default() };

    let backend = MockBackend::new(MockConfig::default())?;
    let out = edit_set(&cfg, &inputs, &backend)?;
    let edited: Vec<_> = out.manifest.steps.iter().filter(|s| !s.stages.is_empty()).map(|s| s.t).collect();
    println!("steps that ran: {edited:?}");
    for (i, (src, img)) in inputs.images.iter().zip(&out.images).enumerate() {
        let recon = backend.decode(&backend.encode(src)?)?;
        println!("image {i}: mean change {:.2} levels", mean_abs_diff(&recon, img));
    }
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
