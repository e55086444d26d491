//! Generate a four-image set with the mock backend and write the run
//! directory.

use image::{Rgb, RgbImage};
use setfuse::backend::{extract_controls, LuminanceDepth, MockBackend, MockConfig, SobelEdges};
use setfuse::correspondence::PatchNccMatcher;
use setfuse::pipeline::{generate_set, match_set, write_run, MatchOptions, RunConfig, SetInputs};
use setfuse::prompts::PromptBundle;

fn view(shift: i32) -> RgbImage {
    RgbImage::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as i32 - 32 - shift, y as i32 - 32);
        if dx * dx + dy * dy < 196 {
            Rgb([220, 60, 40])
        } else {
            Rgb([(x * 4) as u8, 90, (y * 4) as u8])
        }
    })
}

pub fn run_example() -> setfuse::Result<()> {
    let images: Vec<RgbImage> = [-8, -3, 3, 8].into_iter().map(view).collect();
    let matcher = PatchNccMatcher::default();
    let (maps, _) = match_set(&images, &matcher, &MatchOptions { threshold: 0.05, cache_dir: None })?;
    let inputs = SetInputs {
        controls: extract_controls(&images, &LuminanceDepth, &SobelEdges, (0.5, 0.5), None)?,
        images,
        maps,
        prompts: PromptBundle::fallback("a red ball", "watercolor painting", 4),
        matcher: "patch-ncc".into(),
    };
    let cfg = RunConfig { width: 64, height: 64, seed: 11, ..RunConfig::default() };

    let backend = MockBackend::new(MockConfig::default())?;
    let mut out = generate_set(&cfg, &inputs, &backend)?;
    println!("graph edges: {:?}", out.manifest.graph.edges);
    for s in out.manifest.steps.iter().step_by(6) {
        println!("t={:>2} stages {:?} fused {} loss {:?}", s.t, s.stages, s.fused_calls, s.guidance_loss);
    }
    let dir = std::env::temp_dir().join("setfuse-example-generate");
    write_run(&dir, &mut out)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
