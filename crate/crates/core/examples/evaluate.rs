//! Score set consistency with DINO-MatchSim on patch statistics, comparing
//! runs with and without the consistency machinery.

use image::{Rgb, RgbImage};
use setfuse::backend::{extract_controls, LuminanceDepth, MockBackend, MockConfig, SobelEdges};
use setfuse::correspondence::PatchNccMatcher;
use setfuse::evaluation::{dino_matchsim, FeatureExtractor, PatchStats};
use setfuse::pipeline::{generate_set, AblationConfig, match_set, MatchOptions, RunConfig, SetInputs};
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
    let images: Vec<RgbImage> = [-8, 0, 8].into_iter().map(view).collect();
    let (maps, _) = match_set(&images, &PatchNccMatcher::default(), &MatchOptions { threshold: 0.05, cache_dir: None })?;
    let inputs = SetInputs {
        controls: extract_controls(&images, &LuminanceDepth, &SobelEdges, (0.5, 0.5), None)?,
        images,
        maps,
        prompts: PromptBundle::fallback("a red ball", "watercolor painting", 3),
        matcher: "patch-ncc".into(),
    };
    let ex = PatchStats { grid: setfuse::geometry::Grid::new(8, 8) };
    let src = inputs.images.iter().map(|im| ex.extract(im)).collect::<setfuse::Result<Vec<_>>>()?;
    let backend = MockBackend::new(MockConfig::default())?;

    for (name, ablate) in [("full", false), ("no graph, no fusion, no guidance", true)] {
        let ablation = AblationConfig { no_graph: ablate, no_mff: ablate, no_guidance: ablate };
        let cfg = RunConfig { width: 64, height: 64, ablation, ..RunConfig::default() };
        let out = generate_set(&cfg, &inputs, &backend)?;
        let feats = out.images.iter().map(|im| ex.extract(im)).collect::<setfuse::Result<Vec<_>>>()?;
        let report = dino_matchsim(&src, &feats, None, ex.name())?;
        println!("{name}: score {:.4} (mean similarity {:.4})", report.score, report.mean_similarity);
    }
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
