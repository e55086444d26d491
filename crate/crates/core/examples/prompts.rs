//! Caption expansion with a scripted VLM, and the prompts each denoiser
//! request receives.

use image::RgbImage;
use setfuse::geometry::Orientation;
use setfuse::prompts::{build_grid_prompt, compose_prompts, ChatRequest, VlmClient};

struct Scripted(&'static str);

impl VlmClient for Scripted {
    fn complete(&self, _request: &ChatRequest) -> setfuse::Result<String> {
        Ok(self.0.to_string())
    }
}

pub fn run_example() -> setfuse::Result<()> {
    let images = vec![RgbImage::new(16, 16); 3];
    let vlm = Scripted(
        r#"```json
{"shared": "a red rubber ball with a white stripe",
 "captions": ["on a snowy hill", "beside a frozen pond", "under a pine tree"],
 "source_captions": ["on grass", "beside a pond", "under a tree"]}
```"#,
    );
    let bundle = compose_prompts("a red ball", "in winter", &images, &vlm)?;
    for i in 0..images.len() {
        println!("image {i}: {}", bundle.image_prompt(i));
    }
    println!(
        "edge (0,1): {}",
        build_grid_prompt(&bundle.p_shared, &bundle.p_nonshared[0], &bundle.p_nonshared[1], Orientation::Horizontal)
    );

    // an unparseable reply falls back to templated captions
    let fallback = compose_prompts("a red ball", "in winter", &images, &Scripted("no idea"))?;
    println!("fallback: {} ({})", fallback.image_prompt(0), fallback.warnings.join("; "));
    Ok(())
}

fn main() -> setfuse::Result<()> {
    run_example()
}
