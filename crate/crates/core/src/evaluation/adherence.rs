use std::io::Cursor;
use std::time::Duration;

use base64::Engine as _;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::prompts::PromptBundle;

/// Text-image agreement score, e.g. a CLIP cosine.
pub trait ClipScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64>;
}

/// Mean score of each image against `"[p_shared]. [p_i]."`.
pub fn clip_adherence(images: &[RgbImage], bundle: &PromptBundle, scorer: &dyn ClipScorer) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::arg("no images to score"));
    }
    bundle.validate(images.len())?;
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        total += scorer.score(img, &bundle.image_prompt(i))?;
    }
    Ok(total / images.len() as f64)
}

/// Scorer behind an HTTP endpoint accepting
/// `{"image": <base64 png>, "text": ...}` and answering `{"score": x}`.
#[derive(Debug, Clone)]
pub struct HttpClipScorer {
    pub endpoint: String,
    pub timeout: Duration,
}

impl HttpClipScorer {
    /// Reads `SETFUSE_CLIP_ENDPOINT`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("SETFUSE_CLIP_ENDPOINT")
            .map_err(|_| Error::unavailable("clip", "SETFUSE_CLIP_ENDPOINT is not set"))?;
        Ok(Self { endpoint, timeout: Duration::from_secs(60) })
    }
}

impl ClipScorer for HttpClipScorer {
    fn name(&self) -> &str {
        "http-clip"
    }

    fn score(&self, image: &RgbImage, text: &str) -> Result<f64> {
        let mut png = Vec::new();
        image.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(png),
            "text": text,
        });
        let unavailable = |e: String| Error::unavailable("clip", e);
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| unavailable(e.to_string()))?;
        let resp = client.post(&self.endpoint).json(&body).send().map_err(|e| unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("http status {}", resp.status())));
        }
        let v: serde_json::Value = resp.json().map_err(|e| unavailable(e.to_string()))?;
        v["score"].as_f64().ok_or_else(|| unavailable("response has no numeric score".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Constant(f64);
    impl ClipScorer for Constant {
        fn name(&self) -> &str {
            "const"
        }
        fn score(&self, _: &RgbImage, _: &str) -> Result<f64> {
            Ok(self.0)
        }
    }

    struct Recording(Mutex<Vec<String>>);
    impl ClipScorer for Recording {
        fn name(&self) -> &str {
            "rec"
        }
        fn score(&self, img: &RgbImage, text: &str) -> Result<f64> {
            self.0.lock().unwrap().push(text.to_string());
            Ok(img.get_pixel(0, 0)[0] as f64 / 255.0)
        }
    }

    #[test]
    fn constant_scorer() {
        let imgs = vec![RgbImage::new(4, 4); 3];
        let b = PromptBundle::fallback("a cat", "in snow", 3);
        assert_eq!(clip_adherence(&imgs, &b, &Constant(0.5)).unwrap(), 0.5);
    }

    #[test]
    fn single_image_and_prompt_format() {
        let img = RgbImage::from_pixel(2, 2, image::Rgb([51, 0, 0]));
        let mut b = PromptBundle::fallback("a cat.", "", 1);
        b.p_nonshared = vec!["sitting on a red sofa".into()];
        let rec = Recording(Mutex::new(Vec::new()));
        assert_eq!(clip_adherence(&[img], &b, &rec).unwrap(), 0.2);
        assert_eq!(rec.0.lock().unwrap()[0], "a cat. sitting on a red sofa.");
    }

    #[test]
    fn unreachable_scorer_is_recoverable() {
        let s = HttpClipScorer { endpoint: "http://127.0.0.1:9/score".into(), timeout: Duration::from_millis(200) };
        let b = PromptBundle::fallback("x", "y", 1);
        let err = clip_adherence(&[RgbImage::new(2, 2)], &b, &s).unwrap_err();
        assert!(matches!(err, Error::BackendUnavailable { .. }));
    }
}
