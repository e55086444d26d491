//! Per-image caption expansion and two-image grid prompts.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Orientation;

/// System instructions for caption expansion. The response schema is fixed
/// so the reply can be parsed without heuristics.
pub const CAPTION_SYSTEM_PROMPT: &str = "\
You receive a set of images that share common content, a description of the \
target shared content (SHARED) and a description of the target style or theme \
(THEME). Identify which elements are shared across the images and which are \
specific to each image. Rewrite SHARED into one richer description of the \
shared content, adding concrete artistic details such as colors, materials \
and textures, without contradicting it. Then write one caption per image, in \
input order, that describes the non-shared content of that image restyled \
according to THEME, respects the layout of the source image, and states the \
pose, viewpoint and placement of the shared content in that image. Also write \
one plain caption per image describing the source image as it is. \
Reply with JSON only, in exactly this form: \
{\"shared\": \"...\", \"captions\": [\"...\", ...], \"source_captions\": [\"...\", ...]}";

/// Set-level and per-image prompt texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub p_shared: String,
    pub p_theme: String,
    /// One caption per image.
    pub p_nonshared: Vec<String>,
    /// Plain descriptions of the source images, needed for localized editing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_source: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PromptBundle {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.p_shared.trim().is_empty() {
            return Err(Error::arg("p_shared must not be empty"));
        }
        if self.p_nonshared.len() != n {
            return Err(Error::arg(format!(
                "bundle has {} captions for {n} images",
                self.p_nonshared.len()
            )));
        }
        if let Some(src) = &self.p_source {
            if src.len() != n {
                return Err(Error::arg(format!("bundle has {} source captions for {n} images", src.len())));
            }
        }
        Ok(())
    }

    /// Templated captions used whenever the VLM cannot serve a request.
    pub fn fallback(p_shared: &str, p_theme: &str, n: usize) -> Self {
        Self {
            p_shared: p_shared.to_string(),
            p_theme: p_theme.to_string(),
            p_nonshared: vec![p_theme.to_string(); n],
            p_source: None,
            warnings: Vec::new(),
        }
    }

    /// Single-image prompt `"[p_shared]. [p_i]."`.
    pub fn image_prompt(&self, i: usize) -> String {
        build_image_prompt(&self.p_shared, &self.p_nonshared[i])
    }
}

/// One chat turn: system instructions plus user text and images.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system: String,
    pub text: String,
    pub images: Vec<RgbImage>,
}

/// A vision-language model reachable through a chat-completion call.
pub trait VlmClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct ChatCompletionClient {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl ChatCompletionClient {
    /// Reads `SETFUSE_VLM_ENDPOINT`, `SETFUSE_VLM_MODEL` and `SETFUSE_VLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("SETFUSE_VLM_ENDPOINT")
            .map_err(|_| Error::unavailable("vlm", "SETFUSE_VLM_ENDPOINT is not set"))?;
        Ok(Self {
            endpoint,
            model: std::env::var("SETFUSE_VLM_MODEL").unwrap_or_else(|_| "gpt-4o".to_string()),
            api_key: std::env::var("SETFUSE_VLM_API_KEY").ok(),
            timeout: Duration::from_secs(120),
        })
    }

    fn body(&self, request: &ChatRequest) -> Result<serde_json::Value> {
        let mut content = vec![serde_json::json!({"type": "text", "text": request.text})];
        for img in &request.images {
            let mut png = Vec::new();
            img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        Ok(serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": content},
            ],
        }))
    }
}

impl VlmClient for ChatCompletionClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Vlm(e.to_string()))?;
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let mut req = client.post(url).json(&self.body(request)?);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Vlm(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Vlm(format!("http status {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| Error::Vlm(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Vlm("response has no message content".into()))
    }
}

#[derive(Deserialize)]
struct CaptionReply {
    shared: String,
    captions: Vec<String>,
    #[serde(default)]
    source_captions: Option<Vec<String>>,
}

fn parse_reply(text: &str, n: usize) -> Result<CaptionReply> {
    // tolerate a fenced code block around the JSON
    let start = text.find('{').ok_or_else(|| Error::Vlm("reply contains no JSON object".into()))?;
    let end = text.rfind('}').ok_or_else(|| Error::Vlm("reply contains no JSON object".into()))?;
    let reply: CaptionReply =
        serde_json::from_str(&text[start..=end]).map_err(|e| Error::Vlm(format!("unparseable reply: {e}")))?;
    if reply.captions.len() != n {
        return Err(Error::Vlm(format!("reply has {} captions for {n} images", reply.captions.len())));
    }
    if reply.shared.trim().is_empty() {
        return Err(Error::Vlm("reply has an empty shared description".into()));
    }
    Ok(reply)
}

/// Expand the two user prompts into per-image captions.
///
/// Never fails on VLM trouble: any client or parse error yields the
/// templated fallback bundle with a warning attached.
pub fn compose_prompts(
    p_shared: &str,
    p_theme: &str,
    images: &[RgbImage],
    client: &dyn VlmClient,
) -> Result<PromptBundle> {
    if images.len() < 2 {
        return Err(Error::arg("prompt composition needs at least 2 images"));
    }
    if p_shared.trim().is_empty() {
        return Err(Error::arg("p_shared must not be empty"));
    }
    let n = images.len();
    let request = ChatRequest {
        system: CAPTION_SYSTEM_PROMPT.to_string(),
        text: format!("SHARED: {p_shared}\nTHEME: {p_theme}\nNumber of images: {n}"),
        images: images.to_vec(),
    };
    let outcome = client.complete(&request).and_then(|text| parse_reply(&text, n));
    Ok(match outcome {
        Ok(reply) => {
            let p_source = reply.source_captions.filter(|s| s.len() == n);
            PromptBundle {
                p_shared: reply.shared,
                p_theme: p_theme.to_string(),
                p_nonshared: reply.captions,
                p_source,
                warnings: Vec::new(),
            }
        }
        Err(e) => {
            log::warn!("caption expansion failed, using templated captions: {e}");
            let mut bundle = PromptBundle::fallback(p_shared, p_theme, n);
            bundle.warnings.push(format!("vlm fallback: {e}"));
            bundle
        }
    })
}

fn trim_slot(s: &str) -> &str {
    s.trim().trim_end_matches('.').trim_end()
}

/// The single-image prompt `"[p_shared]. [p_i]."`.
pub fn build_image_prompt(p_shared: &str, p_i: &str) -> String {
    format!("{}. {}.", trim_slot(p_shared), trim_slot(p_i))
}

/// The two-image canvas prompt for an edge.
pub fn build_grid_prompt(p_shared: &str, p_i: &str, p_j: &str, orientation: Orientation) -> String {
    let (first, second) = match orientation {
        Orientation::Horizontal => ("Left", "Right"),
        Orientation::Vertical => ("Top", "Bottom"),
    };
    format!(
        "Image grid of {}. {first}: {}. {second}: {}.",
        trim_slot(p_shared),
        trim_slot(p_i),
        trim_slot(p_j)
    )
}
