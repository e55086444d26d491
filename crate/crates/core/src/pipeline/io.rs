use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;

use super::manifest::{sha256_hex, OutputRecord, RunManifest};
use super::{edit_set, generate_set, Mode, RunConfig, SetInputs, SetOutput};
use crate::backend::{extract_controls, select_backend, LuminanceDepth, SobelEdges};
use crate::cache::{match_file_name, read_matches, write_features, write_matches, MatchCacheHeader};
use crate::correspondence::{compute_matches, MatcherBackend, PairMaps};
use crate::error::{Error, Result, StageExt};
use crate::prompts::{compose_prompts, PromptBundle, VlmClient};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Images of a directory in file-name order, resized to `width`×`height`.
pub fn load_images(dir: &Path, width: u32, height: u32) -> Result<Vec<(String, RgbImage)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = image::open(&p)?.to_rgb8();
            let img = if img.dimensions() == (width, height) {
                img
            } else {
                image::imageops::resize(&img, width, height, FilterType::Triangle)
            };
            let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, img))
        })
        .collect()
}

/// Where pairwise match caches live and which threshold filters them.
#[derive(Debug, Clone)]
pub struct MatchOptions {
    pub threshold: f32,
    pub cache_dir: Option<PathBuf>,
}

fn set_key(images: &[RgbImage], matcher: &str, threshold: f32) -> String {
    let mut bytes = Vec::new();
    for im in images {
        bytes.extend(im.width().to_le_bytes());
        bytes.extend(im.height().to_le_bytes());
        bytes.extend(sha256_hex(im.as_raw()).into_bytes());
    }
    bytes.extend(matcher.as_bytes());
    bytes.extend(threshold.to_le_bytes());
    sha256_hex(&bytes)[..16].to_string()
}

/// Matches for every ordered pair, served from the cache when present.
pub fn match_set(
    images: &[RgbImage],
    matcher: &dyn MatcherBackend,
    opts: &MatchOptions,
) -> Result<(PairMaps, Vec<String>)> {
    let dir = opts
        .cache_dir
        .as_ref()
        .map(|d| d.join(format!("matches-{}", set_key(images, matcher.name(), opts.threshold))));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let header = MatchCacheHeader { backend: matcher.name().to_string(), threshold: opts.threshold };
    let mut maps = PairMaps::new();
    let mut warnings = Vec::new();
    for i in 0..images.len() {
        for j in 0..images.len() {
            if i == j {
                continue;
            }
            let path = dir.as_ref().map(|d| d.join(match_file_name(i, j)));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                maps.insert((i, j), read_matches(p)?.0);
                continue;
            }
            let r = compute_matches(&images[i], &images[j], (i, j), matcher, opts.threshold)?;
            if let Some(p) = &path {
                write_matches(p, &r.map, &header)?;
            }
            warnings.extend(r.warnings);
            maps.insert((i, j), r.map);
        }
    }
    Ok((maps, warnings))
}

/// Load images, controls, matches and prompts for a config.
pub fn prepare_inputs(
    cfg: &RunConfig,
    matcher: &dyn MatcherBackend,
    vlm: Option<&dyn VlmClient>,
) -> Result<SetInputs> {
    cfg.check_inputs()?;
    let dir = cfg.input_dir.as_deref().expect("checked");
    let images: Vec<RgbImage> = load_images(dir, cfg.width, cfg.height)
        .stage("load")?
        .into_iter()
        .map(|(_, im)| im)
        .collect();
    if images.len() < 2 {
        return Err(Error::config("input_dir", format!("{} holds {} images, need at least 2", dir.display(), images.len())));
    }
    let cache = dir.join(".setfuse-cache");
    let controls = if cfg.control.enabled {
        extract_controls(
            &images,
            &LuminanceDepth,
            &SobelEdges,
            (cfg.control.depth_weight, cfg.control.edge_weight),
            Some(&cache),
        )
        .stage("control")?
    } else {
        Vec::new()
    };
    let (maps, match_warnings) = match_set(
        &images,
        matcher,
        &MatchOptions { threshold: cfg.conf_threshold, cache_dir: Some(cache) },
    )
    .stage("correspondence")?;
    let p = &cfg.prompts;
    let mut prompts = match (&p.captions, vlm) {
        (Some(c), _) => PromptBundle {
            p_shared: p.shared.clone(),
            p_theme: p.theme.clone(),
            p_nonshared: c.clone(),
            p_source: None,
            warnings: Vec::new(),
        },
        (None, Some(client)) => compose_prompts(&p.shared, &p.theme, &images, client).stage("prompts")?,
        (None, None) => {
            let mut b = PromptBundle::fallback(&p.shared, &p.theme, images.len());
            b.warnings.push("no caption client configured; using templated captions".into());
            b
        }
    };
    if let Some(src) = &p.source_captions {
        prompts.p_source = Some(src.clone());
    }
    if cfg.mode == Mode::Edit && prompts.p_source.is_none() {
        return Err(Error::config("prompts.source_captions", "edit mode needs per-image source captions"));
    }
    prompts.validate(images.len()).map_err(|e| Error::config("prompts.captions", e.to_string()))?;
    prompts.warnings.extend(match_warnings);
    Ok(SetInputs { images, controls: controls.clone(), maps, prompts, matcher: matcher.name().to_string() })
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Write images, manifest and timings; the manifest is written last.
pub fn write_run(dir: &Path, output: &mut SetOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join("FAILED"));
    let mut outputs = Vec::new();
    for (i, img) in output.images.iter().enumerate() {
        let bytes = png_bytes(img)?;
        let file = format!("img_{i}.png");
        std::fs::write(dir.join(&file), &bytes)?;
        outputs.push(OutputRecord { file, sha256: sha256_hex(&bytes) });
    }
    for (t, imgs) in &output.intermediates {
        let d = dir.join("intermediate");
        std::fs::create_dir_all(&d)?;
        for (i, img) in imgs.iter().enumerate() {
            img.save(d.join(format!("t{t:02}_img_{i}.png")))?;
        }
    }
    if !output.features.is_empty() {
        let d = dir.join("features");
        std::fs::create_dir_all(&d)?;
        for (k, rec) in output.features.iter().enumerate() {
            write_features(&d.join(format!("feat_{k:06}.sfc")), rec)?;
        }
        let header = MatchCacheHeader { backend: "feature-grid".into(), threshold: 0.0 };
        for ((i, j), m) in &output.feature_maps {
            write_matches(&d.join(match_file_name(*i, *j)), m, &header)?;
        }
    }
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&output.timings)?)?;
    output.manifest.outputs = outputs;
    output.manifest.write(&dir.join("manifest.json"))
}

fn mark_failed(dir: &Path, err: &Error) {
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("FAILED"), format!("{err}\n"));
}

/// Run a config end to end and write `<output_dir>/<run-id>/`.
///
/// Any failure leaves a `FAILED` marker naming the failing stage beside
/// whatever was written.
pub fn run(cfg: &RunConfig, matcher: &dyn MatcherBackend, vlm: Option<&dyn VlmClient>) -> Result<RunManifest> {
    let dir = cfg.run_dir();
    let result = (|| {
        let backend = select_backend(cfg.backend, &cfg.mock).stage("backend")?;
        let inputs = prepare_inputs(cfg, matcher, vlm)?;
        let mut out = match cfg.mode {
            Mode::Generate => generate_set(cfg, &inputs, backend.as_ref())?,
            Mode::Edit => edit_set(cfg, &inputs, backend.as_ref())?,
        };
        write_run(&dir, &mut out).stage("write")?;
        Ok(out.manifest)
    })();
    if let Err(e) = &result {
        mark_failed(&dir, e);
    }
    result
}
