use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use setfuse::cache::{read_features, read_matches};
use setfuse::correspondence::{PairMaps, PatchNccMatcher};
use setfuse::evaluation::{
    analyze_features, clip_adherence, dino_matchsim, similarity_table_tsv, FeatureExtractor, ForegroundMask, HttpClipScorer,
    PatchStats,
};
use setfuse::pipeline::{load_config, load_images, match_set, run, MatchOptions, Mode, RunConfig, RunManifest};
use setfuse::prompts::{compose_prompts, ChatCompletionClient, PromptBundle, VlmClient};

#[derive(Parser)]
#[command(name = "setfuse", version, about = "Consistent image-set generation and editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and cache pairwise matches of an image directory.
    Match {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        threshold: f32,
        #[arg(long, default_value_t = 512)]
        size: u32,
        /// Cache directory; defaults to `<in>/.setfuse-cache`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compose per-image captions with the configured VLM.
    Prompt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        shared: String,
        #[arg(long, default_value = "")]
        theme: String,
        #[arg(long, default_value_t = 512)]
        size: u32,
        /// Write the bundle here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a new set from a run config.
    Generate(RunArgs),
    /// Locally edit a set from a run config.
    Edit(RunArgs),
    /// Score a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "dino-matchsim")]
        metrics: String,
        /// Directory of foreground masks, one per source image in name order.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Matched-feature similarity table from dumped run features.
    Analyze {
        #[arg(long)]
        features: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    no_mff: bool,
    #[arg(long)]
    no_graph: bool,
    #[arg(long)]
    degree_cap: Option<usize>,
    #[arg(long)]
    match_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
}

impl RunArgs {
    fn config(&self, mode: Mode) -> anyhow::Result<RunConfig> {
        let mut cfg = load_config(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        cfg.mode = mode;
        cfg.ablation.no_guidance |= self.no_guidance;
        cfg.ablation.no_mff |= self.no_mff;
        cfg.ablation.no_graph |= self.no_graph;
        if let Some(d) = self.degree_cap {
            cfg.degree_cap = d;
        }
        if let Some(f) = self.match_fraction {
            cfg.match_fraction = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(id) = &self.run_id {
            cfg.run_id = Some(id.clone());
        }
        cfg.check()?;
        Ok(cfg)
    }
}

fn vlm_client() -> Option<ChatCompletionClient> {
    ChatCompletionClient::from_env().ok()
}

fn execute(args: &RunArgs, mode: Mode) -> anyhow::Result<()> {
    let cfg = args.config(mode)?;
    let client = vlm_client();
    let vlm = client.as_ref().map(|c| c as &dyn VlmClient);
    let manifest = run(&cfg, &PatchNccMatcher::default(), vlm)?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    println!("{}", cfg.run_dir().display());
    Ok(())
}

fn eval(run_dir: &Path, metrics: &str, masks: Option<&Path>) -> anyhow::Result<()> {
    let manifest = RunManifest::read(&run_dir.join("manifest.json"))?;
    let cfg = &manifest.config;
    let input = cfg.input_dir.as_ref().context("run manifest has no input_dir")?;
    let sources: Vec<_> = load_images(input, cfg.width, cfg.height)?.into_iter().map(|(_, im)| im).collect();
    let outputs: Vec<_> = manifest
        .outputs
        .iter()
        .map(|o| image::open(run_dir.join(&o.file)).map(|im| im.to_rgb8()))
        .collect::<Result<_, _>>()?;
    let mut report = serde_json::Map::new();
    for metric in metrics.split(',').map(str::trim) {
        match metric {
            "dino-matchsim" => {
                let ex = PatchStats::default();
                let src = sources.iter().map(|im| ex.extract(im)).collect::<Result<Vec<_>, _>>()?;
                let out = outputs.iter().map(|im| ex.extract(im)).collect::<Result<Vec<_>, _>>()?;
                let fg = match masks {
                    Some(dir) => {
                        let files = load_images(dir, cfg.width, cfg.height)?;
                        if files.len() != src.len() {
                            bail!("{} masks for {} source images", files.len(), src.len());
                        }
                        let grid = src[0].grid();
                        Some(
                            files
                                .iter()
                                .map(|(_, im)| ForegroundMask::from_mask_image(&image::imageops::grayscale(im), grid))
                                .collect::<Result<Vec<_>, _>>()?,
                        )
                    }
                    None => None,
                };
                let r = dino_matchsim(&src, &out, fg.as_deref(), ex.name())?;
                report.insert(metric.into(), serde_json::to_value(r)?);
            }
            "clip" => {
                let scorer = HttpClipScorer::from_env()?;
                report.insert(metric.into(), clip_adherence(&outputs, &manifest.prompts, &scorer)?.into());
            }
            other => bail!("unknown metric {other}"),
        }
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn analyze(dir: &Path) -> anyhow::Result<()> {
    let mut records = Vec::new();
    let mut maps = PairMaps::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("feat_") {
            records.push(read_features(&p)?);
        } else if name.starts_with("match_") {
            let (m, _) = read_matches(&p)?;
            maps.insert(m.pair, m);
        }
    }
    if records.is_empty() {
        bail!("no feature dumps in {}", dir.display());
    }
    print!("{}", similarity_table_tsv(&analyze_features(&records, &maps)?));
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Match { input, threshold, size, out } => {
            let images: Vec<_> = load_images(&input, size, size)?.into_iter().map(|(_, im)| im).collect();
            let matcher = PatchNccMatcher::default();
            let opts = MatchOptions { threshold, cache_dir: Some(out.unwrap_or_else(|| input.join(".setfuse-cache"))) };
            let (maps, warnings) = match_set(&images, &matcher, &opts)?;
            for w in warnings {
                log::warn!("{w}");
            }
            for ((i, j), m) in &maps {
                println!("{i}\t{j}\t{}", m.len());
            }
        }
        Command::Prompt { input, shared, theme, size, out } => {
            let images: Vec<_> = load_images(&input, size, size)?.into_iter().map(|(_, im)| im).collect();
            let bundle = match vlm_client() {
                Some(c) => compose_prompts(&shared, &theme, &images, &c)?,
                None => {
                    log::warn!("SETFUSE_VLM_ENDPOINT is not set; using templated captions");
                    PromptBundle::fallback(&shared, &theme, images.len())
                }
            };
            let json = serde_json::to_string_pretty(&bundle)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Generate(args) => execute(&args, Mode::Generate)?,
        Command::Edit(args) => execute(&args, Mode::Edit)?,
        Command::Eval { run, metrics, masks } => eval(&run, &metrics, masks.as_deref())?,
        Command::Analyze { features } => analyze(&features)?,
    }
    Ok(())
}
