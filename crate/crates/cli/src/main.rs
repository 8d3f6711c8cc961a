// SPDX-License-Identifier: MIT OR Apache-2.0

//! `scalewise`: generation, personalization and analysis from the shell.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on usage errors
//! (bad flags, missing inputs, unreadable config).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use scalewise_core::analysis::{emit_report, qkv_swap_study_with, stepwise_influence_with};
use scalewise_core::numerics::checksum_hex;
use scalewise_core::pipeline::{baseline_generate_with, personalize_with_image, style_aligned_generate_with};
use scalewise_core::{read_ppm, write_ppm, Image, Model};
use serde::Serialize;
use serde_json::json;

use config::{Inputs, RunConfig, EMBED_KEY};

const THREADS_ENV: &str = "SCALEWISE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "scalewise", version, about = "Scale-wise image generation with training-free style personalization")]
struct Cli {
    /// Run config JSON, or an artifact that embeds one.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config file).
    #[arg(short = 'o', long = "out", global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plain generation from one prompt.
    Generate {
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Style personalization from a reference image.
    Personalize {
        #[command(flatten)]
        prompts: StylePrompts,
        /// Reference image (binary PPM, any size).
        #[arg(long, value_name = "FILE")]
        style_image: Option<PathBuf>,
        /// Skip feature initialization from the style image.
        #[arg(long)]
        no_init: bool,
        #[command(flatten)]
        sharing: SharingFlags,
    },
    /// Three-path generation without a reference image.
    StyleAligned {
        #[command(flatten)]
        prompts: StylePrompts,
        #[command(flatten)]
        sharing: SharingFlags,
    },
    /// Diagnostic studies.
    Analyze {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Debug, Args)]
struct StylePrompts {
    /// Content prompt.
    #[arg(long)]
    content: Option<String>,
    /// Style prompt.
    #[arg(long)]
    style_text: Option<String>,
}

#[derive(Debug, Args)]
struct SharingFlags {
    /// Disable key-stage attention sharing.
    #[arg(long)]
    no_ksas: bool,
    /// Disable adaptive query sharing.
    #[arg(long)]
    no_aqs: bool,
    /// Pin the query blend weight instead of using cosine similarity.
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f32>,
}

#[derive(Debug, Subcommand)]
enum Study {
    /// Swap the prompt at one step at a time.
    Inject(PromptPair),
    /// Regenerate the alternative prompt with Q, K or V from the base prompt.
    Swap(PromptPair),
}

#[derive(Debug, Args)]
struct PromptPair {
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    alt_prompt: Option<String>,
}

fn parse_alpha(s: &str) -> std::result::Result<f32, String> {
    let a: f32 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("alpha must lie in [0, 1], got {s}"))
    }
}

// ---------------------------------------------------------------------------
// Resolution of flags over config
// ---------------------------------------------------------------------------

fn usage_error(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, name: &str) -> T {
    flag.clone()
        .or_else(|| file.clone())
        .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, format!("--{name} is required")))
}

fn apply_sharing(cfg: &mut RunConfig, sharing: &SharingFlags) {
    let o = &mut cfg.plan_overrides;
    if sharing.no_ksas {
        o.ksas = Some(false);
    }
    if sharing.no_aqs {
        o.aqs = Some(false);
    }
    if sharing.alpha.is_some() {
        o.alpha_override = sharing.alpha;
    }
}

/// Overlay command-line values on the file config, keeping only the inputs
/// the command uses.
fn resolve(cli: &Cli, mut cfg: RunConfig) -> RunConfig {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let file = std::mem::take(&mut cfg.inputs);
    cfg.inputs = match &cli.command {
        Command::Generate { prompt } => {
            Inputs { prompt: Some(pick(prompt, &file.prompt, "prompt")), ..Inputs::default() }
        }
        Command::Personalize { prompts, style_image, no_init, sharing } => {
            if *no_init {
                cfg.plan_overrides.feature_init = Some(false);
            }
            apply_sharing(&mut cfg, sharing);
            Inputs {
                content: Some(pick(&prompts.content, &file.content, "content")),
                style_text: Some(pick(&prompts.style_text, &file.style_text, "style-text")),
                style_image: Some(pick(style_image, &file.style_image, "style-image")),
                ..Inputs::default()
            }
        }
        Command::StyleAligned { prompts, sharing } => {
            apply_sharing(&mut cfg, sharing);
            Inputs {
                content: Some(pick(&prompts.content, &file.content, "content")),
                style_text: Some(pick(&prompts.style_text, &file.style_text, "style-text")),
                ..Inputs::default()
            }
        }
        Command::Analyze { study: Study::Inject(p) | Study::Swap(p) } => Inputs {
            prompt: Some(pick(&p.prompt, &file.prompt, "prompt")),
            alt_prompt: Some(pick(&p.alt_prompt, &file.alt_prompt, "alt-prompt")),
            ..Inputs::default()
        },
    };
    cfg
}

fn configure_threads() {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return };
    let n: usize = raw.trim().parse().unwrap_or_else(|_| {
        usage_error(ErrorKind::InvalidValue, format!("{THREADS_ENV} must be a count, got {raw:?}"))
    });
    if n > 0 {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn image(&mut self, name: &str, img: &Image) -> Result<()> {
        let path = self.dir.join(name);
        write_ppm(img, &path)?;
        self.written.push(path);
        Ok(())
    }
}

fn required(field: &Option<String>) -> &str {
    field.as_deref().expect("resolved inputs are complete")
}

fn run(command: &Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = Model::new(cfg.model.clone()).context("building model")?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let inputs = &cfg.inputs;
    match command {
        Command::Generate { .. } => {
            let (img, trace) = baseline_generate_with(&model, required(&inputs.prompt), cfg.seed, false)?;
            out.image("baseline.ppm", &img)?;
            out.json(
                "trace.json",
                &json!({
                    EMBED_KEY: cfg,
                    "config_hash": checksum_hex(cfg.model.config_hash()),
                    "image_checksum": checksum_hex(img.checksum()),
                    "trace": trace.report(),
                }),
            )?;
        }
        Command::Personalize { .. } => {
            let path = inputs.style_image.as_ref().expect("resolved inputs are complete");
            let style = read_ppm(path).context("reading style image")?;
            let (img, bundle) = personalize_with_image(
                &model,
                required(&inputs.content),
                required(&inputs.style_text),
                &style,
                cfg.seed,
                Some(&cfg.plan_overrides),
            )?;
            out.image("personalized.ppm", &img)?;
            out.json(
                "bundle.json",
                &json!({
                    EMBED_KEY: cfg,
                    "image_checksum": checksum_hex(img.checksum()),
                    "bundle": bundle.report(&cfg.model),
                }),
            )?;
        }
        Command::StyleAligned { .. } => {
            let (img, bundle) = style_aligned_generate_with(
                &model,
                required(&inputs.content),
                required(&inputs.style_text),
                cfg.seed,
                Some(&cfg.plan_overrides),
            )?;
            out.image("style_aligned.ppm", &img)?;
            out.json(
                "bundle.json",
                &json!({
                    EMBED_KEY: cfg,
                    "image_checksum": checksum_hex(img.checksum()),
                    "bundle": bundle.report(&cfg.model),
                }),
            )?;
        }
        Command::Analyze { study } => {
            let (base, alt) = (required(&inputs.prompt), required(&inputs.alt_prompt));
            let written = match study {
                Study::Inject(_) => {
                    emit_report(&stepwise_influence_with(&model, base, alt, cfg.seed)?, out.dir.join("curve.json"))?
                }
                Study::Swap(_) => {
                    emit_report(&qkv_swap_study_with(&model, base, alt, cfg.seed)?, out.dir.join("swap_report.json"))?
                }
            };
            out.written.extend(written);
            out.json("config.json", cfg)?;
        }
    }
    Ok(out.written)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let base = match &cli.config {
        Some(path) => RunConfig::load(path).unwrap_or_else(|e| usage_error(ErrorKind::InvalidValue, format!("{e:#}"))),
        None => RunConfig::default(),
    };
    let cfg = resolve(&cli, base);
    match run(&cli.command, &cfg) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
