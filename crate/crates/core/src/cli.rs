//! Command-line surface: `generate`, `sweep`, `evaluate`, `golden-check`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{parse_list, RunConfig};
use crate::error::{Error, Result};
use crate::guidance::AlphaScope;
use crate::image::{ImageRaster, Mask};
use crate::metrics::{
    compare_reports, evaluate_run, Embedders, EvaluationConfig, EvaluationReport, ScoreSet,
};
use crate::orchestrator::{
    generate_story, image_file_name, verify_run_dir, write_story, RunManifest, MANIFEST_FILE,
};
use crate::prompt::{parse_story_spec, StorySpec};

pub const STORY_COPY_FILE: &str = "story.toml";

#[derive(Debug, Parser)]
#[command(
    name = "storyscale",
    version,
    about = "Consistent story image generation on a toy scale-wise engine"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one image per story prompt plus a manifest.
    Generate(RunArgs),
    /// Run one generation per lambda value and summarize toy metrics.
    Sweep(RunArgs),
    /// Score a directory of story images.
    Evaluate(EvaluateArgs),
    /// Verify the image digests recorded in run manifests.
    GoldenCheck(GoldenArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub story: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated 1-based step indices, e.g. `2,3`.
    #[arg(long)]
    pub early_steps: Option<String>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub no_ipr: bool,
    #[arg(long)]
    pub no_asi: bool,
    #[arg(long)]
    pub no_sga: bool,
    /// `toy`, `full`, or a size list like `1x1,2x2,4x4,8x8`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// `per-layer` or `per-step`.
    #[arg(long)]
    pub alpha_scope: Option<String>,
    /// Comma-separated lambda values for `sweep`.
    #[arg(long)]
    pub sweep: Option<String>,
}

impl RunArgs {
    /// File values (or defaults) with every given flag applied on top.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.story {
            c.story = Some(v.clone());
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = &self.early_steps {
            c.early_steps = parse_list(v, "early step")?;
        }
        if let Some(v) = self.cfg_scale {
            c.cfg_scale = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.temperature {
            c.temperature = v;
        }
        if self.no_ipr {
            c.enable_ipr = false;
        }
        if self.no_asi {
            c.enable_asi = false;
        }
        if self.no_sga {
            c.enable_sga = false;
        }
        if let Some(v) = &self.schedule {
            c.schedule = v.clone();
        }
        if let Some(v) = &self.alpha_scope {
            c.alpha_scope = match v.as_str() {
                "per-layer" | "per_layer" => AlphaScope::PerLayer,
                "per-step" | "per_step" => AlphaScope::PerStep,
                other => return Err(Error::validation(format!("unknown alpha scope `{other}`"))),
            };
        }
        if let Some(v) = &self.sweep {
            c.sweep = Some(parse_list(v, "sweep lambda")?);
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvaluateArgs {
    /// Directory holding `story_<i>.ppm` files.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Story file; defaults to the run directory's `story.toml`.
    #[arg(long)]
    pub story: Option<PathBuf>,
    /// Directory holding `mask_<i>.pgm` (or `.ppm`) foreground masks.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Output path for the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// `clip_t,clip_i,dreamsim,dino`: print the harmonic score and exit.
    #[arg(long)]
    pub scores: Option<String>,
    /// Evaluate two run directories and report `B - A`.
    #[arg(long, num_args = 2, value_names = ["DIR_A", "DIR_B"])]
    pub compare: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GoldenArgs {
    /// Run directories to verify.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Also require every listed directory to hold byte-identical images.
    #[arg(long)]
    pub identical: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args.effective_config()?).map(|_| ()),
        Command::Sweep(args) => cmd_sweep(&args.effective_config()?).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::GoldenCheck(args) => cmd_golden_check(&args),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::validation(format!("missing required {flag}")))
}

fn load_story(path: &Path) -> Result<StorySpec> {
    parse_story_spec(&std::fs::read_to_string(path)?)
}

/// Generates the story described by `config` and writes its run directory.
pub fn cmd_generate(config: &RunConfig) -> Result<RunManifest> {
    let story_path = require(&config.story, "--story")?;
    let out = require(&config.out, "--out")?;
    let gen = config.generation_config()?;
    let story_text = std::fs::read_to_string(story_path)?;
    let spec = parse_story_spec(&story_text)?;
    let output = generate_story(&spec, &gen)?;
    let manifest = write_story(out, &output, &gen, serde_json::to_value(config)?)?;
    std::fs::write(out.join(STORY_COPY_FILE), story_text)?;
    let bad = verify_run_dir(out)?;
    if !bad.is_empty() {
        return Err(Error::Integrity(format!(
            "digest mismatch for {}",
            bad.join(", ")
        )));
    }
    log::info!(
        "wrote {} images to {}",
        manifest.images.len(),
        out.display()
    );
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub dir: String,
    pub mean_follower_alpha: Option<f64>,
    pub report: Option<EvaluationReport>,
}

pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";

pub fn sweep_dir_name(lambda: f64) -> String {
    format!("sweep_{lambda}")
}

pub fn cmd_sweep(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let lambdas = config.sweep_values()?;
    let out = require(&config.out, "--out")?.clone();
    let story_path = require(&config.story, "--story")?;
    let spec = load_story(story_path)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for lambda in lambdas {
        let sub = RunConfig {
            lambda,
            out: Some(out.join(sweep_dir_name(lambda))),
            sweep: None,
            ..config.clone()
        };
        let manifest = cmd_generate(&sub)?;
        let followers: Vec<f64> = manifest
            .alpha_records
            .iter()
            .filter(|r| r.slot > 0)
            .map(|r| r.alpha)
            .collect();
        let mean_follower_alpha =
            (!followers.is_empty()).then(|| followers.iter().sum::<f64>() / followers.len() as f64);
        let report = if spec.len() >= 2 {
            Some(evaluate_dir(
                sub.out.as_ref().expect("set above"),
                &spec,
                None,
                0,
            )?)
        } else {
            None
        };
        rows.push(SweepRow {
            lambda,
            dir: sweep_dir_name(lambda),
            mean_follower_alpha,
            report,
        });
    }
    std::fs::write(
        out.join(SWEEP_SUMMARY_FILE),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    eprintln!(
        "{:>8} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "lambda", "clip_t", "clip_i", "dreamsim", "dino", "S_H"
    );
    for row in &rows {
        if let Some(r) = &row.report {
            eprintln!(
                "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
                row.lambda,
                r.scores.clip_t,
                r.scores.clip_i,
                r.scores.dreamsim,
                r.scores.dino,
                r.harmonic_score
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
    }
    Ok(rows)
}

/// Reads `story_1.ppm .. story_N.ppm` from a directory.
pub fn read_story_images(dir: &Path, count: usize) -> Result<Vec<ImageRaster>> {
    (1..=count)
        .map(|i| {
            let path = dir.join(image_file_name(i));
            if !path.exists() {
                return Err(Error::validation(format!(
                    "missing image {}",
                    path.display()
                )));
            }
            ImageRaster::read_ppm(&path)
        })
        .collect()
}

fn read_masks(dir: &Path, count: usize) -> Result<Vec<Mask>> {
    (1..=count)
        .map(|i| {
            let pgm = dir.join(format!("mask_{i}.pgm"));
            let ppm = dir.join(format!("mask_{i}.ppm"));
            let path = if pgm.exists() { pgm } else { ppm };
            Mask::from_netpbm(&std::fs::read(&path).map_err(|e| {
                Error::validation(format!("cannot read mask {}: {e}", path.display()))
            })?)
        })
        .collect()
}

pub fn evaluate_dir(
    dir: &Path,
    spec: &StorySpec,
    masks: Option<&Path>,
    noise_seed: u64,
) -> Result<EvaluationReport> {
    let images = read_story_images(dir, spec.len())?;
    let prompts: Vec<String> = (1..=spec.len()).map(|i| spec.prompt_text(i)).collect();
    let masks = masks.map(|m| read_masks(m, spec.len())).transpose()?;
    evaluate_run(
        &images,
        &prompts,
        masks.as_deref(),
        &Embedders::default(),
        &EvaluationConfig { noise_seed },
    )
}

fn story_for_dir(dir: &Path, explicit: &Option<PathBuf>) -> Result<StorySpec> {
    match explicit {
        Some(p) => load_story(p),
        None => load_story(&dir.join(STORY_COPY_FILE)),
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if let Some(text) = &args.scores {
        let value = ScoreSet::parse(text)?.harmonic()?;
        println!("{value:.4}");
        return Ok(());
    }
    if let Some(dirs) = &args.compare {
        let (a_dir, b_dir) = (&dirs[0], &dirs[1]);
        let a = evaluate_dir(
            a_dir,
            &story_for_dir(a_dir, &args.story)?,
            None,
            args.noise_seed,
        )?;
        let b = evaluate_dir(
            b_dir,
            &story_for_dir(b_dir, &args.story)?,
            None,
            args.noise_seed,
        )?;
        let report = compare_reports(a, b);
        let path = args
            .report
            .clone()
            .unwrap_or_else(|| b_dir.join("comparison.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        eprintln!("wrote {}", path.display());
        return Ok(());
    }
    let dir = require(&args.images, "--images")?;
    let spec = story_for_dir(dir, &args.story)?;
    if spec.len() < 2 {
        return Err(Error::validation(
            "evaluation needs a story with at least 2 images",
        ));
    }
    let report = evaluate_dir(dir, &spec, args.masks.as_deref(), args.noise_seed)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let path = args
        .report
        .clone()
        .unwrap_or_else(|| dir.join("report.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_golden_check(args: &GoldenArgs) -> Result<()> {
    let mut reference: Option<(PathBuf, Vec<(String, String)>)> = None;
    for dir in &args.dirs {
        let bad = verify_run_dir(dir)?;
        if !bad.is_empty() {
            return Err(Error::Integrity(format!(
                "{}: digest mismatch for {}",
                dir.display(),
                bad.join(", ")
            )));
        }
        if args.identical {
            let manifest: RunManifest =
                serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
            let digests: Vec<(String, String)> = manifest
                .images
                .into_iter()
                .map(|i| (i.path, i.sha256))
                .collect();
            match &reference {
                None => reference = Some((dir.clone(), digests)),
                Some((first, expected)) if *expected != digests => {
                    return Err(Error::Integrity(format!(
                        "{} and {} hold different images",
                        first.display(),
                        dir.display()
                    )))
                }
                Some(_) => {}
            }
        }
        eprintln!("ok {}", dir.display());
    }
    Ok(())
}
