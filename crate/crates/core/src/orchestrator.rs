//! End-to-end story generation.
//!
//! Prompts are generated in batches of at most `B` with the anchor prompt
//! (index 1) in slot 0 of every batch. The anchor is the reference for
//! identity replacement and attention guidance, and its sampling stream is
//! keyed only by `(global_seed, prompt index)`, so its raster comes out the
//! same in every batch. Later copies are checked against the first by digest
//! and dropped.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{apply_cfg, AlphaRecord, GuidanceConfig, GuidanceHook};
use crate::image::ImageRaster;
use crate::prompt::{
    apply_identity_replacement, EmbeddingBatch, EmbeddingBlock, PromptEncoder, StorySpec,
};
use crate::rng::CounterStream;
use crate::scalewise::{
    accumulate, default_gamma, logistic, Decoder, FeatureMap, Grid, ResidualMap, ScaleSchedule,
};
use crate::transformer::{forward_batch, init_model, Branch, ModelDims, ModelParams, StepInput};

pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const DEFAULT_OUTPUT_SCALE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub schedule: ScaleSchedule,
    pub guidance: GuidanceConfig,
    pub dims: ModelDims,
    pub global_seed: u64,
    pub batch_size: usize,
    /// Bit-sampling temperature; 0 selects `bit = logit >= 0`.
    pub temperature: f64,
    /// Dequantized residual magnitude; defaults to `1/sqrt(channels)`.
    pub gamma: Option<f64>,
    /// Nearest-neighbor enlargement of written images.
    pub output_scale: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            schedule: ScaleSchedule::toy(),
            guidance: GuidanceConfig::default(),
            dims: ModelDims::default(),
            global_seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            temperature: 0.0,
            gamma: None,
            output_scale: DEFAULT_OUTPUT_SCALE,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.dims.validate()?;
        if let Some(&bad) = self
            .guidance
            .early_steps
            .iter()
            .find(|&&s| s == 0 || s > self.schedule.len())
        {
            return Err(Error::validation(format!(
                "early step {bad} outside schedule steps 1..={}",
                self.schedule.len()
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch size must be at least 2"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::validation(
                "temperature must be finite and non-negative",
            ));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::validation("gamma must be positive"));
            }
        }
        if self.output_scale == 0 {
            return Err(Error::validation("output scale must be at least 1"));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
            .unwrap_or_else(|| default_gamma(self.dims.channels))
    }
}

/// Batches of 1-based prompt indices; slot 0 of every batch is prompt 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
}

pub fn plan_batches(prompt_count: usize, batch_size: usize) -> Result<BatchPlan> {
    if prompt_count == 0 {
        return Err(Error::validation("story has no prompts"));
    }
    if prompt_count == 1 {
        return Ok(BatchPlan {
            batches: vec![vec![1]],
        });
    }
    if batch_size < 2 {
        return Err(Error::validation(
            "batch size must be at least 2 (anchor plus one follower)",
        ));
    }
    if prompt_count <= batch_size {
        return Ok(BatchPlan {
            batches: vec![(1..=prompt_count).collect()],
        });
    }
    let followers: Vec<usize> = (2..=prompt_count).collect();
    let batches = followers
        .chunks(batch_size - 1)
        .map(|chunk| std::iter::once(1).chain(chunk.iter().copied()).collect())
        .collect();
    Ok(BatchPlan { batches })
}

/// Everything a run shares across batches.
#[derive(Debug, Clone)]
pub struct Engine {
    pub config: GenerationConfig,
    pub params: ModelParams,
    pub decoder: Decoder,
}

impl Engine {
    pub fn new(config: GenerationConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model(config.global_seed, config.dims)?;
        let decoder = Decoder::seeded(config.global_seed, config.dims.channels);
        Ok(Self {
            config,
            params,
            decoder,
        })
    }

    pub fn encoder_for(&self, spec: &StorySpec) -> PromptEncoder {
        PromptEncoder::new(
            spec.seed.unwrap_or(self.config.global_seed),
            self.config.dims.text_width,
        )
    }

    /// Encodes the prompts of one batch and applies identity replacement when
    /// enabled.
    pub fn embed_batch(
        &self,
        spec: &StorySpec,
        prompt_indices: &[usize],
    ) -> Result<EmbeddingBatch> {
        let encoder = self.encoder_for(spec);
        let entries = prompt_indices
            .iter()
            .map(|&i| encoder.encode_prompt(spec, i))
            .collect::<Result<Vec<_>>>()?;
        let batch = EmbeddingBatch::new(entries)?;
        if self.config.guidance.enable_ipr {
            apply_identity_replacement(&batch)
        } else {
            Ok(batch)
        }
    }
}

/// Per-step intermediate values of a batch, kept for audits.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub prev: Vec<FeatureMap>,
    pub cond: Vec<Grid>,
    pub uncond: Vec<Grid>,
    pub guided: Vec<Grid>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub prompt_indices: Vec<usize>,
    /// Decoded rasters at latent resolution, one per slot.
    pub images: Vec<ImageRaster>,
    pub finals: Vec<FeatureMap>,
    pub alpha_records: Vec<AlphaRecord>,
    /// α values consumed by the unconditional branch.
    pub consumed_alphas: Vec<AlphaRecord>,
    pub conditional_passes: usize,
    pub unconditional_passes: usize,
    pub trace: Option<Vec<StepTrace>>,
}

fn sample_bits(guided: &Grid, temperature: f64, stream: &mut CounterStream) -> Vec<u8> {
    if temperature == 0.0 {
        return guided.data().iter().map(|&v| u8::from(v >= 0.0)).collect();
    }
    guided
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| u8::from(stream.at(i as u64) < logistic(v / temperature)))
        .collect()
}

/// Sampling stream for a prompt at a step; the counter inside is
/// `token · d + bit`.
pub fn sampling_stream(global_seed: u64, prompt_index: usize, step: usize) -> CounterStream {
    CounterStream::new(
        "storyscale/sample",
        &[global_seed, prompt_index as u64, step as u64],
    )
}

pub fn stream_id(global_seed: u64, prompt_index: usize) -> String {
    format!("{global_seed}:{prompt_index}")
}

/// Generates one batch. `embeddings` must already have identity replacement
/// applied when it is enabled.
pub fn generate_batch(
    engine: &Engine,
    prompt_indices: &[usize],
    embeddings: &EmbeddingBatch,
    record_trace: bool,
) -> Result<BatchOutput> {
    let config = &engine.config;
    if prompt_indices.len() != embeddings.len() {
        return Err(Error::shape("one embedding entry per prompt required"));
    }
    if config.guidance.enable_ipr && embeddings.len() > 1 && !embeddings.is_replaced() {
        return Err(Error::state(
            "identity replacement is enabled but was not applied",
        ));
    }
    let schedule = &config.schedule;
    let (h, w) = schedule.final_size();
    let gamma = config.gamma();
    let d = config.dims.channels;

    let prompts: Vec<EmbeddingBlock> = embeddings.entries().iter().map(|e| e.sequence()).collect();
    let null_prompt = EmbeddingBlock::empty(config.dims.text_width);
    let mut features: Vec<FeatureMap> = prompts
        .iter()
        .map(|p| FeatureMap::initial(h, w, &engine.params.initial_channels(p)))
        .collect();

    let mut hook = GuidanceHook::new(config.guidance.clone());
    let mut trace = record_trace.then(Vec::new);
    let (mut cond_passes, mut uncond_passes) = (0, 0);

    for step in 1..=schedule.len() {
        let size = schedule.size(step);
        let cond_inputs: Vec<StepInput> = features
            .iter()
            .zip(&prompts)
            .enumerate()
            .map(|(slot, (prev, prompt))| StepInput {
                prev,
                prompt,
                sample_index: slot,
            })
            .collect();
        let cond = forward_batch(
            &engine.params,
            &cond_inputs,
            step,
            size,
            Branch::Conditional,
            &mut hook,
        )?;
        cond_passes += cond_inputs.len();

        let uncond_inputs: Vec<StepInput> = features
            .iter()
            .enumerate()
            .map(|(slot, prev)| StepInput {
                prev,
                prompt: &null_prompt,
                sample_index: slot,
            })
            .collect();
        let uncond = forward_batch(
            &engine.params,
            &uncond_inputs,
            step,
            size,
            Branch::Unconditional,
            &mut hook,
        )?;
        uncond_passes += uncond_inputs.len();

        let guided = cond
            .iter()
            .zip(&uncond)
            .map(|(c, u)| apply_cfg(c, u, config.guidance.cfg_scale))
            .collect::<Result<Vec<_>>>()?;

        let next = features
            .iter()
            .zip(&guided)
            .zip(prompt_indices)
            .map(|((prev, g), &prompt_index)| {
                let mut stream = sampling_stream(config.global_seed, prompt_index, step);
                let bits = sample_bits(g, config.temperature, &mut stream);
                let residual = ResidualMap::from_bits(size.0, size.1, d, bits, gamma)?;
                accumulate(prev, &residual, step)
            })
            .collect::<Result<Vec<_>>>()?;

        if let Some(t) = trace.as_mut() {
            t.push(StepTrace {
                step,
                prev: features.clone(),
                cond,
                uncond,
                guided,
            });
        }
        features = next;
    }

    let images = features
        .iter()
        .map(|f| engine.decoder.decode(f.grid()))
        .collect::<Result<Vec<_>>>()?;
    let consumed_alphas = hook.consumed().to_vec();
    Ok(BatchOutput {
        prompt_indices: prompt_indices.to_vec(),
        images,
        finals: features,
        alpha_records: hook.into_records(),
        consumed_alphas,
        conditional_passes: cond_passes,
        unconditional_passes: uncond_passes,
        trace,
    })
}

/// An α record placed in its batch and prompt context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoryAlphaRecord {
    pub batch: usize,
    pub prompt_index: usize,
    pub slot: usize,
    pub step: usize,
    pub layer: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct StoryImage {
    pub prompt_index: usize,
    pub batch: usize,
    /// Latent-resolution raster (what metrics consume).
    pub raster: ImageRaster,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StoryOutput {
    pub plan: BatchPlan,
    /// One image per prompt, ordered by prompt index.
    pub images: Vec<StoryImage>,
    pub alpha_records: Vec<StoryAlphaRecord>,
    /// Anchor digest from each batch, in batch order.
    pub anchor_digests: Vec<String>,
    pub batch_seconds: Vec<f64>,
}

pub fn generate_story(spec: &StorySpec, config: &GenerationConfig) -> Result<StoryOutput> {
    spec.validate()?;
    let engine = Engine::new(config.clone())?;
    generate_story_with(&engine, spec)
}

pub fn generate_story_with(engine: &Engine, spec: &StorySpec) -> Result<StoryOutput> {
    let plan = plan_batches(spec.len(), engine.config.batch_size)?;
    let mut images: Vec<StoryImage> = Vec::with_capacity(spec.len());
    let mut alpha_records = Vec::new();
    let mut anchor_digests = Vec::new();
    let mut batch_seconds = Vec::new();

    for (b, indices) in plan.batches.iter().enumerate() {
        let started = Instant::now();
        let embeddings = engine.embed_batch(spec, indices)?;
        let out = generate_batch(engine, indices, &embeddings, false)?;
        let elapsed = started.elapsed().as_secs_f64();
        batch_seconds.push(elapsed);

        let anchor_digest = out.images[0].digest();
        if let Some(first) = anchor_digests.first() {
            if *first != anchor_digest {
                return Err(Error::Integrity(format!(
                    "anchor image in batch {} differs from batch 1",
                    b + 1
                )));
            }
        }
        anchor_digests.push(anchor_digest);

        alpha_records.extend(out.alpha_records.iter().map(|r| StoryAlphaRecord {
            batch: b + 1,
            prompt_index: indices[r.sample_index],
            slot: r.sample_index,
            step: r.step,
            layer: r.layer,
            alpha: r.alpha,
        }));

        let per_image = elapsed / indices.len() as f64;
        for (slot, (raster, &prompt_index)) in out.images.into_iter().zip(indices).enumerate() {
            if slot == 0 && b > 0 {
                continue;
            }
            images.push(StoryImage {
                prompt_index,
                batch: b + 1,
                raster,
                seconds: per_image,
            });
        }
    }
    images.sort_by_key(|i| i.prompt_index);
    Ok(StoryOutput {
        plan,
        images,
        alpha_records,
        anchor_digests,
        batch_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub prompt_index: usize,
    pub batch: usize,
    pub stream_id: String,
    pub path: String,
    pub sha256: String,
}

/// `manifest.json`. Contains no timings, so equal runs give equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub plan: BatchPlan,
    pub images: Vec<ManifestImage>,
    pub anchor_digests: Vec<String>,
    pub alpha_records: Vec<StoryAlphaRecord>,
}

/// `timings.json`, written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub batch_seconds: Vec<f64>,
    pub image_seconds: Vec<(usize, f64)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

pub fn image_file_name(prompt_index: usize) -> String {
    format!("story_{prompt_index}.ppm")
}

/// Writes `story_<i>.ppm`, `manifest.json` and `timings.json` into `out_dir`
/// and verifies every image by re-reading it.
pub fn write_story(
    out_dir: &Path,
    output: &StoryOutput,
    config: &GenerationConfig,
    config_echo: serde_json::Value,
) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut images = Vec::with_capacity(output.images.len());
    for img in &output.images {
        let name = image_file_name(img.prompt_index);
        let path: PathBuf = out_dir.join(&name);
        let digest = img
            .raster
            .enlarge_nearest(config.output_scale)
            .write_ppm(&path)?;
        let reread = crate::image::digest_bytes(&std::fs::read(&path)?);
        if reread != digest {
            return Err(Error::Integrity(format!(
                "{name} digest changed after write"
            )));
        }
        images.push(ManifestImage {
            prompt_index: img.prompt_index,
            batch: img.batch,
            stream_id: stream_id(config.global_seed, img.prompt_index),
            path: name,
            sha256: digest,
        });
    }
    let manifest = RunManifest {
        config: config_echo,
        plan: output.plan.clone(),
        images,
        anchor_digests: output.anchor_digests.clone(),
        alpha_records: output.alpha_records.clone(),
    };
    std::fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let timings = RunTimings {
        batch_seconds: output.batch_seconds.clone(),
        image_seconds: output
            .images
            .iter()
            .map(|i| (i.prompt_index, i.seconds))
            .collect(),
    };
    std::fs::write(
        out_dir.join(TIMINGS_FILE),
        serde_json::to_string_pretty(&timings)? + "\n",
    )?;
    Ok(manifest)
}

/// Re-hashes every image listed in a run directory's manifest. Returns the
/// names of files whose digest does not match.
pub fn verify_run_dir(dir: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let mut bad = Vec::new();
    for img in &manifest.images {
        match std::fs::read(dir.join(&img.path)) {
            Ok(bytes) if crate::image::digest_bytes(&bytes) == img.sha256 => {}
            _ => bad.push(img.path.clone()),
        }
    }
    Ok(bad)
}
